//! Command-line front end: data generation, training, evaluation, ablation
//! sweeps and reports.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O
//! error, 3 non-finite loss or gradient.

pub mod config;
pub mod report;
pub mod sweep;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::ExperimentConfig;
use crate::encoders::{init_frozen, FrozenWeights};
use crate::error::{Error, Result};
use crate::losses::LossSet;
use crate::synthdata::{self, Generated};
use crate::trainer::{accuracy, fit, infer, metrics_csv, save_checkpoint, write_text, Banks, PromptMode};
use sweep::{evaluate_parallel, results_csv, run_sweep, settings, thread_cap, SweepKind};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVALUATION_FILE: &str = "evaluation.csv";

#[derive(Debug, Parser)]
#[command(name = "promptalign", version, about = "Domain-adaptive prompt learning on synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate source, target-train and target-test splits.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Multiplies both the style offset and the log-gain range; 0 removes the domain gap.
        #[arg(long)]
        shift: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one run and write metrics and a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        over: Overrides,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train several runs and report target accuracy mean and std.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        over: Overrides,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one setting and write a results CSV.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        over: Overrides,
        /// loss, layers, tokens or prompt.
        #[arg(long)]
        sweep: SweepKind,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render SVG charts and a summary from results or metrics CSVs.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// Config file of `key=value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct Overrides {
    /// full, ce, ce+align, ce+smn or ce+smn+em.
    #[arg(long)]
    pub loss: Option<LossSet>,
    /// Number of vision layers feeding style and content.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Number of context tokens.
    #[arg(long)]
    pub tokens: Option<usize>,
    #[arg(long)]
    pub runs: Option<usize>,
    /// full, no-dat, manual-ist or sst-mean.
    #[arg(long)]
    pub prompt: Option<PromptMode>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            c.set_seed(s);
        }
        Ok(c)
    }
}

impl Overrides {
    fn apply(&self, c: &mut ExperimentConfig) {
        let t = &mut c.train;
        if let Some(l) = self.loss {
            t.weights = l.weights();
        }
        if let Some(k) = self.layers {
            t.layers = k;
        }
        if let Some(l) = self.tokens {
            t.context_len = l;
        }
        if let Some(r) = self.runs {
            t.runs = r;
        }
        if let Some(p) = self.prompt {
            t.prompt = p;
        }
    }
}

/// Loaded data with the config adjusted to match it, plus frozen encoders
/// and their feature banks. The dataset fixes the data section and the
/// default seed; `--seed` then reseeds only the encoders and the trainer.
struct Prepared {
    config: ExperimentConfig,
    frozen: FrozenWeights,
    banks: Banks,
}

fn prepare(common: &Common, over: &Overrides, data_dir: &Path) -> Result<Prepared> {
    let mut config = common.resolve()?;
    let data: Generated = synthdata::load_all(data_dir)?;
    config.set_data(data.source.config.clone());
    if let Some(s) = common.seed {
        config.set_run_seed(s);
    }
    over.apply(&mut config);
    config.model.validate()?;
    let frozen = init_frozen(&config.model)?;
    config.train.validate(&frozen)?;
    let banks = Banks::build(&data, &frozen)?;
    Ok(Prepared { config, frozen, banks })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, shift, out } => {
            let mut c = common.resolve()?;
            if let Some(s) = shift {
                if !s.is_finite() || s < 0.0 {
                    return Err(Error::Config(format!("--shift must be a nonnegative number, got {s}")));
                }
                c.data.shift_offset *= s;
                c.data.shift_log_gain *= s;
            }
            c.validate()?;
            let data = synthdata::generate(&c.data)?;
            create_dir(&out)?;
            synthdata::save_all(&data, &out)?;
            write_text(&out.join(CONFIG_FILE), &c.to_text())?;
            println!(
                "wrote {} source, {} target-train, {} target-test images to {}",
                data.source.len(),
                data.target_train.len(),
                data.target_test.len(),
                out.display()
            );
        }
        Command::Train { common, over, data, out } => {
            let p = prepare(&common, &over, &data)?;
            let state = fit(&p.frozen, &p.config.train, &p.banks, p.config.train.seed)?;
            let acc = accuracy(&infer(&p.frozen, &p.config.train, &state, &p.banks.target_test)?, &p.banks.test_labels)?;
            create_dir(&out)?;
            write_text(&out.join(METRICS_FILE), &metrics_csv(&state.history))?;
            write_text(&out.join(CONFIG_FILE), &p.config.to_text())?;
            let mut meta = serde_json::Map::new();
            meta.insert("config_hash".into(), p.config.hash().into());
            meta.insert("frozen_checksum".into(), p.frozen.checksum().into());
            meta.insert("steps".into(), state.step.into());
            save_checkpoint(&out, &p.frozen, &state, meta)?;
            println!("target accuracy: {acc:.2}");
        }
        Command::Evaluate { common, over, data, out } => {
            let p = prepare(&common, &over, &data)?;
            let e = evaluate_parallel(&p.frozen, &p.config.train, &p.banks, thread_cap()?)?;
            if let Some(out) = out {
                create_dir(&out)?;
                let mut csv = String::from("run,seed,target_acc\n");
                for (r, a) in e.accuracies.iter().enumerate() {
                    csv.push_str(&format!("{r},{},{a}\n", p.config.train.seed + r as u64));
                }
                write_text(&out.join(EVALUATION_FILE), &csv)?;
                write_text(&out.join(CONFIG_FILE), &p.config.to_text())?;
            }
            println!("target accuracy: {:.2} +- {:.2} over {} runs", e.mean, e.std, e.accuracies.len());
        }
        Command::Ablate { common, over, sweep, data, out } => {
            let p = prepare(&common, &over, &data)?;
            let points = settings(sweep, &p.config);
            let rows = run_sweep(sweep, &points, &p.frozen, &p.banks, thread_cap()?)?;
            create_dir(&out)?;
            let path = out.join(format!("ablation_{sweep}.csv"));
            write_text(&path, &results_csv(&rows))?;
            write_text(&out.join(CONFIG_FILE), &p.config.to_text())?;
            for r in &rows {
                println!("{sweep}={}: {:.2} +- {:.2}", r.setting, r.eval.mean, r.eval.std);
            }
        }
        Command::Report { out, inputs } => {
            for path in report::report(&inputs, &out)? {
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_USAGE
            } else {
                EXIT_OK
            }
        }
        Ok(cli) => match dispatch(cli) {
            Ok(()) => EXIT_OK,
            Err(e) => {
                eprintln!("error: {e}");
                exit_code(&e)
            }
        },
    }
}
