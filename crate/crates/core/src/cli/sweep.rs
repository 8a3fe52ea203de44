//! Ablation sweeps and bounded parallel execution of independent runs.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::config::ExperimentConfig;
use crate::encoders::FrozenWeights;
use crate::error::{Error, Result};
use crate::losses::LossSet;
use crate::trainer::{accuracy, fit, infer, Banks, Evaluation, PromptMode, TrainConfig};

pub const THREADS_VAR: &str = "PROMPTALIGN_THREADS";

/// Worker count from `PROMPTALIGN_THREADS`, else the available parallelism.
pub fn thread_cap() -> Result<usize> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_VAR} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Applies `f` to every job on at most `threads` scoped workers. Results
/// keep job order; the first error wins.
pub fn par_map<J: Sync, R: Send>(jobs: &[J], threads: usize, f: impl Fn(&J) -> Result<R> + Sync) -> Result<Vec<R>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let r = f(job);
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("workers joined").into_iter().map(|r| r.expect("every job ran")).collect()
}

/// Trains `cfg.runs` runs in parallel and scores each on the target test split.
pub fn evaluate_parallel(frozen: &FrozenWeights, cfg: &TrainConfig, banks: &Banks, threads: usize) -> Result<Evaluation> {
    cfg.validate(frozen)?;
    let runs: Vec<u64> = (0..cfg.runs as u64).collect();
    let accs = par_map(&runs, threads, |&r| run_accuracy(frozen, cfg, banks, cfg.seed + r))?;
    Ok(Evaluation::from_accuracies(accs))
}

/// Target test accuracy of one training run.
pub fn run_accuracy(frozen: &FrozenWeights, cfg: &TrainConfig, banks: &Banks, seed: u64) -> Result<f64> {
    let run_cfg = TrainConfig { eval_every: 0, ..cfg.clone() };
    let state = fit(frozen, &run_cfg, banks, seed)?;
    accuracy(&infer(frozen, cfg, &state, &banks.target_test)?, &banks.test_labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Loss,
    Layers,
    Tokens,
    Prompt,
}

impl fmt::Display for SweepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Loss => "loss",
            Self::Layers => "layers",
            Self::Tokens => "tokens",
            Self::Prompt => "prompt",
        })
    }
}

impl FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss" => Ok(Self::Loss),
            "layers" => Ok(Self::Layers),
            "tokens" => Ok(Self::Tokens),
            "prompt" => Ok(Self::Prompt),
            _ => Err(Error::Config(format!("unknown sweep {s:?}"))),
        }
    }
}

pub const TOKEN_COUNTS: [usize; 4] = [1, 2, 4, 8];

/// One point of a sweep: a label and the full config it runs.
#[derive(Debug, Clone)]
pub struct Setting {
    pub label: String,
    pub config: ExperimentConfig,
}

/// Every setting of `kind`, each a copy of `base` with one field changed.
pub fn settings(kind: SweepKind, base: &ExperimentConfig) -> Vec<Setting> {
    let with = |label: String, f: &dyn Fn(&mut TrainConfig)| {
        let mut config = base.clone();
        f(&mut config.train);
        Setting { label, config }
    };
    match kind {
        SweepKind::Loss => LossSet::ALL
            .iter()
            .map(|&set| with(set.to_string(), &|t| t.weights = set.weights()))
            .collect(),
        SweepKind::Layers => {
            (1..=base.model.vision_layers).map(|k| with(k.to_string(), &|t| t.layers = k)).collect()
        }
        SweepKind::Tokens => TOKEN_COUNTS.iter().map(|&l| with(l.to_string(), &|t| t.context_len = l)).collect(),
        SweepKind::Prompt => PromptMode::ALL.iter().map(|&m| with(m.to_string(), &|t| t.prompt = m)).collect(),
    }
}

/// Accuracies of one sweep point.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub sweep: SweepKind,
    pub setting: String,
    pub config_hash: String,
    pub eval: Evaluation,
}

pub const RESULTS_HEADER: &str = "sweep,setting,config_hash,runs,mean,std,accuracies";

/// Runs every `(setting, run)` pair as an independent parallel job.
pub fn run_sweep(
    kind: SweepKind,
    points: &[Setting],
    frozen: &FrozenWeights,
    banks: &Banks,
    threads: usize,
) -> Result<Vec<SweepRow>> {
    for p in points {
        p.config.train.validate(frozen)?;
    }
    let jobs: Vec<(usize, u64)> = points
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.config.train.runs as u64).map(move |r| (i, r)))
        .collect();
    let accs = par_map(&jobs, threads, |&(i, r)| {
        let t = &points[i].config.train;
        run_accuracy(frozen, t, banks, t.seed + r)
    })?;
    let mut rows = Vec::with_capacity(points.len());
    let mut it = accs.into_iter();
    for p in points {
        let a: Vec<f64> = it.by_ref().take(p.config.train.runs).collect();
        rows.push(SweepRow {
            sweep: kind,
            setting: p.label.clone(),
            config_hash: p.config.hash(),
            eval: Evaluation::from_accuracies(a),
        });
    }
    Ok(rows)
}

pub fn results_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{RESULTS_HEADER}\n");
    for r in rows {
        let accs: Vec<String> = r.eval.accuracies.iter().map(f64::to_string).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.sweep,
            r.setting,
            r.config_hash,
            r.eval.accuracies.len(),
            r.eval.mean,
            r.eval.std,
            accs.join(";")
        ));
    }
    out
}
