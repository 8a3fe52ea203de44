//! End-to-end acceptance suite. Runs as a plain binary so every criterion
//! prints exactly one PASS/FAIL line; the process fails if any criterion does.

mod common;

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use promptalign::cli::sweep::{par_map, thread_cap};
use promptalign::cli::ExperimentConfig;
use promptalign::diffkit::Tensor;
use promptalign::encoders::{init_frozen, FrozenWeights};
use promptalign::losses::{loss_em, loss_kl, loss_total, predict_prob, ClassDistribution, KlConfig, LossSet};
use promptalign::promptgen::FeatureBank;
use promptalign::synthdata::{self, draw, generate, Domain};
use promptalign::trainer::{
    accuracy, build_step, class_probs, fit_with, infer, load_checkpoint, mean_std, save_checkpoint, Banks, Batch,
    TrainConfig, TrainState,
};

use common::{bin, central_difference, rel_err, toy_setup};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn gradient_check() -> Outcome {
    let (frozen, banks) = toy_setup();
    let cfg = TrainConfig { batch_size: 2, layers: 2, context_len: 2, ..TrainConfig::default() };
    let mut state = TrainState::new(&frozen, &cfg, &banks, 3).unwrap();
    let s = [0, 4];
    let t = [1, 5];
    let labels: Vec<usize> = s.iter().map(|&i| banks.source_labels[i]).collect();
    let source = Batch { bank: &banks.source, idx: &s, labels: Some(&labels) };
    let target = Batch { bank: &banks.target_train, idx: &t, labels: None };

    let mut g = build_step(&frozen, &cfg, &state.modules, &source, &target).unwrap();
    g.tape.backward(g.total).unwrap();
    let analytic: Vec<Vec<f64>> = g
        .params
        .iter()
        .zip(state.modules.tensors_mut())
        .map(|(&p, t)| g.tape.grad(p).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    assert!(g.bundle.smn > 0.0 && g.bundle.em > 0.0 && g.bundle.kl > 0.0, "{:?}", g.bundle);

    let mut worst = 0.0f64;
    let mut count = 0;
    for (pi, grad) in analytic.iter().enumerate() {
        let mut values = state.modules.tensors_mut()[pi].data().to_vec();
        for i in 0..values.len() {
            let numeric = central_difference(&mut values, i, 1e-5, |v| {
                let mut m = state.modules.clone();
                m.tensors_mut()[pi].data_mut().copy_from_slice(v);
                let g = build_step(&frozen, &cfg, &m, &source, &target).unwrap();
                g.tape.value(g.total).item()
            });
            worst = worst.max(rel_err(grad[i], numeric));
            count += 1;
        }
    }
    outcome(worst < 1e-4, format!("worst relative error {worst:.2e} over {count} parameter entries"))
}

fn random_dist(rng: &mut ChaCha8Rng, k: usize) -> ClassDistribution {
    let img = Tensor::vector((0..8).map(|_| rng.random_range(-2.0..2.0)).collect());
    let prompts: Vec<Tensor> = (0..k).map(|_| Tensor::vector((0..8).map(|_| rng.random_range(-2.0..2.0)).collect())).collect();
    predict_prob(&img, &prompts, rng.random_range(0.01..1.0)).unwrap()
}

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = Vec::new();
    for n in 0..200 {
        let k = rng.random_range(2..10);
        let dists: Vec<ClassDistribution> = (0..4).map(|_| random_dist(&mut rng, k)).collect();
        for d in &dists {
            let s: f64 = d.probs().iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                failures.push(format!("instance {n}: softmax sums to {s}"));
            }
        }
        let em = loss_em(&dists).unwrap();
        if !(0.0..=(k as f64).ln() + 1e-12).contains(&em) {
            failures.push(format!("instance {n}: entropy {em} outside [0, ln {k}]"));
        }
        let mut one_hot = vec![0.0; k];
        one_hot[rng.random_range(0..k)] = 1.0;
        let one_hot = ClassDistribution::new(Tensor::vector(one_hot)).unwrap();
        let uniform = ClassDistribution::new(Tensor::vector(vec![1.0 / k as f64; k])).unwrap();
        // Exact up to the rounding of summing k terms of p·ln p.
        let ln_k = (k as f64).ln();
        if loss_em(&[one_hot]).unwrap() != 0.0 || (loss_em(&[uniform]).unwrap() - ln_k).abs() > 4.0 * f64::EPSILON * ln_k {
            failures.push(format!("instance {n}: one-hot or uniform entropy is off"));
        }
        let a: Vec<Tensor> = (0..k).map(|_| Tensor::vector((0..6).map(|_| rng.random_range(-3.0..3.0)).collect())).collect();
        let b: Vec<Tensor> = (0..k).map(|_| Tensor::vector((0..6).map(|_| rng.random_range(-3.0..3.0)).collect())).collect();
        let kl = loss_kl(&a, &b, KlConfig::default()).unwrap();
        if kl < 0.0 || loss_kl(&a, &a, KlConfig::default()).unwrap() != 0.0 {
            failures.push(format!("instance {n}: KL {kl} or KL(a, a) is off"));
        }
        let parts: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..10.0)).collect();
        let bundle = loss_total(parts[0], parts[1], parts[2], parts[3]);
        if (bundle.total - (bundle.ce + bundle.smn + bundle.align)).abs() > 1e-10
            || (bundle.align - (bundle.em + bundle.kl)).abs() > 1e-10
        {
            failures.push(format!("instance {n}: bundle sums are off"));
        }
    }
    match failures.first() {
        None => outcome(true, "200 random instances"),
        Some(f) => outcome(false, format!("{} failures, first: {f}", failures.len())),
    }
}

fn scale_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = rng.random_range(2..8);
        let img = Tensor::vector((0..8).map(|_| rng.random_range(-1.0..1.0)).collect());
        let prompts: Vec<Tensor> =
            (0..k).map(|_| Tensor::vector((0..8).map(|_| rng.random_range(-1.0..1.0)).collect())).collect();
        let base = predict_prob(&img, &prompts, 0.01).unwrap();
        for c in [1e-3, 0.37, 2.0, 850.0] {
            let scale = |t: &Tensor| Tensor::vector(t.data().iter().map(|v| v * c).collect());
            let scaled: Vec<Tensor> = prompts.iter().map(scale).collect();
            let p = predict_prob(&scale(&img), &scaled, 0.01).unwrap();
            for (a, b) in base.probs().iter().zip(p.probs()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    outcome(worst <= 1e-9, format!("worst probability change {worst:.2e} over 100 instances and 4 scales"))
}

/// One benchmark run: a training config under a seed.
struct Job {
    group: &'static str,
    label: String,
    cfg: TrainConfig,
    seed: u64,
    keep: bool,
}

struct RunResult {
    accuracy: f64,
    source_accuracy: f64,
    elapsed: Duration,
    entropies: Vec<f64>,
    smn: Vec<f64>,
    state: Option<TrainState>,
}

struct Benchmark {
    config: ExperimentConfig,
    frozen: FrozenWeights,
    banks: Banks,
    jobs: Vec<Job>,
    results: Vec<RunResult>,
}

const SEEDS: u64 = 3;

impl Benchmark {
    fn run() -> Self {
        let config = ExperimentConfig::default();
        let frozen = init_frozen(&config.model).unwrap();
        let data = generate(&config.data).unwrap();
        let banks = Banks::build(&data, &frozen).unwrap();
        let base = TrainConfig { eval_every: 0, ..config.train.clone() };
        let mut jobs = Vec::new();
        for seed in 0..SEEDS {
            for set in [LossSet::Ce, LossSet::CeAlign, LossSet::Full] {
                let keep = set == LossSet::Full && seed == 0;
                jobs.push(Job { group: "loss", label: set.to_string(), cfg: base.clone().with_loss(set), seed, keep });
            }
            for k in 1..base.layers {
                jobs.push(Job { group: "layers", label: k.to_string(), cfg: TrainConfig { layers: k, ..base.clone() }, seed, keep: false });
            }
            for l in [1, 2, 8] {
                jobs.push(Job {
                    group: "tokens",
                    label: l.to_string(),
                    cfg: TrainConfig { context_len: l, ..base.clone() },
                    seed,
                    keep: false,
                });
            }
        }
        let threads = thread_cap().unwrap();
        let results = par_map(&jobs, threads, |job| {
            let t0 = Instant::now();
            let mut entropies = Vec::new();
            let mut smn = Vec::new();
            let state = fit_with(&frozen, &job.cfg, &banks, job.seed, |_, r| {
                if let Some(e) = r.target_entropy {
                    entropies.push(e);
                }
                smn.push(r.bundle.smn);
            })?;
            let accuracy = accuracy(&infer(&frozen, &job.cfg, &state, &banks.target_test)?, &banks.test_labels)?;
            let source_accuracy = accuracy_on(&frozen, &job.cfg, &state, &banks.source, &banks.source_labels);
            Ok(RunResult {
                accuracy,
                source_accuracy,
                elapsed: t0.elapsed(),
                entropies,
                smn,
                state: job.keep.then_some(state),
            })
        })
        .unwrap();
        Self { config, frozen, banks, jobs, results }
    }

    fn select(&self, group: &str, label: &str) -> Vec<&RunResult> {
        self.jobs.iter().zip(&self.results).filter(|(j, _)| j.group == group && j.label == label).map(|(_, r)| r).collect()
    }

    /// Mean and std of target accuracy; the default layer count and token
    /// length are the `full` loss runs.
    fn stats(&self, group: &str, label: &str) -> (f64, f64) {
        let default = (group == "layers" && label == self.config.train.layers.to_string())
            || (group == "tokens" && label == self.config.train.context_len.to_string());
        let runs = if default { self.select("loss", "full") } else { self.select(group, label) };
        let accs: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
        mean_std(&accs)
    }

    fn kept(&self) -> (&TrainConfig, &RunResult) {
        let (j, r) = self.jobs.iter().zip(&self.results).find(|(j, _)| j.keep).unwrap();
        (&j.cfg, r)
    }
}

fn accuracy_on(frozen: &FrozenWeights, cfg: &TrainConfig, state: &TrainState, bank: &FeatureBank, labels: &[usize]) -> f64 {
    accuracy(&infer(frozen, cfg, state, bank).unwrap(), labels).unwrap()
}

fn fmt_stats((m, s): (f64, f64)) -> String {
    format!("{m:.1}±{s:.1}")
}

/// `a ≤ b` allowing the larger of the two standard deviations.
fn le_within_std(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 <= b.0 + a.1.max(b.1)
}

fn adaptation_gain(b: &Benchmark) -> Outcome {
    let ce = b.stats("loss", "ce");
    let full = b.stats("loss", "full");
    let ce_runs = b.select("loss", "ce");
    let source = ce_runs.iter().map(|r| r.source_accuracy).sum::<f64>() / ce_runs.len() as f64;
    let elapsed: Duration = ce_runs.iter().chain(&b.select("loss", "full")).map(|r| r.elapsed).sum();
    let gap = source - ce.0;
    let gain = full.0 - ce.0;
    outcome(
        gap >= 15.0 && gain >= 5.0 && elapsed < Duration::from_secs(600),
        format!(
            "source-only: source {source:.1}, target {} (gap {gap:.1}); full target {} (gain {gain:.1}); {:.0} s",
            fmt_stats(ce),
            fmt_stats(full),
            elapsed.as_secs_f64()
        ),
    )
}

fn ablation_trends(b: &Benchmark) -> Outcome {
    let loss: Vec<(f64, f64)> = ["ce", "ce+align", "full"].iter().map(|l| b.stats("loss", l)).collect();
    let loss_ok = loss.windows(2).all(|w| le_within_std(w[0], w[1]));
    let layers: Vec<(f64, f64)> = (1..=b.config.train.layers).map(|k| b.stats("layers", &k.to_string())).collect();
    let layers_ok = layers.windows(2).all(|w| le_within_std(w[0], w[1]));
    let tokens: Vec<(usize, (f64, f64))> = [1, 2, 4, 8].iter().map(|&l| (l, b.stats("tokens", &l.to_string()))).collect();
    let at4 = tokens[2].1;
    let tokens_ok = tokens.iter().all(|&(_, s)| le_within_std(s, at4));
    let show = |v: &[(f64, f64)]| v.iter().map(|&s| fmt_stats(s)).collect::<Vec<_>>().join(" ");
    let tok: Vec<(f64, f64)> = tokens.iter().map(|t| t.1).collect();
    outcome(
        loss_ok && layers_ok && tokens_ok,
        format!(
            "loss ce/ce+align/full [{}] {}; layers 1..{} [{}] {}; tokens 1/2/4/8 [{}] {}",
            show(&loss),
            if loss_ok { "ok" } else { "out of order" },
            layers.len(),
            show(&layers),
            if layers_ok { "ok" } else { "decreasing" },
            show(&tok),
            if tokens_ok { "ok" } else { "peak away from 4" }
        ),
    )
}

fn style_mapping_fidelity(b: &Benchmark) -> Outcome {
    let (cfg, run) = b.kept();
    let state = run.state.as_ref().unwrap();
    let k = cfg.layers;
    let held_out = draw(&b.config.data, Domain::Source, b.config.data.samples_per_class, 1).unwrap();
    let held_bank = FeatureBank::build(&held_out.images, &b.frozen).unwrap();
    let all = |bank: &FeatureBank| (0..bank.len()).collect::<Vec<_>>();
    let oracle = state.modules.style_proj.apply(&held_bank.mean_style(&all(&held_bank), k).unwrap()).unwrap();

    let test = &b.banks.target_test;
    let test_style = test.mean_style(&all(test), k).unwrap();
    let d_t = state.modules.style_proj.apply(&test_style).unwrap();
    let hallucinated = state.modules.style_map.apply(&test_style).unwrap();
    let acc_with = |d_s: &Tensor| {
        let tokens = Tensor::from_rows(&[d_t.data().to_vec(), d_s.data().to_vec()]).unwrap();
        let probs = class_probs(&b.frozen, cfg, &state.modules, test, &all(test), Some(&tokens)).unwrap();
        let pred: Vec<usize> = probs.iter().map(|p| promptalign::losses::argmax(p)).collect();
        accuracy(&pred, &b.banks.test_labels).unwrap()
    };
    let (a_hat, a_oracle) = (acc_with(&hallucinated), acc_with(&oracle));

    let train = &b.banks.target_train;
    let mapped = state.modules.style_map.apply(&train.mean_style(&all(train), k).unwrap()).unwrap();
    let smn: f64 = oracle.data().iter().zip(mapped.data()).map(|(a, b)| (a - b).powi(2)).sum();
    let norm: f64 = oracle.data().iter().map(|v| v * v).sum();
    let tail = &run.smn[run.smn.len().saturating_sub(50)..];
    let batch_smn = tail.iter().sum::<f64>() / tail.len() as f64;
    outcome(
        (a_hat - a_oracle).abs() <= 2.0 && smn < 0.05 * norm,
        format!(
            "accuracy hallucinated {a_hat:.1} vs oracle {a_oracle:.1}; L_smn {smn:.4} vs 0.05·‖D_s‖² = {:.4} (last-50 batch mean {batch_smn:.4})",
            0.05 * norm
        ),
    )
}

fn moving_average(v: &[f64], w: usize) -> Vec<f64> {
    v.windows(w).map(|x| x.iter().sum::<f64>() / w as f64).collect()
}

fn entropy_decreases(b: &Benchmark) -> Outcome {
    let (_, run) = b.kept();
    let ma = moving_average(&run.entropies, 20);
    if ma.is_empty() {
        return outcome(false, "fewer than 20 recorded steps");
    }
    let first = run.entropies[0];
    let (start, end) = (ma[0], *ma.last().unwrap());
    outcome(
        end < start && end < first,
        format!("initial {first:.3}; 20-step average {start:.3} at start, {end:.3} at end"),
    )
}

fn run_cli(args: &[&str]) -> bool {
    Command::new(bin()).args(args).output().map(|o| o.status.success()).unwrap_or(false)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let config = p("short.txt");
    std::fs::write(&config, "train.steps=40\ntrain.eval_every=10\n").unwrap();
    let mut problems = Vec::new();
    for tag in ["a", "b"] {
        let (data, out) = (p(&format!("data_{tag}")), p(&format!("run_{tag}")));
        if !run_cli(&["gen-data", "--config", &config, "--seed", "5", "--out", &data])
            || !run_cli(&["train", "--config", &config, "--data", &data, "--out", &out])
        {
            problems.push(format!("CLI run {tag} failed"));
        }
    }
    let read = |path: String| std::fs::read(path).unwrap_or_default();
    for file in ["run_{}/metrics.csv", "run_{}/checkpoint.bin", "run_{}/checkpoint.json", "data_{}/source.padset"] {
        let (a, b) = (read(p(&file.replace("{}", "a"))), read(p(&file.replace("{}", "b"))));
        if a.is_empty() || a != b {
            problems.push(format!("{} differs between runs", file.replace("{}", "*")));
        }
    }

    let data = synthdata::load_all(&dir.path().join("data_a")).unwrap();
    for (set, name) in [(&data.source, "source"), (&data.target_train, "target_train"), (&data.target_test, "target_test")] {
        if synthdata::encode(set) != read(p(&format!("data_a/{name}.padset"))) {
            problems.push(format!("{name} does not re-encode to its file"));
        }
    }
    let cfg = ExperimentConfig::from_text(&std::fs::read_to_string(p("run_a/config.txt")).unwrap()).unwrap();
    let frozen = init_frozen(&cfg.model).unwrap();
    let before = frozen.checksum();
    let ck = load_checkpoint(&dir.path().join("run_a"), &cfg.model, &cfg.train).unwrap();
    if ck.frozen.checksum() != before || ck.meta.get("frozen_checksum").and_then(|v| v.as_str()) != Some(before.as_str()) {
        problems.push("frozen checksum changed".into());
    }
    let state = TrainState::from_checkpoint(&ck);
    save_checkpoint(&dir.path().join("resaved"), &ck.frozen, &state, ck.meta.clone()).unwrap();
    if read(p("resaved/checkpoint.bin")) != read(p("run_a/checkpoint.bin")) {
        problems.push("checkpoint does not round-trip".into());
    }
    match problems.first() {
        None => outcome(true, "CSV, checkpoint and dataset byte-identical across runs; checksum constant; files round-trip"),
        Some(f) => outcome(false, format!("{} problems, first: {f}", problems.len())),
    }
}

fn main() -> ExitCode {
    let mut all_pass = true;
    let mut report = |n: usize, name: &str, f: &dyn Fn() -> Outcome| {
        let t0 = Instant::now();
        let o = f();
        all_pass &= o.pass;
        println!(
            "acceptance {n} {name}: {} ({}; {:.1} s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t0.elapsed().as_secs_f64()
        );
    };
    report(1, "gradient check", &gradient_check);
    report(2, "loss identities", &loss_identities);
    report(3, "scale invariance", &scale_invariance);
    let t0 = Instant::now();
    let bench = Benchmark::run();
    println!("benchmark: {} runs in {:.0} s", bench.jobs.len(), t0.elapsed().as_secs_f64());
    report(4, "adaptation gain", &|| adaptation_gain(&bench));
    report(5, "ablation trends", &|| ablation_trends(&bench));
    report(6, "style-mapping fidelity", &|| style_mapping_fidelity(&bench));
    report(7, "target entropy decreases", &|| entropy_decreases(&bench));
    report(8, "determinism", &determinism);
    if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
