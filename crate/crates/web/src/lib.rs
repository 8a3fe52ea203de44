//! wasm-bindgen bindings for the static demo page in `www/`.
//!
//! Every export returns JSON text so the page needs no glue beyond
//! `JSON.parse`. The data and model are the CLI defaults; a 300-step
//! comparison takes about ten seconds in a browser tab.

use promptalign::cli::ExperimentConfig;
use promptalign::diffkit::Tensor;
use promptalign::encoders::init_frozen;
use promptalign::losses::{loss_ce, loss_em, ClassDistribution, LossSet};
use promptalign::synthdata::{generate, ImageSet};
use promptalign::trainer::{accuracy, fit, infer, Banks};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Demo configuration: the defaults with the shift scaled.
fn demo_config(shift: f64, seed: u64) -> Result<ExperimentConfig, JsError> {
    if !(shift >= 0.0) || !shift.is_finite() {
        return Err(js("shift must be a finite, nonnegative multiplier"));
    }
    let mut c = ExperimentConfig::default();
    c.set_seed(seed);
    c.data.shift_offset *= shift;
    c.data.shift_log_gain *= shift;
    c.validate().map_err(js)?;
    Ok(c)
}

/// Per-channel mean and standard deviation over every token of every image.
fn channel_stats(set: &ImageSet) -> (Vec<f64>, Vec<f64>) {
    let c = set.config.channels;
    let mut sum = vec![0.0; c];
    let mut sq = vec![0.0; c];
    let mut n = 0.0;
    for img in &set.images {
        for (i, v) in img.0.data().iter().enumerate() {
            sum[i % c] += v;
            sq[i % c] += v * v;
        }
        n += set.config.tokens as f64;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0).sqrt()).collect();
    (mean, std)
}

/// Channel statistics of the source and target test sets for a given shift.
#[wasm_bindgen]
pub fn domain_stats(shift: f64, seed: u32) -> Result<String, JsError> {
    let c = demo_config(shift, seed.into())?;
    let data = generate(&c.data).map_err(js)?;
    let (sm, ss) = channel_stats(&data.source);
    let (tm, ts) = channel_stats(&data.target_test);
    Ok(json!({ "source_mean": sm, "source_std": ss, "target_mean": tm, "target_std": ts }).to_string())
}

fn run(c: &ExperimentConfig, banks: &Banks, frozen: &promptalign::encoders::FrozenWeights, set: LossSet) -> Result<Value, JsError> {
    let train = c.train.clone().with_loss(set);
    let state = fit(frozen, &train, banks, c.seed).map_err(js)?;
    let target = accuracy(&infer(frozen, &train, &state, &banks.target_test).map_err(js)?, &banks.test_labels).map_err(js)?;
    let totals: Vec<f64> = state.history.iter().map(|r| r.bundle.total).collect();
    let ce: Vec<f64> = state.history.iter().map(|r| r.bundle.ce).collect();
    Ok(json!({ "loss": set.to_string(), "target_acc": target, "total": totals, "ce": ce }))
}

/// Trains source-only and full-objective prompts on the same data and reports
/// target accuracy plus per-step loss curves for both.
#[wasm_bindgen]
pub fn compare(shift: f64, steps: u32, seed: u32) -> Result<String, JsError> {
    if !(1..=2000).contains(&steps) {
        return Err(js("steps must be in 1..=2000"));
    }
    let mut c = demo_config(shift, seed.into())?;
    c.train.steps = steps as usize;
    c.train.eval_every = 0;
    let frozen = init_frozen(&c.model).map_err(js)?;
    let banks = Banks::build(&generate(&c.data).map_err(js)?, &frozen).map_err(js)?;
    let runs = [run(&c, &banks, &frozen, LossSet::Ce)?, run(&c, &banks, &frozen, LossSet::Full)?];
    Ok(Value::Array(runs.into()).to_string())
}

/// Softmax of comma-separated logits, its entropy, and the cross-entropy
/// against `label`.
#[wasm_bindgen]
pub fn logit_losses(logits: &str, label: u32) -> Result<String, JsError> {
    let z: Vec<f64> = logits
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| js(format!("bad logit {s:?}"))))
        .collect::<Result<_, _>>()?;
    if z.is_empty() || z.iter().any(|v| !v.is_finite()) {
        return Err(js("logits must be finite numbers"));
    }
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    let p = ClassDistribution::new(Tensor::vector(e.iter().map(|v| v / sum).collect())).map_err(js)?;
    let entropy = loss_em(std::slice::from_ref(&p)).map_err(js)?;
    let ce = loss_ce(&p, label as usize).map_err(js)?;
    Ok(json!({ "probs": p.probs(), "entropy": entropy, "ce": ce, "argmax": p.argmax() }).to_string())
}
