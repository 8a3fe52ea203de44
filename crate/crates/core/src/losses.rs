//! Training objectives.
//!
//! Classification uses cosine similarity between image and prompt
//! embeddings scaled by a temperature. Alignment combines target-prediction
//! entropy with a KL term between target and source prompt embeddings, each
//! turned into a distribution by a softmax over the embedding dimension.

use std::fmt;
use std::str::FromStr;

use crate::diffkit::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::promptgen::DomainToken;

pub const COSINE_EPS: f64 = 1e-8;

/// Class probabilities for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution(pub Tensor);

impl ClassDistribution {
    pub fn new(probs: Tensor) -> Result<Self> {
        let sum: f64 = probs.data().iter().sum();
        if probs.data().iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-8 {
            return Err(Error::Invalid(format!("not a distribution (sum {sum})")));
        }
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        self.0.data()
    }

    pub fn num_classes(&self) -> usize {
        self.0.numel()
    }

    /// Index of the largest probability; ties go to the lowest class id.
    pub fn argmax(&self) -> usize {
        argmax(self.probs())
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// `[N × K]` logits `cos(img_i, text_{i,k}) / tau`, where `text` stacks the
/// `K` class prompt embeddings of each image consecutively.
pub fn similarity_logits(tape: &mut Tape, img: Var, text: Var, num_classes: usize, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let n = tape.value(img).rows();
    if tape.value(text).rows() != n * num_classes {
        return Err(Error::Invalid(format!(
            "{} prompt embeddings for {n} images × {num_classes} classes",
            tape.value(text).rows()
        )));
    }
    let index: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..num_classes).map(move |_| (0, i))).collect();
    let repeated = tape.gather_rows(&[img], &index)?;
    let cos = tape.cosine_rows(repeated, text, COSINE_EPS)?;
    let cos = tape.reshape(cos, vec![n, num_classes])?;
    Ok(tape.scale(cos, 1.0 / tau))
}

/// Class distribution of one image given its per-class prompt embeddings.
pub fn predict_prob(img_emb: &Tensor, prompt_embs: &[Tensor], tau: f64) -> Result<ClassDistribution> {
    check_tau(tau)?;
    if prompt_embs.len() < 2 {
        return Err(Error::Invalid("need at least two classes".into()));
    }
    let d = img_emb.numel();
    if prompt_embs.iter().any(|p| p.numel() != d) {
        return Err(Error::Invalid("prompt embeddings differ in width from the image embedding".into()));
    }
    let mut tape = Tape::new();
    let img = tape.constant(img_emb.reshaped(vec![1, d])?);
    let rows: Vec<Vec<f64>> = prompt_embs.iter().map(|p| p.data().to_vec()).collect();
    let text = tape.constant(Tensor::from_rows(&rows)?);
    let logits = similarity_logits(&mut tape, img, text, prompt_embs.len(), tau)?;
    let p = tape.softmax(logits);
    ClassDistribution::new(Tensor::vector(tape.value(p).data().to_vec()))
}

/// Mean `-log p(y_i | x_i)` from logits, via log-softmax.
pub fn ce_on_tape(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, k) = (tape.value(logits).rows(), tape.value(logits).cols());
    if labels.len() != n {
        return Err(Error::Invalid(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Invalid(format!("label {bad} outside {k} classes")));
    }
    let logp = tape.log_softmax(logits);
    let index: Vec<usize> = labels.iter().enumerate().map(|(i, &y)| i * k + y).collect();
    let picked = tape.select(logp, &index)?;
    let mean = tape.mean(picked);
    Ok(tape.scale(mean, -1.0))
}

/// Mean Shannon entropy of the row distributions `softmax(logits)`.
pub fn entropy_on_tape(tape: &mut Tape, logits: Var) -> Var {
    let p = tape.softmax(logits);
    let logp = tape.log_softmax(logits);
    let plogp = tape.mul(p, logp).expect("same shape");
    let per_row = tape.sum_rows(plogp);
    let mean = tape.mean(per_row);
    tape.scale(mean, -1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlDirection {
    /// `KL(target ‖ source)`.
    TargetToSource,
    /// `KL(source ‖ target)`.
    SourceToTarget,
}

impl fmt::Display for KlDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TargetToSource => "target-source",
            Self::SourceToTarget => "source-target",
        })
    }
}

impl FromStr for KlDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target-source" => Ok(Self::TargetToSource),
            "source-target" => Ok(Self::SourceToTarget),
            _ => Err(Error::Config(format!("unknown KL direction {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlConfig {
    pub temperature: f64,
    pub direction: KlDirection,
}

impl Default for KlConfig {
    fn default() -> Self {
        Self { temperature: 1.0, direction: KlDirection::TargetToSource }
    }
}

/// Row-paired prompt-embedding KL: each row becomes a distribution over
/// the embedding dimension, and the divergence is averaged over rows.
pub fn kl_on_tape(tape: &mut Tape, target: Var, source: Var, cfg: KlConfig) -> Result<Var> {
    check_tau(cfg.temperature)?;
    if tape.value(target).shape() != tape.value(source).shape() {
        return Err(Error::Invalid(format!(
            "KL inputs differ: {:?} vs {:?}",
            tape.value(target).shape(),
            tape.value(source).shape()
        )));
    }
    let (p_in, q_in) = match cfg.direction {
        KlDirection::TargetToSource => (target, source),
        KlDirection::SourceToTarget => (source, target),
    };
    let p_in = tape.scale(p_in, 1.0 / cfg.temperature);
    let q_in = tape.scale(q_in, 1.0 / cfg.temperature);
    let p = tape.softmax(p_in);
    let logp = tape.log_softmax(p_in);
    let logq = tape.log_softmax(q_in);
    let diff = tape.sub(logp, logq)?;
    let terms = tape.mul(p, diff)?;
    let per_row = tape.sum_rows(terms);
    Ok(tape.mean(per_row))
}

/// Squared ℓ2 distance between the batch source token and its prediction.
pub fn smn_on_tape(tape: &mut Tape, d_s: Var, d_hat: Var) -> Result<Var> {
    if tape.value(d_s).numel() != tape.value(d_hat).numel() {
        return Err(Error::Invalid("style-mapping target and prediction differ in width".into()));
    }
    let d_hat = tape.reshape(d_hat, tape.value(d_s).shape().to_vec())?;
    let diff = tape.sub(d_s, d_hat)?;
    Ok(tape.dot(diff, diff)?)
}

pub fn loss_ce(p: &ClassDistribution, y: usize) -> Result<f64> {
    let prob = p
        .probs()
        .get(y)
        .ok_or_else(|| Error::Invalid(format!("label {y} outside {} classes", p.num_classes())))?;
    Ok(-prob.ln())
}

/// Mean entropy over a batch of distributions, with `0·log 0 = 0`.
pub fn loss_em(dists: &[ClassDistribution]) -> Result<f64> {
    if dists.is_empty() {
        return Err(Error::Invalid("empty target batch".into()));
    }
    let total: f64 = dists
        .iter()
        .map(|d| -d.probs().iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>())
        .sum();
    Ok(total / dists.len() as f64)
}

pub fn loss_kl(target: &[Tensor], source: &[Tensor], cfg: KlConfig) -> Result<f64> {
    if target.len() != source.len() || target.is_empty() {
        return Err(Error::Invalid(format!(
            "KL needs equal nonempty lists, got {} and {}",
            target.len(),
            source.len()
        )));
    }
    let stack = |xs: &[Tensor]| -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = xs.iter().map(|t| t.data().to_vec()).collect();
        Ok(Tensor::from_rows(&rows)?)
    };
    let mut tape = Tape::new();
    let t = tape.constant(stack(target)?);
    let s = tape.constant(stack(source)?);
    let kl = kl_on_tape(&mut tape, t, s, cfg)?;
    Ok(tape.value(kl).item())
}

pub fn loss_smn(d_s: &DomainToken, d_hat: &DomainToken) -> Result<f64> {
    if d_s.0.numel() != d_hat.0.numel() {
        return Err(Error::Invalid("style-mapping target and prediction differ in width".into()));
    }
    Ok(d_s.0.data().iter().zip(d_hat.0.data()).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Target entropy plus prompt KL.
pub fn loss_align(
    target_dists: &[ClassDistribution],
    target_prompts: &[Tensor],
    source_prompts: &[Tensor],
    cfg: KlConfig,
) -> Result<f64> {
    let em = loss_em(target_dists)?;
    let kl = loss_kl(target_prompts, source_prompts, cfg)?;
    Ok(em + kl)
}

/// Per-term multipliers. The alignment term is `em·L_em + kl·L_KL`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub ce: f64,
    pub smn: f64,
    pub em: f64,
    pub kl: f64,
}

impl LossWeights {
    pub const FULL: Self = Self { ce: 1.0, smn: 1.0, em: 1.0, kl: 1.0 };

    pub fn uses_target_predictions(&self) -> bool {
        self.em != 0.0 || self.kl != 0.0
    }
}

/// Named loss subsets used by the ablation harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossSet {
    Full,
    Ce,
    CeAlign,
    CeSmn,
    CeSmnEm,
}

impl LossSet {
    pub const ALL: [Self; 5] = [Self::Ce, Self::CeSmn, Self::CeSmnEm, Self::CeAlign, Self::Full];

    pub fn weights(self) -> LossWeights {
        let (smn, em, kl) = match self {
            Self::Full => (1.0, 1.0, 1.0),
            Self::Ce => (0.0, 0.0, 0.0),
            Self::CeAlign => (0.0, 1.0, 1.0),
            Self::CeSmn => (1.0, 0.0, 0.0),
            Self::CeSmnEm => (1.0, 1.0, 0.0),
        };
        LossWeights { ce: 1.0, smn, em, kl }
    }
}

impl fmt::Display for LossSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::Ce => "ce",
            Self::CeAlign => "ce+align",
            Self::CeSmn => "ce+smn",
            Self::CeSmnEm => "ce+smn+em",
        })
    }
}

impl FromStr for LossSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "ce" => Ok(Self::Ce),
            "ce+align" => Ok(Self::CeAlign),
            "ce+smn" => Ok(Self::CeSmn),
            "ce+smn+em" => Ok(Self::CeSmnEm),
            _ => Err(Error::Config(format!("unknown loss set {s:?}"))),
        }
    }
}

/// Weighted loss components of one step. Disabled terms are exactly zero.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBundle {
    pub ce: f64,
    pub smn: f64,
    pub em: f64,
    pub kl: f64,
    pub align: f64,
    pub total: f64,
}

/// Combines weighted components as `total = ce + smn + (em + kl)`.
pub fn loss_total(ce: f64, smn: f64, em: f64, kl: f64) -> LossBundle {
    let align = em + kl;
    LossBundle { ce, smn, em, kl, align, total: ce + smn + align }
}

/// Raw per-term tape values of one step; `None` marks a term that was not built.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    pub ce: Option<Var>,
    pub smn: Option<Var>,
    pub em: Option<Var>,
    pub kl: Option<Var>,
}

/// Weights and sums the built terms on the tape, returning the total and
/// its bundle. Terms with zero weight are left out of the graph.
pub fn combine_on_tape(tape: &mut Tape, terms: LossTerms, w: LossWeights) -> Result<(Var, LossBundle)> {
    let mut weighted = |term: Option<Var>, weight: f64| -> (Option<Var>, f64) {
        match term {
            Some(v) if weight != 0.0 => {
                let s = tape.scale(v, weight);
                (Some(s), tape.value(s).item())
            }
            _ => (None, 0.0),
        }
    };
    let (ce, ce_v) = weighted(terms.ce, w.ce);
    let (smn, smn_v) = weighted(terms.smn, w.smn);
    let (em, em_v) = weighted(terms.em, w.em);
    let (kl, kl_v) = weighted(terms.kl, w.kl);
    let bundle = loss_total(ce_v, smn_v, em_v, kl_v);
    let mut total: Option<Var> = None;
    let mut add = |tape: &mut Tape, v: Option<Var>| -> Result<()> {
        if let Some(v) = v {
            total = Some(match total {
                Some(t) => tape.add(t, v)?,
                None => v,
            });
        }
        Ok(())
    };
    let align = match (em, kl) {
        (Some(a), Some(b)) => Some(tape.add(a, b)?),
        (a, b) => a.or(b),
    };
    add(tape, ce)?;
    add(tape, smn)?;
    add(tape, align)?;
    let total = total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)));
    Ok((total, bundle))
}
