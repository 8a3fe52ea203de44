//! Transductive training, inference and multi-run evaluation.
//!
//! Each step pairs a labeled source batch with an unlabeled target batch.
//! Domain tokens come from the batch-mean styles of the two batches, the
//! context tokens from each image's content, and the prompts of every image
//! for every class run through the frozen text encoder as one stacked batch.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffkit::{Tape, Tensor, Var};
use crate::encoders::{text_forward_batch, FrozenWeights, TextVars};
use crate::error::{Error, Result};
use crate::kv::{KvMap, KvWriter};
use crate::losses::{
    argmax, ce_on_tape, combine_on_tape, entropy_on_tape, kl_on_tape, similarity_logits, smn_on_tape, KlConfig,
    KlDirection, LossBundle, LossSet, LossTerms, LossWeights,
};
use crate::promptgen::{assemble_batch, template_matrix, DomainSlots, FeatureBank, PromptLayout, PromptModules, PromptVars};
use crate::weights::{self, write_atomic};

/// Which prompt components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PromptMode {
    /// Learned domain tokens; inference hallucinates `D_s` from target style.
    Full,
    /// No domain tokens at all.
    NoDat,
    /// Frozen template tokens in the domain slots.
    ManualIst,
    /// Learned domain tokens; inference uses the mean source style for `D_s`.
    SstMean,
}

impl PromptMode {
    pub const ALL: [Self; 4] = [Self::NoDat, Self::ManualIst, Self::SstMean, Self::Full];

    pub fn domain_slots(self) -> DomainSlots {
        match self {
            Self::Full | Self::SstMean => DomainSlots::Learned,
            Self::NoDat => DomainSlots::None,
            Self::ManualIst => DomainSlots::Template,
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::NoDat => "no-dat",
            Self::ManualIst => "manual-ist",
            Self::SstMean => "sst-mean",
        })
    }
}

impl FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "no-dat" => Ok(Self::NoDat),
            "manual-ist" => Ok(Self::ManualIst),
            "sst-mean" => Ok(Self::SstMean),
            _ => Err(Error::Config(format!("unknown prompt mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    Cosine,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Constant => "constant",
            Self::Cosine => "cosine",
        })
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            _ => Err(Error::Config(format!("unknown schedule {s:?}"))),
        }
    }
}

/// Which prompt embeddings the KL term compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlPairing {
    /// Source image `i` against target image `i`, for every class.
    Images,
    /// Per-class means over each batch.
    ClassMean,
}

impl fmt::Display for KlPairing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Images => "images",
            Self::ClassMean => "class-mean",
        })
    }
}

impl FromStr for KlPairing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "images" => Ok(Self::Images),
            "class-mean" => Ok(Self::ClassMean),
            _ => Err(Error::Config(format!("unknown KL pairing {s:?}"))),
        }
    }
}

fn parse_direction(s: &str) -> Result<KlDirection> {
    match s {
        "target-source" => Ok(KlDirection::TargetToSource),
        "source-target" => Ok(KlDirection::SourceToTarget),
        _ => Err(Error::Config(format!("unknown KL direction {s:?}"))),
    }
}

fn direction_name(d: KlDirection) -> &'static str {
    match d {
        KlDirection::TargetToSource => "target-source",
        KlDirection::SourceToTarget => "source-target",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub steps: usize,
    pub schedule: Schedule,
    pub weights: LossWeights,
    pub prompt: PromptMode,
    /// Context tokens from image content; otherwise one learned shared set.
    pub image_context: bool,
    pub context_len: usize,
    /// Number of leading vision layers feeding style and content.
    pub layers: usize,
    pub tau: f64,
    pub kl: KlConfig,
    pub kl_pairing: KlPairing,
    /// Treat `D_s` as a constant in the style-mapping loss.
    pub smn_stop_grad: bool,
    /// Add source-prediction entropy to the entropy term.
    pub em_on_source: bool,
    pub runs: usize,
    /// Target test accuracy is logged every this many steps; 0 disables it.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            steps: 1000,
            schedule: Schedule::Constant,
            weights: LossWeights::FULL,
            prompt: PromptMode::Full,
            image_context: true,
            context_len: 4,
            layers: 3,
            tau: 0.01,
            kl: KlConfig::default(),
            kl_pairing: KlPairing::Images,
            smn_stop_grad: false,
            em_on_source: false,
            runs: 3,
            eval_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn with_loss(mut self, set: LossSet) -> Self {
        self.weights = set.weights();
        self
    }

    pub fn layout(&self) -> PromptLayout {
        PromptLayout { domain: self.prompt.domain_slots(), image_context: self.image_context, context_len: self.context_len }
    }

    pub fn validate(&self, frozen: &FrozenWeights) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.runs == 0 {
            return bad("runs must be at least 1".into());
        }
        if self.context_len == 0 {
            return bad("context_len must be at least 1".into());
        }
        let m = frozen.config.vision_layers;
        if self.layers == 0 || self.layers > m {
            return bad(format!("layers must lie in 1..={m}, got {}", self.layers));
        }
        if self.layout().seq_len() > frozen.config.max_prompt_len {
            return bad(format!(
                "prompt of {} tokens exceeds the text encoder limit {}",
                self.layout().seq_len(),
                frozen.config.max_prompt_len
            ));
        }
        if !(self.tau > 0.0) || !(self.kl.temperature > 0.0) {
            return bad("temperatures must be positive".into());
        }
        let w = self.weights;
        if [w.ce, w.smn, w.em, w.kl].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("loss weights must be finite and nonnegative".into());
        }
        Ok(())
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        w.put("batch_size", self.batch_size)
            .put("lr", self.lr)
            .put("beta1", self.beta1)
            .put("beta2", self.beta2)
            .put("adam_eps", self.adam_eps)
            .put("steps", self.steps)
            .put("schedule", self.schedule)
            .put("w_ce", self.weights.ce)
            .put("w_smn", self.weights.smn)
            .put("w_em", self.weights.em)
            .put("w_kl", self.weights.kl)
            .put("prompt", self.prompt)
            .put("image_context", self.image_context)
            .put("context_len", self.context_len)
            .put("layers", self.layers)
            .put("tau", self.tau)
            .put("kl_temperature", self.kl.temperature)
            .put("kl_direction", direction_name(self.kl.direction))
            .put("kl_pairing", self.kl_pairing)
            .put("smn_stop_grad", self.smn_stop_grad)
            .put("em_on_source", self.em_on_source)
            .put("runs", self.runs)
            .put("eval_every", self.eval_every)
            .put("seed", self.seed);
    }

    /// Reads keys written by [`Self::write_kv`]. A `loss` key selects a named
    /// subset before the individual `w_*` weights are applied.
    pub fn update_from(&mut self, kv: &mut KvMap, prefix: &str) -> Result<()> {
        let k = |name: &str| format!("{prefix}{name}");
        kv.update(&k("batch_size"), &mut self.batch_size)?;
        kv.update(&k("lr"), &mut self.lr)?;
        kv.update(&k("beta1"), &mut self.beta1)?;
        kv.update(&k("beta2"), &mut self.beta2)?;
        kv.update(&k("adam_eps"), &mut self.adam_eps)?;
        kv.update(&k("steps"), &mut self.steps)?;
        kv.update(&k("schedule"), &mut self.schedule)?;
        if let Some(set) = kv.take::<LossSet>(&k("loss"))? {
            self.weights = set.weights();
        }
        kv.update(&k("w_ce"), &mut self.weights.ce)?;
        kv.update(&k("w_smn"), &mut self.weights.smn)?;
        kv.update(&k("w_em"), &mut self.weights.em)?;
        kv.update(&k("w_kl"), &mut self.weights.kl)?;
        kv.update(&k("prompt"), &mut self.prompt)?;
        kv.update(&k("image_context"), &mut self.image_context)?;
        kv.update(&k("context_len"), &mut self.context_len)?;
        kv.update(&k("layers"), &mut self.layers)?;
        kv.update(&k("tau"), &mut self.tau)?;
        kv.update(&k("kl_temperature"), &mut self.kl.temperature)?;
        if let Some((v, off)) = kv.take_raw(&k("kl_direction")) {
            self.kl.direction = parse_direction(&v).map_err(|e| Error::parse(off, e.to_string()))?;
        }
        kv.update(&k("kl_pairing"), &mut self.kl_pairing)?;
        kv.update(&k("smn_stop_grad"), &mut self.smn_stop_grad)?;
        kv.update(&k("em_on_source"), &mut self.em_on_source)?;
        kv.update(&k("runs"), &mut self.runs)?;
        kv.update(&k("eval_every"), &mut self.eval_every)?;
        kv.update(&k("seed"), &mut self.seed)?;
        Ok(())
    }
}

/// Frozen features of every split plus the labels the trainer may see.
#[derive(Debug, Clone)]
pub struct Banks {
    pub source: FeatureBank,
    pub source_labels: Vec<usize>,
    pub target_train: FeatureBank,
    pub target_test: FeatureBank,
    /// Used only for evaluation.
    pub test_labels: Vec<usize>,
}

impl Banks {
    pub fn build(data: &crate::synthdata::Generated, frozen: &FrozenWeights) -> Result<Self> {
        Ok(Self {
            source: FeatureBank::build(&data.source.images, frozen)?,
            source_labels: data.source.labels()?.to_vec(),
            target_train: FeatureBank::build(&data.target_train.images, frozen)?,
            target_test: FeatureBank::build(&data.target_test.images, frozen)?,
            test_labels: data.target_test.labels()?.to_vec(),
        })
    }
}

/// A batch as indices into a feature bank.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub bank: &'a FeatureBank,
    pub idx: &'a [usize],
    pub labels: Option<&'a [usize]>,
}

/// Adaptive-moment optimizer state, one moment pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(shapes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = shapes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self { m, v, t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Missing gradients count as zero.
    pub fn update(&mut self, params: Vec<&mut Tensor>, grads: &[Option<Vec<f64>>], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let b1t = 1.0 - cfg.beta1.powi(self.t as i32);
        let b2t = 1.0 - cfg.beta2.powi(self.t as i32);
        for (i, p) in params.into_iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads[i].as_deref();
            for j in 0..m.len() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let mhat = m[j] / b1t;
                let vhat = v[j] / b2t;
                p.data_mut()[j] -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Cycles through a shuffled index order, reshuffling at each epoch end.
#[derive(Debug, Clone)]
struct Sampler {
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize) -> Self {
        Self { order: (0..n).collect(), pos: n }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng, count: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub modules: PromptModules,
    pub adam: Adam,
    pub step: usize,
    /// Mean style of the whole source set, used by the `sst-mean` inference path.
    pub source_style: Tensor,
    pub history: Vec<MetricsRow>,
    rng: ChaCha8Rng,
    source_sampler: Sampler,
    target_sampler: Sampler,
}

const INIT_STREAM: u64 = 1;
const BATCH_STREAM: u64 = 2;

impl TrainState {
    pub fn new(frozen: &FrozenWeights, cfg: &TrainConfig, banks: &Banks, seed: u64) -> Result<Self> {
        cfg.validate(frozen)?;
        let k = cfg.layers;
        let mut init = ChaCha8Rng::seed_from_u64(seed);
        init.set_stream(INIT_STREAM);
        let modules = PromptModules::new(
            &mut init,
            banks.source.style_len(k),
            banks.source.content_len(k),
            cfg.context_len,
            frozen.config.text_width,
            !cfg.image_context,
        );
        let adam = Adam::new(modules.named_tensors().iter().map(|(_, t)| t.numel()));
        let all: Vec<usize> = (0..banks.source.len()).collect();
        let source_style = banks.source.mean_style(&all, k)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(BATCH_STREAM);
        Ok(Self {
            modules,
            adam,
            step: 0,
            source_style,
            history: Vec::new(),
            rng,
            source_sampler: Sampler::new(banks.source.len()),
            target_sampler: Sampler::new(banks.target_train.len()),
        })
    }

    pub fn sample_batches(&mut self, batch: usize) -> (Vec<usize>, Vec<usize>) {
        let s = self.source_sampler.next(&mut self.rng, batch);
        let t = self.target_sampler.next(&mut self.rng, batch);
        (s, t)
    }
}

/// One forward pass of the training objective.
pub struct StepGraph {
    pub tape: Tape,
    pub total: Var,
    pub params: Vec<Var>,
    pub bundle: LossBundle,
    pub source_logits: Var,
    /// Unweighted per-term values.
    pub terms: LossTerms,
    /// Raw mean target-prediction entropy, when target prompts were built.
    pub target_entropy: Option<f64>,
}

struct Prompted {
    /// `[n × K]`.
    logits: Var,
    /// `[n·K × d_e]`.
    text: Var,
}

fn prompt_batch(
    tape: &mut Tape,
    frozen: &FrozenWeights,
    cfg: &TrainConfig,
    vars: &PromptVars,
    text_vars: &TextVars,
    class_tokens: Var,
    domain: Option<Var>,
    batch: &Batch<'_>,
) -> Result<Prompted> {
    let layout = cfg.layout();
    let n = batch.idx.len();
    let context = if cfg.image_context {
        let c = tape.constant(batch.bank.content_matrix(batch.idx, cfg.layers)?);
        vars.content_proj.forward(tape, c)?
    } else {
        vars.shared_context.ok_or_else(|| Error::Invalid("shared context missing".into()))?
    };
    let rows = assemble_batch(tape, &layout, domain, context, class_tokens, n)?;
    let text = text_forward_batch(tape, text_vars, rows, layout.seq_len())?;
    let img = tape.constant(batch.bank.embedding_matrix(batch.idx)?);
    let logits = similarity_logits(tape, img, text, frozen.config.num_classes, cfg.tau)?;
    Ok(Prompted { logits, text })
}

/// Stacks two `[1 × d]` tokens into the `[2 × d]` domain slot matrix.
fn domain_pair(tape: &mut Tape, first: Var, second: Var) -> Result<Var> {
    Ok(tape.gather_rows(&[first, second], &[(0, 0), (1, 0)])?)
}

/// `[K × d_e]` per-class means of image-major `[n·K × d_e]` prompt embeddings.
fn class_means(tape: &mut Tape, text: Var, n: usize, classes: usize) -> Result<Var> {
    let mut avg = vec![0.0; classes * n * classes];
    for k in 0..classes {
        for i in 0..n {
            avg[k * n * classes + i * classes + k] = 1.0 / n as f64;
        }
    }
    let avg = tape.constant(Tensor::matrix(classes, n * classes, avg)?);
    Ok(tape.matmul(avg, text)?)
}

/// Builds `L_total` for one source/target batch pair on a fresh tape.
pub fn build_step(
    frozen: &FrozenWeights,
    cfg: &TrainConfig,
    modules: &PromptModules,
    source: &Batch<'_>,
    target: &Batch<'_>,
) -> Result<StepGraph> {
    if source.idx.is_empty() || target.idx.is_empty() {
        return Err(Error::Invalid("source and target batches must be nonempty".into()));
    }
    let labels = source.labels.ok_or_else(|| Error::Invalid("source batch needs labels".into()))?;
    if labels.len() != source.idx.len() {
        return Err(Error::Invalid("source labels do not match the batch".into()));
    }
    let w = cfg.weights;
    let mut tape = Tape::new();
    let vars = modules.register(&mut tape, true);
    let text_vars = TextVars::register(&mut tape, frozen);
    let class_tokens = tape.constant(frozen.class_tokens.clone());

    let k = cfg.layers;
    let mean_s = tape.constant(source.bank.mean_style(source.idx, k)?);
    let mean_t = tape.constant(target.bank.mean_style(target.idx, k)?);
    let needs_ds = cfg.layout().domain == DomainSlots::Learned || w.smn != 0.0;
    let d_s = if needs_ds { Some(vars.style_proj.forward(&mut tape, mean_s)?) } else { None };
    let domain = match cfg.layout().domain {
        DomainSlots::Learned => {
            let d_t = vars.style_proj.forward(&mut tape, mean_t)?;
            Some(domain_pair(&mut tape, d_t, d_s.expect("built for learned slots"))?)
        }
        DomainSlots::Template => Some(tape.constant(template_matrix(frozen))),
        DomainSlots::None => None,
    };

    let mut terms = LossTerms::default();
    let src = prompt_batch(&mut tape, frozen, cfg, &vars, &text_vars, class_tokens, domain, source)?;
    let labels: Vec<usize> = labels.to_vec();
    terms.ce = Some(ce_on_tape(&mut tape, src.logits, &labels)?);

    let mut target_entropy = None;
    if w.uses_target_predictions() {
        let tgt = prompt_batch(&mut tape, frozen, cfg, &vars, &text_vars, class_tokens, domain, target)?;
        let mut em = entropy_on_tape(&mut tape, tgt.logits);
        target_entropy = Some(tape.value(em).item());
        if cfg.em_on_source {
            let em_s = entropy_on_tape(&mut tape, src.logits);
            let both = tape.add(em, em_s)?;
            em = tape.scale(both, 0.5);
        }
        terms.em = Some(em);
        if w.kl != 0.0 {
            let classes = frozen.config.num_classes;
            let (t, s) = match cfg.kl_pairing {
                KlPairing::Images => {
                    let n = source.idx.len().min(target.idx.len()) * classes;
                    (tape.slice_rows(tgt.text, 0, n)?, tape.slice_rows(src.text, 0, n)?)
                }
                KlPairing::ClassMean => (
                    class_means(&mut tape, tgt.text, target.idx.len(), classes)?,
                    class_means(&mut tape, src.text, source.idx.len(), classes)?,
                ),
            };
            terms.kl = Some(kl_on_tape(&mut tape, t, s, cfg.kl)?);
        }
    }
    if w.smn != 0.0 {
        let d_hat = vars.style_map.forward(&mut tape, mean_t)?;
        let mut d_s = d_s.expect("built when the style map is trained");
        if cfg.smn_stop_grad {
            d_s = tape.detach(d_s);
        }
        terms.smn = Some(smn_on_tape(&mut tape, d_s, d_hat)?);
    }
    let (total, bundle) = combine_on_tape(&mut tape, terms, w)?;
    Ok(StepGraph { tape, total, params: vars.params(), bundle, source_logits: src.logits, terms, target_entropy })
}

/// Learning rate after `step` completed updates.
pub fn learning_rate(cfg: &TrainConfig, step: usize) -> f64 {
    match cfg.schedule {
        Schedule::Constant => cfg.lr,
        Schedule::Cosine => {
            let t = step as f64 / cfg.steps.max(1) as f64;
            0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
        }
    }
}

fn check_finite(bundle: &LossBundle, step: usize) -> Result<()> {
    let b = bundle;
    if [b.ce, b.smn, b.em, b.kl, b.total].iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite loss at step {step}: {b:?}")));
    }
    Ok(())
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub bundle: LossBundle,
    /// Batch accuracy on the source batch, in percent.
    pub source_acc: f64,
    pub target_entropy: Option<f64>,
}

/// One forward/backward of the objective and one Adam update.
pub fn train_step(
    frozen: &FrozenWeights,
    cfg: &TrainConfig,
    state: &mut TrainState,
    source: &Batch<'_>,
    target: &Batch<'_>,
) -> Result<StepReport> {
    let mut g = build_step(frozen, cfg, &state.modules, source, target)?;
    check_finite(&g.bundle, state.step)?;
    g.tape.backward(g.total)?;
    let grads: Vec<Option<Vec<f64>>> = g.params.iter().map(|&p| g.tape.grad(p).map(<[f64]>::to_vec)).collect();
    if grads.iter().flatten().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient at step {}", state.step)));
    }
    let logits = g.tape.value(g.source_logits);
    let labels = source.labels.expect("checked by build_step");
    let correct = (0..logits.rows()).filter(|&r| argmax(logits.row(r)) == labels[r]).count();
    let lr = learning_rate(cfg, state.step);
    state.adam.update(state.modules.tensors_mut(), &grads, lr, cfg);
    state.step += 1;
    Ok(StepReport {
        bundle: g.bundle,
        source_acc: 100.0 * correct as f64 / logits.rows() as f64,
        target_entropy: g.target_entropy,
    })
}

/// `[2 × d_t]` domain slot matrix for classifying `idx` of `bank`.
///
/// `D_t` comes from the set's own mean style. `D_s` is hallucinated by the
/// style mapping network from the same style, except in `sst-mean` mode or
/// when the mapping network was never trained, where the mean source style
/// is projected instead.
pub fn inference_tokens(
    frozen: &FrozenWeights,
    cfg: &TrainConfig,
    state: &TrainState,
    bank: &FeatureBank,
    idx: &[usize],
) -> Result<Option<Tensor>> {
    match cfg.layout().domain {
        DomainSlots::None => Ok(None),
        DomainSlots::Template => Ok(Some(template_matrix(frozen))),
        DomainSlots::Learned => {
            let style = bank.mean_style(idx, cfg.layers)?;
            let d_t = state.modules.style_proj.apply(&style)?;
            let d_s = if cfg.prompt == PromptMode::SstMean || cfg.weights.smn == 0.0 {
                state.modules.style_proj.apply(&state.source_style)?
            } else {
                state.modules.style_map.apply(&style)?
            };
            Ok(Some(Tensor::from_rows(&[d_t.into_data(), d_s.into_data()])?))
        }
    }
}

/// Source style projected by the trained style projector: the oracle `D_s`.
pub fn oracle_source_token(state: &TrainState, bank: &FeatureBank, idx: &[usize], layers: usize) -> Result<Tensor> {
    state.modules.style_proj.apply(&bank.mean_style(idx, layers)?)
}

const INFER_CHUNK: usize = 64;

/// `[n × K]` class probabilities with the given domain slot tokens.
pub fn class_probs(
    frozen: &FrozenWeights,
    cfg: &TrainConfig,
    modules: &PromptModules,
    bank: &FeatureBank,
    idx: &[usize],
    domain: Option<&Tensor>,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(INFER_CHUNK) {
        let mut tape = Tape::new();
        let vars = modules.register(&mut tape, false);
        let text_vars = TextVars::register(&mut tape, frozen);
        let class_tokens = tape.constant(frozen.class_tokens.clone());
        let d = domain.map(|t| tape.constant(t.clone()));
        let batch = Batch { bank, idx: chunk, labels: None };
        let p = prompt_batch(&mut tape, frozen, cfg, &vars, &text_vars, class_tokens, d, &batch)?;
        let probs = tape.softmax(p.logits);
        let probs = tape.value(probs);
        out.extend((0..probs.rows()).map(|r| probs.row(r).to_vec()));
    }
    Ok(out)
}

/// Top-1 predictions with explicit domain slot tokens.
pub fn classify_with_tokens(
    frozen: &FrozenWeights,
    cfg: &TrainConfig,
    state: &TrainState,
    bank: &FeatureBank,
    idx: &[usize],
    domain: Option<&Tensor>,
) -> Result<Vec<usize>> {
    let probs = class_probs(frozen, cfg, &state.modules, bank, idx, domain)?;
    Ok(probs.iter().map(|p| argmax(p)).collect())
}

/// Predicted class ids for every image of `bank`.
pub fn infer(frozen: &FrozenWeights, cfg: &TrainConfig, state: &TrainState, bank: &FeatureBank) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..bank.len()).collect();
    let domain = inference_tokens(frozen, cfg, state, bank, &idx)?;
    classify_with_tokens(frozen, cfg, state, bank, &idx, domain.as_ref())
}

/// Percentage of predictions equal to the labels.
pub fn accuracy(pred: &[usize], labels: &[usize]) -> Result<f64> {
    if pred.len() != labels.len() || pred.is_empty() {
        return Err(Error::Invalid(format!("{} predictions for {} labels", pred.len(), labels.len())));
    }
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(100.0 * hits as f64 / pred.len() as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One line of the metrics file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub bundle: LossBundle,
    pub source_acc: f64,
    pub target_acc: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,ce,smn,em,kl,align,total,source_acc,target_acc";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let b = &r.bundle;
        let _ = write!(out, "{},{},{},{},{},{},{},{},", r.step, b.ce, b.smn, b.em, b.kl, b.align, b.total, r.source_acc);
        if let Some(t) = r.target_acc {
            let _ = write!(out, "{t}");
        }
        out.push('\n');
    }
    out
}

/// Trains one run from scratch. `step_hook` sees every step report.
pub fn fit_with(
    frozen: &FrozenWeights,
    cfg: &TrainConfig,
    banks: &Banks,
    seed: u64,
    mut step_hook: impl FnMut(&TrainState, &StepReport),
) -> Result<TrainState> {
    let mut state = TrainState::new(frozen, cfg, banks, seed)?;
    for _ in 0..cfg.steps {
        let (s, t) = state.sample_batches(cfg.batch_size);
        let labels: Vec<usize> = s.iter().map(|&i| banks.source_labels[i]).collect();
        let source = Batch { bank: &banks.source, idx: &s, labels: Some(&labels) };
        let target = Batch { bank: &banks.target_train, idx: &t, labels: None };
        let report = train_step(frozen, cfg, &mut state, &source, &target)?;
        let target_acc = if cfg.eval_every > 0 && state.step % cfg.eval_every == 0 {
            Some(accuracy(&infer(frozen, cfg, &state, &banks.target_test)?, &banks.test_labels)?)
        } else {
            None
        };
        step_hook(&state, &report);
        state.history.push(MetricsRow { step: state.step, bundle: report.bundle, source_acc: report.source_acc, target_acc });
    }
    Ok(state)
}

pub fn fit(frozen: &FrozenWeights, cfg: &TrainConfig, banks: &Banks, seed: u64) -> Result<TrainState> {
    fit_with(frozen, cfg, banks, seed, |_, _| {})
}

/// Target test accuracies of `cfg.runs` independent runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl Evaluation {
    pub fn from_accuracies(accuracies: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&accuracies);
        Self { accuracies, mean, std }
    }
}

/// Run `r` trains with seed `cfg.seed + r` and is scored on the target test split.
pub fn evaluate(frozen: &FrozenWeights, cfg: &TrainConfig, banks: &Banks) -> Result<Evaluation> {
    cfg.validate(frozen)?;
    let mut accs = Vec::with_capacity(cfg.runs);
    for r in 0..cfg.runs {
        let run_cfg = TrainConfig { eval_every: 0, ..cfg.clone() };
        let state = fit(frozen, &run_cfg, banks, cfg.seed + r as u64)?;
        accs.push(accuracy(&infer(frozen, cfg, &state, &banks.target_test)?, &banks.test_labels)?);
    }
    Ok(Evaluation::from_accuracies(accs))
}

pub const CHECKPOINT_STEM: &str = "checkpoint";

/// Writes encoder weights, prompt modules and the mean source style as one
/// checkpoint. `meta` is stored in the manifest.
pub fn save_checkpoint(
    dir: &Path,
    frozen: &FrozenWeights,
    state: &TrainState,
    meta: serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    let mut tensors: Vec<(String, &Tensor)> = frozen.named_tensors();
    tensors.extend(state.modules.named_tensors());
    tensors.push(("source_style".into(), &state.source_style));
    weights::save(dir, CHECKPOINT_STEM, &tensors, meta)
}

/// Trained modules and mean source style read back from a checkpoint.
pub struct Checkpoint {
    pub frozen: FrozenWeights,
    pub modules: PromptModules,
    pub source_style: Tensor,
    pub meta: serde_json::Map<String, serde_json::Value>,
}

pub fn load_checkpoint(dir: &Path, enc: &crate::encoders::EncoderConfig, cfg: &TrainConfig) -> Result<Checkpoint> {
    let (mut tensors, manifest) = weights::load(dir, CHECKPOINT_STEM)?;
    let frozen = FrozenWeights::from_named(enc, &mut tensors)?;
    let source_style = weights::take(&mut tensors, "source_style")?;
    let modules = PromptModules::from_named(&mut tensors, cfg.context_len)?;
    if let Some((name, _)) = tensors.first() {
        return Err(Error::Invalid(format!("unexpected tensor {name:?} in checkpoint")));
    }
    Ok(Checkpoint { frozen, modules, source_style, meta: manifest.meta })
}

impl TrainState {
    /// A state carrying trained modules, for inference only.
    pub fn from_checkpoint(ck: &Checkpoint) -> Self {
        let adam = Adam::new(ck.modules.named_tensors().iter().map(|(_, t)| t.numel()));
        Self {
            modules: ck.modules.clone(),
            adam,
            step: 0,
            source_style: ck.source_style.clone(),
            history: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(0),
            source_sampler: Sampler::new(0),
            target_sampler: Sampler::new(0),
        }
    }
}

/// Writes `text` atomically.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, |f| f.write_all(text.as_bytes()))
}
