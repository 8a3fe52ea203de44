//! Frozen, seed-deterministic vision and text transformer encoders.
//!
//! Both stacks are pre-norm single-head transformers. The vision stack maps
//! a patch matrix to per-layer token maps and a joint-space embedding; the
//! text stack maps a sequence of token embeddings to the same joint space.
//! Their weights are never updated, but gradients flow through them into
//! the input tokens.

mod forward;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffkit::Tensor;
use crate::error::{Error, Result};
use crate::weights::{self, NamedTensors};

pub use forward::{
    encode_images, text_forward, text_forward_batch, vision_forward, BlockVars, TextVars, VisionOutput,
    VisionVars,
};

pub const LN_EPS: f64 = 1e-5;

/// Number of frozen template tokens available for manual-context prompts.
pub const TEMPLATE_TOKENS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub vision_layers: usize,
    pub text_layers: usize,
    pub vision_width: usize,
    pub text_width: usize,
    pub embed_dim: usize,
    pub tokens_per_image: usize,
    pub channels: usize,
    pub num_classes: usize,
    /// Longest prompt the text encoder accepts.
    pub max_prompt_len: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vision_layers: 3,
            text_layers: 2,
            vision_width: 16,
            text_width: 16,
            embed_dim: 16,
            tokens_per_image: 16,
            channels: 8,
            num_classes: 8,
            max_prompt_len: 16,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::Config(msg.to_string())) };
        check(self.vision_layers >= 1, "vision_layers must be at least 1")?;
        check(self.text_layers >= 1, "text_layers must be at least 1")?;
        check(self.vision_width >= 2, "vision_width must be at least 2")?;
        check(self.text_width >= 2, "text_width must be at least 2")?;
        check(self.embed_dim >= 2, "embed_dim must be at least 2")?;
        check(self.tokens_per_image >= 2, "tokens_per_image must be at least 2")?;
        check(self.channels >= 1, "channels must be at least 1")?;
        check(self.num_classes >= 2, "num_classes must be at least 2")?;
        check(self.max_prompt_len >= 2, "max_prompt_len must be at least 2")
    }

    pub fn mlp_width(&self, width: usize) -> usize {
        2 * width
    }
}

/// One pre-norm transformer layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionWeights {
    pub patch_proj: Tensor,
    pub layers: Vec<BlockWeights>,
    pub out_proj: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextWeights {
    pub layers: Vec<BlockWeights>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    pub out_proj: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenWeights {
    pub config: EncoderConfig,
    pub vision: VisionWeights,
    pub text: TextWeights,
    /// Per-class name embeddings, `[num_classes × text_width]`.
    pub class_tokens: Tensor,
    /// Fixed stand-in for a hand-written prompt template, `[TEMPLATE_TOKENS × text_width]`.
    pub template_tokens: Tensor,
}

/// Patch matrix of one image, `[tokens_per_image × channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor(pub Tensor);

impl ImageTensor {
    pub fn new(values: Tensor, tokens: usize, channels: usize) -> Result<Self> {
        if values.shape() != [tokens, channels] {
            return Err(Error::Invalid(format!(
                "image shape {:?}, expected [{tokens}, {channels}]",
                values.shape()
            )));
        }
        if !values.is_finite() {
            return Err(Error::Invalid("image contains non-finite values".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Tensor {
        &self.0
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng }
    }

    fn normal(&mut self, shape: Vec<usize>, std: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| std * Distribution::<f64>::sample(&StandardNormal, &mut self.rng))
            .collect();
        Tensor::new(shape, data).expect("positive extents")
    }

    /// Fan-in scaled matrix.
    fn dense(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        self.normal(vec![fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
    }

    fn block(&mut self, width: usize, hidden: usize) -> BlockWeights {
        BlockWeights {
            ln1_gain: Tensor::filled(vec![width], 1.0),
            ln1_bias: Tensor::zeros(vec![width]),
            wq: self.dense(width, width),
            wk: self.dense(width, width),
            wv: self.dense(width, width),
            wo: self.dense(width, width),
            ln2_gain: Tensor::filled(vec![width], 1.0),
            ln2_bias: Tensor::zeros(vec![width]),
            w1: self.dense(width, hidden),
            b1: Tensor::zeros(vec![hidden]),
            w2: self.dense(hidden, width),
            b2: Tensor::zeros(vec![width]),
        }
    }
}

pub fn init_frozen(config: &EncoderConfig) -> Result<FrozenWeights> {
    config.validate()?;
    let c = config;
    let mut vis = Init::new(c.seed, 1);
    let vision = VisionWeights {
        patch_proj: vis.dense(c.channels, c.vision_width),
        layers: (0..c.vision_layers)
            .map(|_| vis.block(c.vision_width, c.mlp_width(c.vision_width)))
            .collect(),
        out_proj: vis.dense(c.vision_width, c.embed_dim),
    };
    let mut txt = Init::new(c.seed, 2);
    let text = TextWeights {
        layers: (0..c.text_layers).map(|_| txt.block(c.text_width, c.mlp_width(c.text_width))).collect(),
        final_gain: Tensor::filled(vec![c.text_width], 1.0),
        final_bias: Tensor::zeros(vec![c.text_width]),
        out_proj: txt.dense(c.text_width, c.embed_dim),
    };
    let mut tok = Init::new(c.seed, 3);
    let tok_std = 1.0 / (c.text_width as f64).sqrt();
    Ok(FrozenWeights {
        config: config.clone(),
        vision,
        text,
        class_tokens: tok.normal(vec![c.num_classes, c.text_width], tok_std),
        template_tokens: tok.normal(vec![TEMPLATE_TOKENS, c.text_width], tok_std),
    })
}

fn block_named<'a>(prefix: &str, b: &'a BlockWeights, out: &mut Vec<(String, &'a Tensor)>) {
    let fields: [(&str, &Tensor); 12] = [
        ("ln1_gain", &b.ln1_gain),
        ("ln1_bias", &b.ln1_bias),
        ("wq", &b.wq),
        ("wk", &b.wk),
        ("wv", &b.wv),
        ("wo", &b.wo),
        ("ln2_gain", &b.ln2_gain),
        ("ln2_bias", &b.ln2_bias),
        ("w1", &b.w1),
        ("b1", &b.b1),
        ("w2", &b.w2),
        ("b2", &b.b2),
    ];
    for (name, t) in fields {
        out.push((format!("{prefix}.{name}"), t));
    }
}

fn take_block(prefix: &str, t: &mut NamedTensors) -> Result<BlockWeights> {
    let mut get = |name: &str| weights::take(t, &format!("{prefix}.{name}"));
    Ok(BlockWeights {
        ln1_gain: get("ln1_gain")?,
        ln1_bias: get("ln1_bias")?,
        wq: get("wq")?,
        wk: get("wk")?,
        wv: get("wv")?,
        wo: get("wo")?,
        ln2_gain: get("ln2_gain")?,
        ln2_bias: get("ln2_bias")?,
        w1: get("w1")?,
        b1: get("b1")?,
        w2: get("w2")?,
        b2: get("b2")?,
    })
}

impl FrozenWeights {
    /// Every weight tensor with a stable name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("vision.patch_proj".to_string(), &self.vision.patch_proj)];
        for (i, b) in self.vision.layers.iter().enumerate() {
            block_named(&format!("vision.layer{i}"), b, &mut out);
        }
        out.push(("vision.out_proj".into(), &self.vision.out_proj));
        for (i, b) in self.text.layers.iter().enumerate() {
            block_named(&format!("text.layer{i}"), b, &mut out);
        }
        out.push(("text.final_gain".into(), &self.text.final_gain));
        out.push(("text.final_bias".into(), &self.text.final_bias));
        out.push(("text.out_proj".into(), &self.text.out_proj));
        out.push(("class_tokens".into(), &self.class_tokens));
        out.push(("template_tokens".into(), &self.template_tokens));
        out
    }

    pub fn checksum(&self) -> String {
        weights::checksum(self.named_tensors().iter().map(|(n, t)| (n.as_str(), *t)))
    }

    /// Rebuilds weights from tensors previously produced by [`Self::named_tensors`],
    /// removing the consumed entries from `tensors`.
    pub fn from_named(config: &EncoderConfig, tensors: &mut NamedTensors) -> Result<Self> {
        config.validate()?;
        let vision = VisionWeights {
            patch_proj: weights::take(tensors, "vision.patch_proj")?,
            layers: (0..config.vision_layers)
                .map(|i| take_block(&format!("vision.layer{i}"), tensors))
                .collect::<Result<_>>()?,
            out_proj: weights::take(tensors, "vision.out_proj")?,
        };
        let text = TextWeights {
            layers: (0..config.text_layers)
                .map(|i| take_block(&format!("text.layer{i}"), tensors))
                .collect::<Result<_>>()?,
            final_gain: weights::take(tensors, "text.final_gain")?,
            final_bias: weights::take(tensors, "text.final_bias")?,
            out_proj: weights::take(tensors, "text.out_proj")?,
        };
        let w = Self {
            config: config.clone(),
            vision,
            text,
            class_tokens: weights::take(tensors, "class_tokens")?,
            template_tokens: weights::take(tensors, "template_tokens")?,
        };
        let expected = init_frozen(config)?;
        for ((name, a), (_, b)) in w.named_tensors().iter().zip(expected.named_tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::Invalid(format!(
                    "tensor {name} has shape {:?}, config implies {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(w)
    }
}

/// Fixed sinusoidal offsets, `[len × width]`.
pub fn sinusoidal_positions(len: usize, width: usize) -> Tensor {
    let mut data = vec![0.0; len * width];
    for pos in 0..len {
        for i in 0..width {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / width as f64);
            data[pos * width + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, width], data).expect("positive extents")
}

#[cfg(test)]
mod tests;
