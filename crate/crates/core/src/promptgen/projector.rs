use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::ContextTokens;
use crate::diffkit::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::weights::{self, NamedTensors};

fn dense(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let std = 1.0 / (fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("positive extents")
}

/// Affine + tanh encoder followed by an affine decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderDecoder {
    pub enc_w: Tensor,
    pub enc_b: Tensor,
    pub dec_w: Tensor,
    pub dec_b: Tensor,
}

pub struct EncDecVars {
    pub enc_w: Var,
    pub enc_b: Var,
    pub dec_w: Var,
    pub dec_b: Var,
}

impl EncoderDecoder {
    pub fn new(rng: &mut impl Rng, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            enc_w: dense(rng, input, hidden),
            enc_b: Tensor::zeros(vec![hidden]),
            dec_w: dense(rng, hidden, output),
            dec_b: Tensor::zeros(vec![output]),
        }
    }

    pub fn input_len(&self) -> usize {
        self.enc_w.rows()
    }

    pub fn output_len(&self) -> usize {
        self.dec_w.cols()
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> EncDecVars {
        let mut leaf = |t: &Tensor| tape.leaf(t.clone(), trainable);
        EncDecVars {
            enc_w: leaf(&self.enc_w),
            enc_b: leaf(&self.enc_b),
            dec_w: leaf(&self.dec_w),
            dec_b: leaf(&self.dec_b),
        }
    }

    /// Applies the network to one input vector.
    pub fn apply(&self, input: &Tensor) -> Result<Tensor> {
        if input.numel() != self.input_len() {
            return Err(Error::Invalid(format!(
                "input of length {} for a projector expecting {}",
                input.numel(),
                self.input_len()
            )));
        }
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let x = tape.constant(input.reshaped(vec![1, input.numel()])?);
        let y = vars.forward(&mut tape, x)?;
        Ok(Tensor::vector(tape.value(y).data().to_vec()))
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.enc_w"), &self.enc_w));
        out.push((format!("{prefix}.enc_b"), &self.enc_b));
        out.push((format!("{prefix}.dec_w"), &self.dec_w));
        out.push((format!("{prefix}.dec_b"), &self.dec_b));
    }

    fn named_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.enc_w);
        out.push(&mut self.enc_b);
        out.push(&mut self.dec_w);
        out.push(&mut self.dec_b);
    }

    fn take(prefix: &str, t: &mut NamedTensors) -> Result<Self> {
        Ok(Self {
            enc_w: weights::take(t, &format!("{prefix}.enc_w"))?,
            enc_b: weights::take(t, &format!("{prefix}.enc_b"))?,
            dec_w: weights::take(t, &format!("{prefix}.dec_w"))?,
            dec_b: weights::take(t, &format!("{prefix}.dec_b"))?,
        })
    }
}

impl EncDecVars {
    /// `[n × in] -> [n × out]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.enc_w)?;
        let h = tape.add_row(h, self.enc_b)?;
        let h = tape.tanh(h);
        let y = tape.matmul(h, self.dec_w)?;
        Ok(tape.add_row(y, self.dec_b)?)
    }

    pub fn params(&self) -> [Var; 4] {
        [self.enc_w, self.enc_b, self.dec_w, self.dec_b]
    }
}

/// Shared affine + tanh encoder with `L` independent affine decoder heads.
///
/// The heads are stored side by side as one `[h × L·d_t]` matrix; column
/// block `l` is head `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentProjector {
    pub enc_w: Tensor,
    pub enc_b: Tensor,
    pub heads_w: Tensor,
    pub heads_b: Tensor,
    pub heads: usize,
}

pub struct ContentVars {
    pub enc_w: Var,
    pub enc_b: Var,
    pub heads_w: Var,
    pub heads_b: Var,
    heads: usize,
}

impl ContentProjector {
    pub fn new(rng: &mut impl Rng, input: usize, hidden: usize, heads: usize, width: usize) -> Self {
        let enc_w = dense(rng, input, hidden);
        let per_head: Vec<Tensor> = (0..heads).map(|_| dense(rng, hidden, width)).collect();
        let mut heads_w = vec![0.0; hidden * heads * width];
        for (l, hw) in per_head.iter().enumerate() {
            for r in 0..hidden {
                let dst = r * heads * width + l * width;
                heads_w[dst..dst + width].copy_from_slice(hw.row(r));
            }
        }
        Self {
            enc_w,
            enc_b: Tensor::zeros(vec![hidden]),
            heads_w: Tensor::matrix(hidden, heads * width, heads_w).expect("sized"),
            heads_b: Tensor::zeros(vec![heads * width]),
            heads,
        }
    }

    pub fn input_len(&self) -> usize {
        self.enc_w.rows()
    }

    pub fn token_width(&self) -> usize {
        self.heads_w.cols() / self.heads
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ContentVars {
        let mut leaf = |t: &Tensor| tape.leaf(t.clone(), trainable);
        ContentVars {
            enc_w: leaf(&self.enc_w),
            enc_b: leaf(&self.enc_b),
            heads_w: leaf(&self.heads_w),
            heads_b: leaf(&self.heads_b),
            heads: self.heads,
        }
    }

    pub fn apply(&self, content: &Tensor) -> Result<ContextTokens> {
        if content.numel() != self.input_len() {
            return Err(Error::Invalid(format!(
                "content of length {} for a projector expecting {}",
                content.numel(),
                self.input_len()
            )));
        }
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let x = tape.constant(content.reshaped(vec![1, content.numel()])?);
        let y = vars.forward(&mut tape, x)?;
        let y = tape.value(y);
        Ok(ContextTokens((0..y.rows()).map(|r| Tensor::vector(y.row(r).to_vec())).collect()))
    }
}

impl ContentVars {
    /// `[n × in] -> [n·L × d_t]`, the `L` tokens of each image in head order.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let n = tape.value(x).rows();
        let h = tape.matmul(x, self.enc_w)?;
        let h = tape.add_row(h, self.enc_b)?;
        let h = tape.tanh(h);
        let y = tape.matmul(h, self.heads_w)?;
        let y = tape.add_row(y, self.heads_b)?;
        let width = tape.value(y).cols() / self.heads;
        Ok(tape.reshape(y, vec![n * self.heads, width])?)
    }

    pub fn params(&self) -> [Var; 4] {
        [self.enc_w, self.enc_b, self.heads_w, self.heads_b]
    }
}

/// Every trainable module of the prompt learner.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptModules {
    pub style_proj: EncoderDecoder,
    pub content_proj: ContentProjector,
    pub style_map: EncoderDecoder,
    /// Learned context shared by all images, used when prompts do not take
    /// image-specific tokens.
    pub shared_context: Option<Tensor>,
}

pub struct PromptVars {
    pub style_proj: EncDecVars,
    pub content_proj: ContentVars,
    pub style_map: EncDecVars,
    pub shared_context: Option<Var>,
}

impl PromptModules {
    /// `style_len = 2·K·d_v`, `content_len = K·d_v`; hidden width is `2·d_t`.
    pub fn new(
        rng: &mut impl Rng,
        style_len: usize,
        content_len: usize,
        context_len: usize,
        token_width: usize,
        shared_context: bool,
    ) -> Self {
        let hidden = 2 * token_width;
        let style_proj = EncoderDecoder::new(rng, style_len, hidden, token_width);
        let content_proj = ContentProjector::new(rng, content_len, hidden, context_len, token_width);
        let style_map = EncoderDecoder::new(rng, style_len, hidden, token_width);
        let shared_context = shared_context.then(|| {
            let data = (0..context_len * token_width)
                .map(|_| StandardNormal.sample(rng))
                .collect();
            Tensor::matrix(context_len, token_width, data).expect("positive extents")
        });
        Self { style_proj, content_proj, style_map, shared_context }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.style_proj.named("style_proj", &mut out);
        out.push(("content_proj.enc_w".into(), &self.content_proj.enc_w));
        out.push(("content_proj.enc_b".into(), &self.content_proj.enc_b));
        out.push(("content_proj.heads_w".into(), &self.content_proj.heads_w));
        out.push(("content_proj.heads_b".into(), &self.content_proj.heads_b));
        self.style_map.named("style_map", &mut out);
        if let Some(ctx) = &self.shared_context {
            out.push(("shared_context".into(), ctx));
        }
        out
    }

    /// Mutable access in the same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.style_proj.named_mut(&mut out);
        out.push(&mut self.content_proj.enc_w);
        out.push(&mut self.content_proj.enc_b);
        out.push(&mut self.content_proj.heads_w);
        out.push(&mut self.content_proj.heads_b);
        self.style_map.named_mut(&mut out);
        if let Some(ctx) = &mut self.shared_context {
            out.push(ctx);
        }
        out
    }

    pub fn from_named(tensors: &mut NamedTensors, context_len: usize) -> Result<Self> {
        let style_proj = EncoderDecoder::take("style_proj", tensors)?;
        let content_proj = ContentProjector {
            enc_w: weights::take(tensors, "content_proj.enc_w")?,
            enc_b: weights::take(tensors, "content_proj.enc_b")?,
            heads_w: weights::take(tensors, "content_proj.heads_w")?,
            heads_b: weights::take(tensors, "content_proj.heads_b")?,
            heads: context_len,
        };
        if context_len == 0 || content_proj.heads_w.cols() % context_len != 0 {
            return Err(Error::Invalid("content heads do not match the context length".into()));
        }
        let style_map = EncoderDecoder::take("style_map", tensors)?;
        let shared_context = weights::take(tensors, "shared_context").ok();
        Ok(Self { style_proj, content_proj, style_map, shared_context })
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> PromptVars {
        PromptVars {
            style_proj: self.style_proj.register(tape, trainable),
            content_proj: self.content_proj.register(tape, trainable),
            style_map: self.style_map.register(tape, trainable),
            shared_context: self.shared_context.as_ref().map(|t| tape.leaf(t.clone(), trainable)),
        }
    }
}

impl PromptVars {
    /// Parameter handles in [`PromptModules::named_tensors`] order.
    pub fn params(&self) -> Vec<Var> {
        let mut out = Vec::with_capacity(13);
        out.extend(self.style_proj.params());
        out.extend(self.content_proj.params());
        out.extend(self.style_map.params());
        out.extend(self.shared_context);
        out
    }
}
