use super::{sinusoidal_positions, BlockWeights, FrozenWeights, ImageTensor, LN_EPS};
use crate::diffkit::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::promptgen::Prompt;

/// Frozen layer weights registered as constants on a tape.
pub struct BlockVars {
    ln1_gain: Var,
    ln1_bias: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ln2_gain: Var,
    ln2_bias: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl BlockVars {
    pub fn register(tape: &mut Tape, b: &BlockWeights) -> Self {
        let mut c = |t: &Tensor| tape.constant(t.clone());
        Self {
            ln1_gain: c(&b.ln1_gain),
            ln1_bias: c(&b.ln1_bias),
            wq: c(&b.wq),
            wk: c(&b.wk),
            wv: c(&b.wv),
            wo: c(&b.wo),
            ln2_gain: c(&b.ln2_gain),
            ln2_bias: c(&b.ln2_bias),
            w1: c(&b.w1),
            b1: c(&b.b1),
            w2: c(&b.w2),
            b2: c(&b.b2),
        }
    }

    /// Pre-norm attention and MLP sub-blocks with residuals; rows are grouped
    /// into independent sequences of `seq` tokens.
    pub fn forward(&self, tape: &mut Tape, x: Var, seq: usize) -> Result<Var> {
        let h = tape.layer_norm(x, self.ln1_gain, self.ln1_bias, LN_EPS)?;
        let q = tape.matmul(h, self.wq)?;
        let k = tape.matmul(h, self.wk)?;
        let v = tape.matmul(h, self.wv)?;
        let a = tape.attention_blocks(q, k, v, seq)?;
        let a = tape.matmul(a, self.wo)?;
        let x = tape.add(x, a)?;
        let h = tape.layer_norm(x, self.ln2_gain, self.ln2_bias, LN_EPS)?;
        let m = tape.matmul(h, self.w1)?;
        let m = tape.add_row(m, self.b1)?;
        let m = tape.gelu(m);
        let m = tape.matmul(m, self.w2)?;
        let m = tape.add_row(m, self.b2)?;
        Ok(tape.add(x, m)?)
    }
}

fn tiled(pos: &Tensor, copies: usize) -> Tensor {
    let data = pos.data().repeat(copies);
    Tensor::new(vec![pos.rows() * copies, pos.cols()], data).expect("positive extents")
}

pub struct TextVars {
    layers: Vec<BlockVars>,
    final_gain: Var,
    final_bias: Var,
    out_proj: Var,
    width: usize,
    max_len: usize,
}

impl TextVars {
    pub fn register(tape: &mut Tape, w: &FrozenWeights) -> Self {
        let layers = w.text.layers.iter().map(|b| BlockVars::register(tape, b)).collect();
        Self {
            layers,
            final_gain: tape.constant(w.text.final_gain.clone()),
            final_bias: tape.constant(w.text.final_bias.clone()),
            out_proj: tape.constant(w.text.out_proj.clone()),
            width: w.config.text_width,
            max_len: w.config.max_prompt_len,
        }
    }
}

/// Encodes `N` prompts stacked as `[N·seq_len × text_width]` rows into
/// `[N × embed_dim]` joint-space embeddings.
pub fn text_forward_batch(tape: &mut Tape, tv: &TextVars, tokens: Var, seq_len: usize) -> Result<Var> {
    let tv_val = tape.value(tokens);
    if tv_val.cols() != tv.width {
        return Err(Error::Invalid(format!(
            "prompt tokens have width {}, text encoder expects {}",
            tv_val.cols(),
            tv.width
        )));
    }
    if seq_len == 0 || seq_len > tv.max_len || tv_val.rows() % seq_len != 0 {
        return Err(Error::Invalid(format!(
            "{} prompt rows do not form sequences of length {seq_len} (max {})",
            tv_val.rows(),
            tv.max_len
        )));
    }
    let n = tv_val.rows() / seq_len;
    let pos = tape.constant(tiled(&sinusoidal_positions(seq_len, tv.width), n));
    let mut x = tape.add(tokens, pos)?;
    for layer in &tv.layers {
        x = layer.forward(tape, x, seq_len)?;
    }
    let x = tape.layer_norm(x, tv.final_gain, tv.final_bias, LN_EPS)?;
    let pooled = tape.block_mean(x, seq_len)?;
    Ok(tape.matmul(pooled, tv.out_proj)?)
}

/// Joint-space embedding of a single prompt.
pub fn text_forward(prompt: &Prompt, w: &FrozenWeights) -> Result<Tensor> {
    let mut tape = Tape::new();
    let tv = TextVars::register(&mut tape, w);
    let tokens = tape.constant(prompt.to_matrix()?);
    let emb = text_forward_batch(&mut tape, &tv, tokens, prompt.len())?;
    let e = tape.value(emb);
    Ok(Tensor::vector(e.data().to_vec()))
}

pub struct VisionVars {
    patch_proj: Var,
    layers: Vec<BlockVars>,
    out_proj: Var,
    tokens: usize,
    channels: usize,
    width: usize,
}

impl VisionVars {
    pub fn register(tape: &mut Tape, w: &FrozenWeights) -> Self {
        Self {
            patch_proj: tape.constant(w.vision.patch_proj.clone()),
            layers: w.vision.layers.iter().map(|b| BlockVars::register(tape, b)).collect(),
            out_proj: tape.constant(w.vision.out_proj.clone()),
            tokens: w.config.tokens_per_image,
            channels: w.config.channels,
            width: w.config.vision_width,
        }
    }

    /// Returns the per-layer token maps `[N·T × d_v]` and embeddings `[N × d_e]`.
    pub fn forward(&self, tape: &mut Tape, patches: Var) -> Result<(Vec<Var>, Var)> {
        let pv = tape.value(patches);
        if pv.cols() != self.channels || pv.rows() % self.tokens != 0 {
            return Err(Error::Invalid(format!(
                "patch matrix {:?} incompatible with {} tokens × {} channels",
                pv.shape(),
                self.tokens,
                self.channels
            )));
        }
        let n = pv.rows() / self.tokens;
        let pos = tape.constant(tiled(&sinusoidal_positions(self.tokens, self.width), n));
        let x = tape.matmul(patches, self.patch_proj)?;
        let mut x = tape.add(x, pos)?;
        let mut feats = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            x = layer.forward(tape, x, self.tokens)?;
            feats.push(x);
        }
        let pooled = tape.block_mean(x, self.tokens)?;
        let emb = tape.matmul(pooled, self.out_proj)?;
        Ok((feats, emb))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionOutput {
    /// Mean-pooled final token map projected to the joint space.
    pub embedding: Tensor,
    /// Full token map after each encoder layer, `[T × d_v]`.
    pub layer_feats: Vec<Tensor>,
}

pub fn vision_forward(x: &ImageTensor, w: &FrozenWeights) -> Result<VisionOutput> {
    let mut out = encode_images(std::slice::from_ref(x), w)?;
    Ok(out.remove(0))
}

/// Batched [`vision_forward`].
pub fn encode_images(images: &[ImageTensor], w: &FrozenWeights) -> Result<Vec<VisionOutput>> {
    const CHUNK: usize = 64;
    let (t, c, d) = (w.config.tokens_per_image, w.config.channels, w.config.vision_width);
    let mut outputs = Vec::with_capacity(images.len());
    for chunk in images.chunks(CHUNK) {
        let mut data = Vec::with_capacity(chunk.len() * t * c);
        for img in chunk {
            if img.values().shape() != [t, c] {
                return Err(Error::Invalid(format!(
                    "image shape {:?}, encoder expects [{t}, {c}]",
                    img.values().shape()
                )));
            }
            data.extend_from_slice(img.values().data());
        }
        let mut tape = Tape::new();
        let vv = VisionVars::register(&mut tape, w);
        let patches = tape.constant(Tensor::matrix(chunk.len() * t, c, data)?);
        let (feats, emb) = vv.forward(&mut tape, patches)?;
        for i in 0..chunk.len() {
            let layer_feats = feats
                .iter()
                .map(|&f| {
                    let fv = tape.value(f).data();
                    Tensor::matrix(t, d, fv[i * t * d..(i + 1) * t * d].to_vec()).expect("sized")
                })
                .collect();
            let embedding = Tensor::vector(tape.value(emb).row(i).to_vec());
            outputs.push(VisionOutput { embedding, layer_feats });
        }
    }
    Ok(outputs)
}
