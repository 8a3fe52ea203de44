//! Prompt construction from visual style and content.
//!
//! Style is the per-layer channel mean and standard deviation of the vision
//! token maps; content is the per-layer token mean. A shared style projector
//! turns batch-mean style into one domain token per domain, a content
//! projector turns each image's content into `L` context tokens, and a style
//! mapping network predicts the source domain token from target style.

mod features;
mod projector;

use crate::diffkit::{Tape, Tensor, Var};
use crate::encoders::{FrozenWeights, TEMPLATE_TOKENS};
use crate::error::{Error, Result};

pub use features::{FeatureBank, ImageFeatures};
pub use projector::{ContentProjector, ContentVars, EncDecVars, EncoderDecoder, PromptModules, PromptVars};

pub type StyleProjector = EncoderDecoder;
pub type StyleMapNet = EncoderDecoder;

pub const STYLE_EPS: f64 = 1e-5;

/// `[μ₁;σ₁;…;μ_M;σ_M]` for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleVector(pub Tensor);

/// `[f̂¹;…;f̂^M]`, per-layer token means for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentVector(pub Tensor);

#[derive(Debug, Clone, PartialEq)]
pub struct DomainToken(pub Tensor);

#[derive(Debug, Clone, PartialEq)]
pub struct ContextTokens(pub Vec<Tensor>);

/// Token sequence fed to the text encoder; the class embedding is always
/// the last slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub tokens: Vec<Tensor>,
}

impl Prompt {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn to_matrix(&self) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = self.tokens.iter().map(|t| t.data().to_vec()).collect();
        Ok(Tensor::from_rows(&rows)?)
    }
}

fn check_layers(layer_feats: &[Tensor]) -> Result<()> {
    let Some(first) = layer_feats.first() else {
        return Err(Error::Invalid("no layer features".into()));
    };
    if layer_feats.iter().any(|f| f.shape() != first.shape()) {
        return Err(Error::Invalid("layer features differ in shape".into()));
    }
    Ok(())
}

/// Tape version of [`extract_style`]; each input is a `[T × d]` token map.
pub fn style_on_tape(tape: &mut Tape, layer_feats: &[Var]) -> Result<Var> {
    let mut parts = Vec::with_capacity(2 * layer_feats.len());
    for &f in layer_feats {
        let (mu, sigma) = tape.mean_std(f, STYLE_EPS)?;
        parts.push(mu);
        parts.push(sigma);
    }
    concat_rows_as_vector(tape, &parts)
}

fn concat_rows_as_vector(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    if parts.is_empty() {
        return Err(Error::Invalid("no layer features".into()));
    }
    let index: Vec<(usize, usize)> = (0..parts.len()).map(|i| (i, 0)).collect();
    let stacked = tape.gather_rows(parts, &index)?;
    let n = tape.value(stacked).numel();
    Ok(tape.reshape(stacked, vec![n])?)
}

pub fn extract_style(layer_feats: &[Tensor]) -> Result<StyleVector> {
    check_layers(layer_feats)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = layer_feats.iter().map(|f| tape.constant(f.clone())).collect();
    let s = style_on_tape(&mut tape, &vars)?;
    Ok(StyleVector(tape.value(s).clone()))
}

pub fn extract_content(layer_feats: &[Tensor]) -> Result<ContentVector> {
    check_layers(layer_feats)?;
    let mut tape = Tape::new();
    let mut parts = Vec::with_capacity(layer_feats.len());
    for f in layer_feats {
        let v = tape.constant(f.clone());
        let t = f.rows();
        parts.push(tape.block_mean(v, t)?);
    }
    let c = concat_rows_as_vector(&mut tape, &parts)?;
    Ok(ContentVector(tape.value(c).clone()))
}

/// Element-wise mean of equal-length vectors.
pub fn mean_vector<'a>(vectors: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut acc: Option<Vec<f64>> = None;
    let mut count = 0usize;
    for v in vectors {
        let slot = acc.get_or_insert_with(|| vec![0.0; v.numel()]);
        if slot.len() != v.numel() {
            return Err(Error::Invalid("vectors differ in length".into()));
        }
        slot.iter_mut().zip(v.data()).for_each(|(a, b)| *a += b);
        count += 1;
    }
    let Some(mut acc) = acc else {
        return Err(Error::Invalid("empty batch".into()));
    };
    acc.iter_mut().for_each(|a| *a /= count as f64);
    Ok(Tensor::vector(acc))
}

/// Domain token of a same-domain batch: the projector applied to the
/// batch-mean style vector.
pub fn batch_domain_token(styles: &[StyleVector], proj: &StyleProjector) -> Result<DomainToken> {
    let mean = mean_vector(styles.iter().map(|s| &s.0))?;
    Ok(DomainToken(proj.apply(&mean)?))
}

pub fn content_tokens(content: &ContentVector, proj: &ContentProjector) -> Result<ContextTokens> {
    proj.apply(&content.0)
}

/// Predicted source domain token from target style.
pub fn map_style(target_style: &StyleVector, net: &StyleMapNet) -> Result<DomainToken> {
    Ok(DomainToken(net.apply(&target_style.0)?))
}

/// `[D_t, D_s, V_1, …, V_L, CLS_y]`.
pub fn assemble_prompt(
    d_t: &DomainToken,
    d_s: &DomainToken,
    context: &ContextTokens,
    class: usize,
    w: &FrozenWeights,
) -> Result<Prompt> {
    if class >= w.config.num_classes {
        return Err(Error::Invalid(format!(
            "class {class} outside label space of {}",
            w.config.num_classes
        )));
    }
    let width = w.config.text_width;
    let mut tokens = Vec::with_capacity(context.0.len() + 3);
    tokens.push(d_t.0.clone());
    tokens.push(d_s.0.clone());
    tokens.extend(context.0.iter().cloned());
    tokens.push(Tensor::vector(w.class_tokens.row(class).to_vec()));
    if tokens.iter().any(|t| t.numel() != width) {
        return Err(Error::Invalid(format!("prompt tokens must have width {width}")));
    }
    Ok(Prompt { tokens })
}

/// What occupies the two slots ahead of the context tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainSlots {
    /// Learned `[D_t; D_s]` from style statistics.
    Learned,
    /// Frozen template embeddings standing in for a hand-written phrase.
    Template,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptLayout {
    pub domain: DomainSlots,
    /// Context tokens from image content; otherwise one learned set shared by all images.
    pub image_context: bool,
    pub context_len: usize,
}

impl PromptLayout {
    pub fn domain_len(&self) -> usize {
        match self.domain {
            DomainSlots::Learned | DomainSlots::Template => 2,
            DomainSlots::None => 0,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.domain_len() + self.context_len + 1
    }
}

/// Stacks the prompts of `n_images` images for every class as
/// `[n_images·num_classes·seq_len × d_t]` rows, image-major then class.
///
/// `domain` is a `[2 × d_t]` matrix with row 0 = D_t and row 1 = D_s (or the
/// template tokens); `context` holds `L` rows per image, or `L` rows total
/// when the layout uses a shared context.
pub fn assemble_batch(
    tape: &mut Tape,
    layout: &PromptLayout,
    domain: Option<Var>,
    context: Var,
    class_tokens: Var,
    n_images: usize,
) -> Result<Var> {
    let num_classes = tape.value(class_tokens).rows();
    let l = layout.context_len;
    let expected_ctx = if layout.image_context { n_images * l } else { l };
    if tape.value(context).rows() != expected_ctx {
        return Err(Error::Invalid(format!(
            "context has {} rows, layout needs {expected_ctx}",
            tape.value(context).rows()
        )));
    }
    let mut sources = vec![context, class_tokens];
    let domain_src = match (layout.domain_len(), domain) {
        (0, _) => None,
        (_, Some(d)) if tape.value(d).rows() == 2 => {
            sources.push(d);
            Some(2)
        }
        _ => return Err(Error::Invalid("layout needs a [2 × d_t] domain token matrix".into())),
    };
    let mut index = Vec::with_capacity(n_images * num_classes * layout.seq_len());
    for i in 0..n_images {
        for k in 0..num_classes {
            if let Some(src) = domain_src {
                index.push((src, 0));
                index.push((src, 1));
            }
            let base = if layout.image_context { i * l } else { 0 };
            index.extend((0..l).map(|j| (0, base + j)));
            index.push((1, k));
        }
    }
    Ok(tape.gather_rows(&sources, &index)?)
}

/// Template tokens as the domain slot matrix.
pub fn template_matrix(w: &FrozenWeights) -> Tensor {
    debug_assert_eq!(w.template_tokens.rows(), TEMPLATE_TOKENS);
    w.template_tokens.clone()
}

#[cfg(test)]
mod tests;
