use super::{extract_content, extract_style};
use crate::diffkit::Tensor;
use crate::encoders::{encode_images, FrozenWeights, ImageTensor};
use crate::error::{Error, Result};

/// Frozen-encoder outputs for one image. Style and content cover all `M`
/// layers in layer order, so the first `K` layers are a prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    pub embedding: Vec<f64>,
    pub style: Vec<f64>,
    pub content: Vec<f64>,
}

/// Precomputed features of an image set. The vision encoder is frozen and
/// its inputs are constants, so one pass per dataset suffices.
#[derive(Debug, Clone)]
pub struct FeatureBank {
    features: Vec<ImageFeatures>,
    layers: usize,
    width: usize,
}

impl FeatureBank {
    pub fn build(images: &[ImageTensor], w: &FrozenWeights) -> Result<Self> {
        let outputs = encode_images(images, w)?;
        let mut features = Vec::with_capacity(outputs.len());
        for out in outputs {
            let style = extract_style(&out.layer_feats)?.0.into_data();
            let content = extract_content(&out.layer_feats)?.0.into_data();
            features.push(ImageFeatures { embedding: out.embedding.into_data(), style, content });
        }
        Ok(Self { features, layers: w.config.vision_layers, width: w.config.vision_width })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn get(&self, i: usize) -> &ImageFeatures {
        &self.features[i]
    }

    fn check_layers(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.layers {
            return Err(Error::Config(format!("layer subset {k} outside 1..={}", self.layers)));
        }
        Ok(())
    }

    pub fn style_len(&self, k: usize) -> usize {
        2 * k * self.width
    }

    pub fn content_len(&self, k: usize) -> usize {
        k * self.width
    }

    fn stack(&self, idx: &[usize], cols: usize, pick: impl Fn(&ImageFeatures) -> &[f64]) -> Result<Tensor> {
        if idx.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            let f = self.features.get(i).ok_or_else(|| Error::Invalid(format!("image {i} out of range")))?;
            data.extend_from_slice(&pick(f)[..cols]);
        }
        Ok(Tensor::matrix(idx.len(), cols, data)?)
    }

    /// Style vectors of the first `k` layers, one row per image.
    pub fn style_matrix(&self, idx: &[usize], k: usize) -> Result<Tensor> {
        self.check_layers(k)?;
        self.stack(idx, self.style_len(k), |f| &f.style)
    }

    pub fn content_matrix(&self, idx: &[usize], k: usize) -> Result<Tensor> {
        self.check_layers(k)?;
        self.stack(idx, self.content_len(k), |f| &f.content)
    }

    pub fn embedding_matrix(&self, idx: &[usize]) -> Result<Tensor> {
        let d = self.features.first().map(|f| f.embedding.len()).unwrap_or(0);
        self.stack(idx, d, |f| &f.embedding)
    }

    /// Batch-mean style of the first `k` layers as a `[1 × 2·k·d_v]` row.
    pub fn mean_style(&self, idx: &[usize], k: usize) -> Result<Tensor> {
        let m = self.style_matrix(idx, k)?;
        let cols = m.cols();
        let mut mean = vec![0.0; cols];
        for r in 0..m.rows() {
            mean.iter_mut().zip(m.row(r)).for_each(|(a, b)| *a += b);
        }
        mean.iter_mut().for_each(|a| *a /= m.rows() as f64);
        Ok(Tensor::matrix(1, cols, mean)?)
    }
}
