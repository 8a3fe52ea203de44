//! Whole-experiment configuration as flat `section.key=value` text.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::kv::{KvMap, KvWriter};
use crate::synthdata::DatasetConfig;
use crate::trainer::TrainConfig;

/// Encoder architecture, data, and training settings under one seed.
///
/// The seed drives the frozen encoders, the dataset, and run 0 of the
/// trainer; run `r` uses `seed + r`. Encoder token, channel and class counts
/// always follow the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: EncoderConfig,
    pub data: DatasetConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { seed: 0, model: EncoderConfig::default(), data: DatasetConfig::default(), train: TrainConfig::default() }
        .synced()
    }
}

/// Writes a section, keeping its `seed` line only when it differs from the
/// top-level seed.
fn section(w: &mut KvWriter, prefix: &str, seed: u64, write: impl FnOnce(&mut KvWriter)) {
    let mut inner = KvWriter::default();
    write(&mut inner);
    for line in inner.finish().lines() {
        let (k, v) = line.split_once('=').expect("writer emits key=value");
        if k != "seed" || v != seed.to_string() {
            w.put(&format!("{prefix}{k}"), v);
        }
    }
}

impl ExperimentConfig {
    /// Copies the seed and the data-derived shapes into every section.
    pub fn synced(mut self) -> Self {
        self.model.seed = self.seed;
        self.model.tokens_per_image = self.data.tokens;
        self.model.channels = self.data.channels;
        self.model.num_classes = self.data.num_classes;
        self.data.seed = self.seed;
        self.train.seed = self.seed;
        self
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        *self = self.clone().synced();
    }

    /// Reseeds the encoders and trainer, keeping the dataset as it is.
    pub fn set_run_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
    }

    /// Adopts the configuration stored in a loaded dataset.
    pub fn set_data(&mut self, data: DatasetConfig) {
        self.seed = data.seed;
        self.data = data;
        *self = self.clone().synced();
    }

    pub fn to_text(&self) -> String {
        let mut w = KvWriter::default();
        w.put("seed", self.seed);
        let m = &self.model;
        w.put("model.vision_layers", m.vision_layers)
            .put("model.text_layers", m.text_layers)
            .put("model.vision_width", m.vision_width)
            .put("model.text_width", m.text_width)
            .put("model.embed_dim", m.embed_dim)
            .put("model.max_prompt_len", m.max_prompt_len);
        section(&mut w, "data.", self.seed, |w| self.data.write_kv(w));
        section(&mut w, "train.", self.seed, |w| self.train.write_kv(w));
        w.finish()
    }

    /// Parses text over the defaults. Unknown keys are rejected. A
    /// `data.seed` line records data generated under a different seed.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = KvMap::parse(text, 0)?;
        for key in ["model.seed", "train.seed"] {
            if let Some((_, off)) = kv.take_raw(key) {
                return Err(Error::parse(off, format!("unknown key {key:?}; use the top-level seed")));
            }
        }
        let mut c = Self::default();
        kv.update("seed", &mut c.seed)?;
        let m = &mut c.model;
        kv.update("model.vision_layers", &mut m.vision_layers)?;
        kv.update("model.text_layers", &mut m.text_layers)?;
        kv.update("model.vision_width", &mut m.vision_width)?;
        kv.update("model.text_width", &mut m.text_width)?;
        kv.update("model.embed_dim", &mut m.embed_dim)?;
        kv.update("model.max_prompt_len", &mut m.max_prompt_len)?;
        c.data.update_from(&mut kv, "data.")?;
        c.train.update_from(&mut kv, "train.")?;
        kv.finish()?;
        let data_seed = c.data.seed;
        let explicit = text.lines().any(|l| l.split_once('=').is_some_and(|(k, _)| k.trim() == "data.seed"));
        let mut c = c.synced();
        if explicit {
            c.data.seed = data_seed;
        }
        Ok(c)
    }

    /// Reads a config file. Any failure is reported as a usage error.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_text(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Hex SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()
    }
}
