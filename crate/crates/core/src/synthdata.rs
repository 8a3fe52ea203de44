//! Paired-domain synthetic image sets with a controllable style shift.
//!
//! Every class has a fixed prototype patch matrix. A source image is its
//! class prototype plus Gaussian noise; a target image is drawn the same
//! way and then passed through a per-channel affine map `x·gain + offset`,
//! which moves exactly the first- and second-order channel statistics.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "PADSET01"
//! u32      length of the header block in bytes
//! header   key=value text (dataset config, domain, labeled, count)
//! records  count × ( tokens·channels f64 patch values [, u16 label] )
//! ```

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffkit::Tensor;
use crate::encoders::ImageTensor;
use crate::error::{Error, Result};
use crate::kv::{KvMap, KvWriter};
use crate::weights::write_atomic;

pub const MAGIC: &[u8; 8] = b"PADSET01";

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub tokens: usize,
    pub channels: usize,
    /// Standard deviation of prototype entries.
    pub class_sep: f64,
    pub noise: f64,
    /// Magnitude of the per-channel target offsets.
    pub shift_offset: f64,
    /// Log-gains are drawn uniformly from `[-shift_log_gain, shift_log_gain]`.
    pub shift_log_gain: f64,
    /// Fraction of each target class held out for evaluation.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            samples_per_class: 64,
            tokens: 16,
            channels: 8,
            class_sep: 1.0,
            noise: 0.5,
            shift_offset: 0.16,
            shift_log_gain: 0.5,
            test_fraction: 0.5,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.num_classes > u16::MAX as usize {
            return bad("num_classes must fit in 16 bits");
        }
        if self.samples_per_class == 0 || self.tokens == 0 || self.channels == 0 {
            return bad("samples_per_class, tokens and channels must be positive");
        }
        if !(self.class_sep > 0.0) || !(self.noise >= 0.0) || !(self.shift_log_gain >= 0.0) {
            return bad("class_sep must be positive; noise and shift_log_gain nonnegative");
        }
        if !self.shift_offset.is_finite() {
            return bad("shift_offset must be finite");
        }
        let test = self.test_count();
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) || test == 0 || test >= self.samples_per_class {
            return bad("test_fraction must leave at least one train and one test sample per class");
        }
        Ok(())
    }

    /// Target samples per class reserved for evaluation.
    pub fn test_count(&self) -> usize {
        (self.samples_per_class as f64 * self.test_fraction).round() as usize
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        w.put("num_classes", self.num_classes)
            .put("samples_per_class", self.samples_per_class)
            .put("tokens", self.tokens)
            .put("channels", self.channels)
            .put("class_sep", self.class_sep)
            .put("noise", self.noise)
            .put("shift_offset", self.shift_offset)
            .put("shift_log_gain", self.shift_log_gain)
            .put("test_fraction", self.test_fraction)
            .put("seed", self.seed);
    }

    /// Reads the keys written by [`Self::write_kv`], each optionally
    /// prefixed, overriding the current values.
    pub fn update_from(&mut self, kv: &mut KvMap, prefix: &str) -> Result<()> {
        let k = |name: &str| format!("{prefix}{name}");
        kv.update(&k("num_classes"), &mut self.num_classes)?;
        kv.update(&k("samples_per_class"), &mut self.samples_per_class)?;
        kv.update(&k("tokens"), &mut self.tokens)?;
        kv.update(&k("channels"), &mut self.channels)?;
        kv.update(&k("class_sep"), &mut self.class_sep)?;
        kv.update(&k("noise"), &mut self.noise)?;
        kv.update(&k("shift_offset"), &mut self.shift_offset)?;
        kv.update(&k("shift_log_gain"), &mut self.shift_log_gain)?;
        kv.update(&k("test_fraction"), &mut self.test_fraction)?;
        kv.update(&k("seed"), &mut self.seed)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Source => "source",
            Self::Target => "target",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Self::Source),
            "target" => Ok(Self::Target),
            _ => Err(Error::Config(format!("unknown domain {s:?}"))),
        }
    }
}

/// Images of one domain, labeled or not.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub config: DatasetConfig,
    pub domain: Domain,
    pub images: Vec<ImageTensor>,
    pub labels: Option<Vec<usize>>,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Invalid(format!("{} set is unlabeled", self.domain)))
    }

    /// The same images with labels removed.
    pub fn unlabeled(mut self) -> Self {
        self.labels = None;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub source: ImageSet,
    pub target_train: ImageSet,
    pub target_test: ImageSet,
}

/// Per-channel style map applied to target images.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleShift {
    pub gains: Vec<f64>,
    pub offsets: Vec<f64>,
}

impl StyleShift {
    pub fn apply(&self, x: &mut [f64]) {
        let c = self.gains.len();
        for (i, v) in x.iter_mut().enumerate() {
            *v = *v * self.gains[i % c] + self.offsets[i % c];
        }
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const PROTOTYPE_STREAM: u64 = 1;
const SHIFT_STREAM: u64 = 2;
const SAMPLE_STREAM_BASE: u64 = 1 << 16;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn prototypes(config: &DatasetConfig) -> Vec<Vec<f64>> {
    let mut rng = stream(config.seed, PROTOTYPE_STREAM);
    let n = config.tokens * config.channels;
    (0..config.num_classes)
        .map(|_| (0..n).map(|_| normal(&mut rng) * config.class_sep).collect())
        .collect()
}

pub fn style_shift(config: &DatasetConfig) -> StyleShift {
    let mut rng = stream(config.seed, SHIFT_STREAM);
    let mut gains = Vec::with_capacity(config.channels);
    let mut offsets = Vec::with_capacity(config.channels);
    for _ in 0..config.channels {
        let u: f64 = rng.random_range(-1.0..=1.0);
        gains.push((config.shift_log_gain * u).exp());
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let mag: f64 = rng.random_range(0.5..=1.5);
        offsets.push(config.shift_offset * sign * mag);
    }
    StyleShift { gains, offsets }
}

/// Draws `per_class` images of every class from `domain`, class-interleaved
/// (`index = j·K + class`). Each `(domain, class, substream)` triple has its
/// own random stream, so draws with different substreams never overlap.
pub fn draw(config: &DatasetConfig, domain: Domain, per_class: usize, substream: u64) -> Result<ImageSet> {
    config.validate()?;
    if per_class == 0 {
        return Err(Error::Config("per_class must be positive".into()));
    }
    let protos = prototypes(config);
    let shift = style_shift(config);
    let k = config.num_classes;
    let d = match domain {
        Domain::Source => 0,
        Domain::Target => 1,
    };
    let mut per_class_draws: Vec<Vec<Vec<f64>>> = Vec::with_capacity(k);
    for (class, proto) in protos.iter().enumerate() {
        let id = SAMPLE_STREAM_BASE + ((substream * 2 + d) * k as u64 + class as u64);
        let mut rng = stream(config.seed, id);
        let draws = (0..per_class)
            .map(|_| {
                let mut x: Vec<f64> = proto.iter().map(|p| p + config.noise * normal(&mut rng)).collect();
                if domain == Domain::Target {
                    shift.apply(&mut x);
                }
                x
            })
            .collect();
        per_class_draws.push(draws);
    }
    let mut images = Vec::with_capacity(per_class * k);
    let mut labels = Vec::with_capacity(per_class * k);
    for j in 0..per_class {
        for (class, draws) in per_class_draws.iter().enumerate() {
            let t = Tensor::matrix(config.tokens, config.channels, draws[j].clone())?;
            images.push(ImageTensor::new(t, config.tokens, config.channels)?);
            labels.push(class);
        }
    }
    Ok(ImageSet { config: config.clone(), domain, images, labels: Some(labels) })
}

/// Source set, unlabeled target training set and labeled target test set.
/// The target split partitions one draw by per-class sample index.
pub fn generate(config: &DatasetConfig) -> Result<Generated> {
    config.validate()?;
    let source = draw(config, Domain::Source, config.samples_per_class, 0)?;
    let target = draw(config, Domain::Target, config.samples_per_class, 0)?;
    let train_count = (config.samples_per_class - config.test_count()) * config.num_classes;
    let labels = target.labels.expect("drawn with labels");
    let mut images = target.images;
    let test_images = images.split_off(train_count);
    let test_labels = labels[train_count..].to_vec();
    Ok(Generated {
        source,
        target_train: ImageSet { config: config.clone(), domain: Domain::Target, images, labels: None },
        target_test: ImageSet {
            config: config.clone(),
            domain: Domain::Target,
            images: test_images,
            labels: Some(test_labels),
        },
    })
}

pub fn encode(set: &ImageSet) -> Vec<u8> {
    let mut w = KvWriter::default();
    set.config.write_kv(&mut w);
    w.put("domain", set.domain).put("labeled", u8::from(set.labels.is_some())).put("count", set.len());
    let header = w.finish();
    let record = set.config.tokens * set.config.channels * 8 + if set.labels.is_some() { 2 } else { 0 };
    let mut out = Vec::with_capacity(12 + header.len() + set.len() * record);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for (i, img) in set.images.iter().enumerate() {
        for v in img.values().data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(labels) = &set.labels {
            out.extend_from_slice(&(labels[i] as u16).to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<ImageSet> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::parse(0, "missing dataset magic"));
    }
    let mut pos = MAGIC.len();
    let len_bytes = bytes
        .get(pos..pos + 4)
        .ok_or_else(|| Error::parse(bytes.len(), "truncated header length"))?;
    let header_len = u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
    pos += 4;
    let header_bytes = bytes
        .get(pos..pos + header_len)
        .ok_or_else(|| Error::parse(bytes.len(), "truncated header block"))?;
    let header = std::str::from_utf8(header_bytes)
        .map_err(|e| Error::parse(pos + e.valid_up_to(), "header is not UTF-8"))?;
    let mut kv = KvMap::parse(header, pos)?;
    let mut config = DatasetConfig::default();
    config.update_from(&mut kv, "")?;
    let domain: Domain = kv.require("domain")?;
    let labeled: u8 = kv.require("labeled")?;
    let count: usize = kv.require("count")?;
    kv.finish()?;
    config.validate().map_err(|e| Error::parse(pos, e.to_string()))?;
    pos += header_len;

    let n = config.tokens * config.channels;
    let mut images = Vec::with_capacity(count);
    let mut labels = (labeled != 0).then(|| Vec::with_capacity(count));
    for i in 0..count {
        let end = pos + n * 8;
        let chunk = bytes
            .get(pos..end)
            .ok_or_else(|| Error::parse(bytes.len(), format!("truncated record {i} of {count}")))?;
        let data: Vec<f64> = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::matrix(config.tokens, config.channels, data)?;
        images.push(ImageTensor::new(t, config.tokens, config.channels).map_err(|e| Error::parse(pos, e.to_string()))?);
        pos = end;
        if let Some(labels) = labels.as_mut() {
            let lb = bytes
                .get(pos..pos + 2)
                .ok_or_else(|| Error::parse(bytes.len(), format!("truncated label of record {i}")))?;
            let y = u16::from_le_bytes(lb.try_into().expect("2 bytes")) as usize;
            if y >= config.num_classes {
                return Err(Error::parse(pos, format!("label {y} outside {} classes", config.num_classes)));
            }
            labels.push(y);
            pos += 2;
        }
    }
    if pos != bytes.len() {
        return Err(Error::parse(pos, format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(ImageSet { config, domain, images, labels })
}

pub fn save(set: &ImageSet, path: &Path) -> Result<()> {
    let bytes = encode(set);
    write_atomic(path, |w| w.write_all(&bytes))
}

pub fn load(path: &Path) -> Result<ImageSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub const SOURCE_FILE: &str = "source.padset";
pub const TARGET_TRAIN_FILE: &str = "target_train.padset";
pub const TARGET_TEST_FILE: &str = "target_test.padset";

pub fn save_all(data: &Generated, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save(&data.source, &dir.join(SOURCE_FILE))?;
    save(&data.target_train, &dir.join(TARGET_TRAIN_FILE))?;
    save(&data.target_test, &dir.join(TARGET_TEST_FILE))
}

pub fn load_all(dir: &Path) -> Result<Generated> {
    let get = |name: &str| {
        let path = dir.join(name);
        if !path.exists() {
            return Err(Error::io(&path, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file missing")));
        }
        load(&path)
    };
    Ok(Generated { source: get(SOURCE_FILE)?, target_train: get(TARGET_TRAIN_FILE)?, target_test: get(TARGET_TEST_FILE)? })
}

#[cfg(test)]
mod tests;
