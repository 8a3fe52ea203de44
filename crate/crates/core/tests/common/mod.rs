//! Helpers shared by the integration tests.

#![allow(dead_code)]

use std::path::PathBuf;

use promptalign::diffkit::Tensor;
use promptalign::encoders::{init_frozen, EncoderConfig, FrozenWeights};
use promptalign::synthdata::{generate, DatasetConfig};
use promptalign::trainer::Banks;

/// Central difference of `f` at `x` along coordinate `i` with step `h`.
pub fn central_difference(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * h)
}

/// Relative error with a tiny floor so exact zeros compare as equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// `d_v = d_t = d_e = 8`, two vision layers, four tokens, three classes.
pub fn toy_encoder() -> EncoderConfig {
    EncoderConfig {
        vision_layers: 2,
        text_layers: 1,
        vision_width: 8,
        text_width: 8,
        embed_dim: 8,
        tokens_per_image: 4,
        channels: 3,
        num_classes: 3,
        max_prompt_len: 8,
        seed: 7,
    }
}

pub fn toy_data() -> DatasetConfig {
    DatasetConfig { num_classes: 3, samples_per_class: 6, tokens: 4, channels: 3, seed: 7, ..DatasetConfig::default() }
}

pub fn toy_setup() -> (FrozenWeights, Banks) {
    let frozen = init_frozen(&toy_encoder()).unwrap();
    let banks = Banks::build(&generate(&toy_data()).unwrap(), &frozen).unwrap();
    (frozen, banks)
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_promptalign"))
}
