use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffkit::Tape;
use crate::promptgen::Prompt;

fn small() -> EncoderConfig {
    EncoderConfig {
        vision_layers: 2,
        text_layers: 2,
        vision_width: 8,
        text_width: 8,
        embed_dim: 8,
        tokens_per_image: 4,
        channels: 3,
        num_classes: 3,
        max_prompt_len: 8,
        seed: 11,
    }
}

fn random_image(rng: &mut ChaCha8Rng, c: &EncoderConfig) -> ImageTensor {
    let n = c.tokens_per_image * c.channels;
    let t = Tensor::matrix(c.tokens_per_image, c.channels, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect());
    ImageTensor::new(t.unwrap(), c.tokens_per_image, c.channels).unwrap()
}

fn random_prompt(rng: &mut ChaCha8Rng, len: usize, width: usize) -> Prompt {
    Prompt { tokens: (0..len).map(|_| Tensor::vector((0..width).map(|_| rng.random_range(-1.0..1.0)).collect())).collect() }
}

#[test]
fn init_is_seed_deterministic() {
    let a = init_frozen(&small()).unwrap();
    let b = init_frozen(&small()).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    let c = init_frozen(&EncoderConfig { seed: 12, ..small() }).unwrap();
    assert_ne!(a.checksum(), c.checksum());
    assert_ne!(a.vision.layers[0].wq, a.text.layers[0].wq);
}

#[test]
fn init_rejects_degenerate_config() {
    assert!(init_frozen(&EncoderConfig { vision_width: 0, ..small() }).is_err());
    assert!(init_frozen(&EncoderConfig { text_width: 1, ..small() }).is_err());
    assert!(init_frozen(&EncoderConfig { vision_layers: 0, ..small() }).is_err());
    assert!(init_frozen(&EncoderConfig { tokens_per_image: 1, ..small() }).is_err());
}

#[test]
fn large_weight_matrix_is_centered() {
    let c = EncoderConfig { vision_width: 100, ..small() };
    let w = init_frozen(&c).unwrap();
    let m = &w.vision.layers[0].w1; // 100 × 200
    assert!(m.numel() >= 10_000);
    let n = m.numel() as f64;
    let mean = m.data().iter().sum::<f64>() / n;
    let std = 1.0 / (c.vision_width as f64).sqrt();
    assert!(mean.abs() < 3.0 * std / n.sqrt(), "mean {mean}");
    assert!(w.named_tensors().iter().all(|(_, t)| t.is_finite()));
}

#[test]
fn vision_forward_examples() {
    let c = small();
    let w = init_frozen(&c).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_image(&mut rng, &c);
    let a = vision_forward(&x, &w).unwrap();
    let b = vision_forward(&x, &w).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.layer_feats.len(), c.vision_layers);
    assert!(a.embedding.is_finite() && a.embedding.norm() > 0.0);

    let bad = ImageTensor(Tensor::zeros(vec![c.tokens_per_image + 1, c.channels]));
    assert!(vision_forward(&bad, &w).is_err());
}

#[test]
fn single_layer_features_are_the_pre_projection_map() {
    let c = EncoderConfig { vision_layers: 1, ..small() };
    let w = init_frozen(&c).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_image(&mut rng, &c);
    let out = vision_forward(&x, &w).unwrap();
    assert_eq!(out.layer_feats.len(), 1);
    let f = &out.layer_feats[0];
    let mut pooled = vec![0.0; c.vision_width];
    for r in 0..f.rows() {
        pooled.iter_mut().zip(f.row(r)).for_each(|(a, b)| *a += b / f.rows() as f64);
    }
    let proj = &w.vision.out_proj;
    for j in 0..c.embed_dim {
        let e: f64 = (0..c.vision_width).map(|i| pooled[i] * proj.data()[i * c.embed_dim + j]).sum();
        assert!((e - out.embedding.data()[j]).abs() < 1e-12);
    }
}

#[test]
fn batched_encoding_matches_single_images() {
    let c = small();
    let w = init_frozen(&c).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let imgs: Vec<ImageTensor> = (0..70).map(|_| random_image(&mut rng, &c)).collect();
    let batched = encode_images(&imgs, &w).unwrap();
    for i in [0, 33, 69] {
        let single = vision_forward(&imgs[i], &w).unwrap();
        assert_eq!(single.embedding.data(), batched[i].embedding.data());
    }
}

#[test]
fn text_forward_examples() {
    let c = small();
    let w = init_frozen(&c).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = random_prompt(&mut rng, 5, c.text_width);
    assert_eq!(text_forward(&p, &w).unwrap(), text_forward(&p, &w).unwrap());

    let mut q = p.clone();
    *q.tokens.last_mut().unwrap() = Tensor::vector(w.class_tokens.row(2).to_vec());
    let mut r = p.clone();
    *r.tokens.last_mut().unwrap() = Tensor::vector(w.class_tokens.row(0).to_vec());
    let (eq, er) = (text_forward(&q, &w).unwrap(), text_forward(&r, &w).unwrap());
    assert!(eq.data().iter().zip(er.data()).any(|(a, b)| (a - b).abs() > 1e-6));

    let wide = random_prompt(&mut rng, 5, c.text_width + 1);
    assert!(text_forward(&wide, &w).is_err());
    let long = random_prompt(&mut rng, c.max_prompt_len + 1, c.text_width);
    assert!(text_forward(&long, &w).is_err());
}

#[test]
fn text_forward_gradient_matches_finite_differences() {
    let c = small();
    let w = init_frozen(&c).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = random_prompt(&mut rng, 5, c.text_width).to_matrix().unwrap();
    let sq_norm = |tokens: &Tensor| {
        let mut tape = Tape::new();
        let tv = TextVars::register(&mut tape, &w);
        let x = tape.param(tokens.clone());
        let e = text_forward_batch(&mut tape, &tv, x, 5).unwrap();
        let loss = tape.dot(e, e).unwrap();
        (tape, x, loss)
    };
    let (mut tape, x, loss) = sq_norm(&p);
    tape.backward(loss).unwrap();
    let analytic = tape.grad(x).unwrap().to_vec();
    let h = 1e-5;
    for j in 0..p.numel() {
        let mut plus = p.clone();
        plus.data_mut()[j] += h;
        let mut minus = p.clone();
        minus.data_mut()[j] -= h;
        let (tp, _, lp) = sq_norm(&plus);
        let (tm, _, lm) = sq_norm(&minus);
        let numeric = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * h);
        let denom = analytic[j].abs().max(numeric.abs()).max(1e-3);
        assert!((analytic[j] - numeric).abs() / denom < 1e-4, "entry {j}: {} vs {numeric}", analytic[j]);
    }
}

#[test]
fn export_import_round_trip() {
    let c = small();
    let w = init_frozen(&c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    crate::weights::save(dir.path(), "enc", &w.named_tensors(), Default::default()).unwrap();
    let (mut tensors, _) = crate::weights::load(dir.path(), "enc").unwrap();
    let back = FrozenWeights::from_named(&c, &mut tensors).unwrap();
    assert!(tensors.is_empty());
    assert_eq!(back.checksum(), w.checksum());

    let (mut tensors, _) = crate::weights::load(dir.path(), "enc").unwrap();
    assert!(FrozenWeights::from_named(&EncoderConfig { vision_width: 6, ..c }, &mut tensors).is_err());
}
