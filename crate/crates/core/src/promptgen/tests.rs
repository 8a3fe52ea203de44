use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::encoders::{init_frozen, text_forward, EncoderConfig};

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn permute_rows(t: &Tensor, order: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = order.iter().map(|&r| t.row(r).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

fn small_weights() -> FrozenWeights {
    init_frozen(&EncoderConfig {
        vision_layers: 2,
        text_layers: 1,
        vision_width: 4,
        text_width: 6,
        embed_dim: 5,
        tokens_per_image: 4,
        channels: 3,
        num_classes: 3,
        max_prompt_len: 8,
        seed: 2,
    })
    .unwrap()
}

#[test]
fn style_examples() {
    let feats = vec![Tensor::filled(vec![3, 4], 2.5); 2];
    let s = extract_style(&feats).unwrap().0;
    assert_eq!(s.numel(), 2 * 2 * 4);
    for layer in 0..2 {
        let base = layer * 8;
        assert!(s.data()[base..base + 4].iter().all(|&m| (m - 2.5).abs() < 1e-12));
        assert!(s.data()[base + 4..base + 8].iter().all(|&sd| (0.0..0.01).contains(&sd)));
    }
    let s = extract_style(&[Tensor::matrix(2, 1, vec![0.0, 2.0]).unwrap()]).unwrap().0;
    assert!((s.data()[0] - 1.0).abs() < 1e-12);
    assert!((s.data()[1] - 1.0).abs() < 1e-5);
    assert!(extract_style(&[]).is_err());
    assert!(extract_style(&[Tensor::zeros(vec![2, 2]), Tensor::zeros(vec![2, 3])]).is_err());
}

#[test]
fn content_examples() {
    let c = extract_content(&[Tensor::matrix(2, 2, vec![1.0, 1.0, 3.0, 3.0]).unwrap()]).unwrap().0;
    assert_eq!(c.data(), &[2.0, 2.0]);
    let c = extract_content(&vec![Tensor::zeros(vec![5, 3]); 3]).unwrap().0;
    assert_eq!(c.data(), &[0.0; 9]);
    assert!(extract_content(&[]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn statistics_ignore_token_order(seed in any::<u64>(), tokens in 2usize..8, width in 1usize..5, swaps in prop::collection::vec((0usize..8, 0usize..8), 1..6)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats: Vec<Tensor> = (0..2).map(|_| random_matrix(&mut rng, tokens, width)).collect();
        let mut order: Vec<usize> = (0..tokens).collect();
        for (a, b) in swaps {
            order.swap(a % tokens, b % tokens);
        }
        let permuted: Vec<Tensor> = feats.iter().map(|f| permute_rows(f, &order)).collect();
        let (s0, s1) = (extract_style(&feats).unwrap().0, extract_style(&permuted).unwrap().0);
        let (c0, c1) = (extract_content(&feats).unwrap().0, extract_content(&permuted).unwrap().0);
        for (a, b) in s0.data().iter().zip(s1.data()).chain(c0.data().iter().zip(c1.data())) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert!(s0.data().chunks(width).skip(1).step_by(2).flatten().all(|&sd| sd >= 0.0));
    }

    #[test]
    fn prompts_have_fixed_layout(l in 1usize..6, class in 0usize..3) {
        let w = small_weights();
        let mut rng = ChaCha8Rng::seed_from_u64(l as u64);
        let v = ContextTokens((0..l).map(|_| Tensor::vector((0..6).map(|_| rng.random_range(-1.0..1.0)).collect())).collect());
        let dt = DomainToken(Tensor::filled(vec![6], 1.0));
        let ds = DomainToken(Tensor::filled(vec![6], -1.0));
        let p = assemble_prompt(&dt, &ds, &v, class, &w).unwrap();
        prop_assert_eq!(p.len(), l + 3);
        prop_assert_eq!(&p.tokens[0], &dt.0);
        prop_assert_eq!(&p.tokens[1], &ds.0);
        prop_assert_eq!(&p.tokens[2..l + 2], &v.0[..]);
        prop_assert_eq!(p.tokens[l + 2].data(), w.class_tokens.row(class));
    }
}

#[test]
fn domain_token_is_a_function_of_the_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let proj = StyleProjector::new(&mut rng, 4, 6, 3);
    let s = StyleVector(Tensor::vector(vec![0.3, -1.0, 2.0, 0.5]));
    let single = batch_domain_token(std::slice::from_ref(&s), &proj).unwrap();
    let many = batch_domain_token(&vec![s.clone(); 7], &proj).unwrap();
    for (a, b) in single.0.data().iter().zip(many.0.data()) {
        assert!((a - b).abs() < 1e-12);
    }

    let a = [vec![1.0, 0.0, 2.0, 3.0], vec![-1.0, 2.0, 0.0, 1.0]];
    let b = [vec![0.5, 0.5, 0.5, 2.5], vec![-0.5, 1.5, 1.5, 1.5]];
    let wrap = |v: &[Vec<f64>]| v.iter().map(|x| StyleVector(Tensor::vector(x.clone()))).collect::<Vec<_>>();
    let ta = batch_domain_token(&wrap(&a), &proj).unwrap();
    let tb = batch_domain_token(&wrap(&b), &proj).unwrap();
    for (x, y) in ta.0.data().iter().zip(tb.0.data()) {
        assert!((x - y).abs() < 1e-12);
    }
    assert!(batch_domain_token(&[], &proj).is_err());
}

#[test]
fn domain_token_gradient_reaches_projector() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let proj = StyleProjector::new(&mut rng, 4, 6, 3);
    let mut tape = Tape::new();
    let vars = proj.register(&mut tape, true);
    let x = tape.constant(random_matrix(&mut rng, 1, 4));
    let y = vars.forward(&mut tape, x).unwrap();
    let loss = tape.dot(y, y).unwrap();
    tape.backward(loss).unwrap();
    for p in vars.params() {
        assert!(tape.grad(p).unwrap().iter().any(|g| g.abs() > 1e-9));
    }
}

#[test]
fn context_token_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let content = ContentVector(Tensor::vector((0..8).map(|_| rng.random_range(-1.0..1.0)).collect()));

    let one = ContentProjector::new(&mut rng, 8, 12, 1, 6);
    let v = content_tokens(&content, &one).unwrap();
    assert_eq!(v.0.len(), 1);
    let single = EncoderDecoder {
        enc_w: one.enc_w.clone(),
        enc_b: one.enc_b.clone(),
        dec_w: one.heads_w.clone(),
        dec_b: one.heads_b.clone(),
    };
    assert_eq!(v.0[0], single.apply(&content.0).unwrap());

    let four = ContentProjector::new(&mut rng, 8, 12, 4, 6);
    let v = content_tokens(&content, &four).unwrap();
    assert_eq!(v.0.len(), 4);
    assert!(v.0.iter().all(|t| t.numel() == 6));
    assert_ne!(v.0[0], v.0[1]);
    assert_eq!(v, content_tokens(&content, &four).unwrap());
    assert!(content_tokens(&ContentVector(Tensor::zeros(vec![7])), &four).is_err());
}

#[test]
fn batched_assembly_matches_single_prompts() {
    let w = small_weights();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let layout = PromptLayout { domain: DomainSlots::Learned, image_context: true, context_len: 2 };
    let domain = random_matrix(&mut rng, 2, 6);
    let context = random_matrix(&mut rng, 3 * 2, 6);
    let mut tape = Tape::new();
    let d = tape.constant(domain.clone());
    let c = tape.constant(context.clone());
    let cls = tape.constant(w.class_tokens.clone());
    let rows = assemble_batch(&mut tape, &layout, Some(d), c, cls, 3).unwrap();
    let rows = tape.value(rows);
    assert_eq!(rows.rows(), 3 * 3 * layout.seq_len());

    let dt = DomainToken(Tensor::vector(domain.row(0).to_vec()));
    let ds = DomainToken(Tensor::vector(domain.row(1).to_vec()));
    for i in 0..3 {
        let v = ContextTokens((0..2).map(|j| Tensor::vector(context.row(i * 2 + j).to_vec())).collect());
        for k in 0..3 {
            let p = assemble_prompt(&dt, &ds, &v, k, &w).unwrap().to_matrix().unwrap();
            let start = (i * 3 + k) * layout.seq_len();
            for r in 0..layout.seq_len() {
                assert_eq!(rows.row(start + r), p.row(r));
            }
        }
    }

    let shared = PromptLayout { domain: DomainSlots::None, image_context: false, context_len: 2 };
    let c = tape.constant(random_matrix(&mut rng, 2, 6));
    let rows = assemble_batch(&mut tape, &shared, None, c, cls, 4).unwrap();
    assert_eq!(tape.value(rows).rows(), 4 * 3 * 3);
    let bad = tape.constant(random_matrix(&mut rng, 5, 6));
    assert!(assemble_batch(&mut tape, &layout, Some(d), bad, cls, 3).is_err());
    assert!(assemble_batch(&mut tape, &layout, None, c, cls, 1).is_err());
}

#[test]
fn unknown_class_is_rejected() {
    let w = small_weights();
    let t = DomainToken(Tensor::zeros(vec![6]));
    let v = ContextTokens(vec![Tensor::zeros(vec![6])]);
    assert!(assemble_prompt(&t, &t, &v, 3, &w).is_err());
    let narrow = ContextTokens(vec![Tensor::zeros(vec![5])]);
    assert!(assemble_prompt(&t, &t, &narrow, 0, &w).is_err());
}

#[test]
fn domain_slot_order_matters() {
    let w = small_weights();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let tok = |rng: &mut ChaCha8Rng| Tensor::vector((0..6).map(|_| rng.random_range(-1.0..1.0)).collect());
    let dt = DomainToken(tok(&mut rng));
    let ds = DomainToken(tok(&mut rng));
    let v = ContextTokens(vec![tok(&mut rng), tok(&mut rng)]);
    let a = text_forward(&assemble_prompt(&dt, &ds, &v, 1, &w).unwrap(), &w).unwrap();
    let b = text_forward(&assemble_prompt(&ds, &dt, &v, 1, &w).unwrap(), &w).unwrap();
    assert!(a.data().iter().zip(b.data()).any(|(x, y)| (x - y).abs() > 1e-6));
}

#[test]
fn style_map_converges_to_a_fixed_target() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let net = StyleMapNet::new(&mut rng, 8, 12, 6);
    let untrained = map_style(&StyleVector(Tensor::vector(vec![0.5; 8])), &net).unwrap();
    assert!(untrained.0.is_finite());
    assert_eq!(untrained, map_style(&StyleVector(Tensor::vector(vec![0.5; 8])), &net).unwrap());

    let styles: Vec<Tensor> = (0..16).map(|_| Tensor::vector((0..8).map(|_| rng.random_range(0.0..2.0)).collect())).collect();
    let mean = StyleVector(mean_vector(&styles).unwrap());
    let target = DomainToken(Tensor::vector((0..6).map(|_| rng.random_range(-1.0..1.0)).collect()));

    let mut net = net;
    let x = mean.0.reshaped(vec![1, 8]).unwrap();
    let goal = target.0.reshaped(vec![1, 6]).unwrap();
    for _ in 0..3000 {
        let mut tape = Tape::new();
        let vars = net.register(&mut tape, true);
        let xi = tape.constant(x.clone());
        let y = vars.forward(&mut tape, xi).unwrap();
        let g = tape.constant(goal.clone());
        let diff = tape.sub(y, g).unwrap();
        let loss = tape.dot(diff, diff).unwrap();
        tape.backward(loss).unwrap();
        let grads: Vec<Vec<f64>> = vars.params().iter().map(|&p| tape.grad(p).unwrap().to_vec()).collect();
        let params = [&mut net.enc_w, &mut net.enc_b, &mut net.dec_w, &mut net.dec_b];
        for (p, g) in params.into_iter().zip(grads) {
            p.data_mut().iter_mut().zip(g).for_each(|(w, g)| *w -= 0.05 * g);
        }
    }
    let pred = map_style(&mean, &net).unwrap();
    let err: f64 = pred.0.data().iter().zip(target.0.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!(err < 0.05 * target.0.norm(), "residual {err}");
}
