use super::*;

/// Multinomial logistic regression on flattened raw patches, trained by
/// full-batch gradient descent. Independent of the encoders entirely.
struct LogReg {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl LogReg {
    fn fit(set: &ImageSet, epochs: usize, lr: f64) -> Self {
        let k = set.config.num_classes;
        let d = set.config.tokens * set.config.channels;
        let labels = set.labels().unwrap();
        let mut w = vec![vec![0.0; d]; k];
        let mut b = vec![0.0; k];
        let n = set.len() as f64;
        for _ in 0..epochs {
            let mut gw = vec![vec![0.0; d]; k];
            let mut gb = vec![0.0; k];
            for (img, &y) in set.images.iter().zip(labels) {
                let x = img.values().data();
                let p = softmax(&logits(&w, &b, x));
                for c in 0..k {
                    let e = p[c] - f64::from(u8::from(c == y));
                    gb[c] += e / n;
                    for j in 0..d {
                        gw[c][j] += e * x[j] / n;
                    }
                }
            }
            for c in 0..k {
                b[c] -= lr * gb[c];
                for j in 0..d {
                    w[c][j] -= lr * (gw[c][j] + 1e-3 * w[c][j]);
                }
            }
        }
        Self { w, b }
    }

    fn accuracy(&self, set: &ImageSet) -> f64 {
        let labels = set.labels().unwrap();
        let hits = set
            .images
            .iter()
            .zip(labels)
            .filter(|(img, &y)| {
                let l = logits(&self.w, &self.b, img.values().data());
                crate::losses::argmax(&l) == y
            })
            .count();
        100.0 * hits as f64 / set.len() as f64
    }
}

fn logits(w: &[Vec<f64>], b: &[f64], x: &[f64]) -> Vec<f64> {
    w.iter().zip(b).map(|(wc, bc)| bc + wc.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).collect()
}

fn softmax(l: &[f64]) -> Vec<f64> {
    let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// (held-out source accuracy, target test accuracy) of a source-trained oracle.
fn oracle_gap(config: &DatasetConfig) -> (f64, f64) {
    let data = generate(config).unwrap();
    let model = LogReg::fit(&data.source, 150, 0.2);
    let held_out = draw(config, Domain::Source, config.test_count(), 1).unwrap();
    (model.accuracy(&held_out), model.accuracy(&data.target_test))
}

#[test]
fn no_shift_means_no_domain_gap() {
    let config = DatasetConfig { shift_offset: 0.0, shift_log_gain: 0.0, ..Default::default() };
    let (src, tgt) = oracle_gap(&config);
    assert!((src - tgt).abs() <= 3.0, "source {src} target {tgt}");
}

#[test]
fn large_offsets_open_a_large_gap() {
    let config = DatasetConfig { noise: 1.0, shift_offset: 6.0, ..DatasetConfig::default() };
    assert!(config.shift_offset >= 3.0 * config.class_sep);
    let (src, tgt) = oracle_gap(&config);
    assert!(src - tgt >= 15.0, "source {src} target {tgt}");
}

#[test]
fn generation_is_deterministic_and_seed_dependent() {
    let config = DatasetConfig { samples_per_class: 4, ..Default::default() };
    let a = generate(&config).unwrap();
    let b = generate(&config).unwrap();
    assert_eq!(encode(&a.source), encode(&b.source));
    assert_eq!(encode(&a.target_test), encode(&b.target_test));
    let c = generate(&DatasetConfig { seed: 1, ..config }).unwrap();
    assert_ne!(encode(&a.source), encode(&c.source));
}

#[test]
fn target_split_partitions_the_draw() {
    let config = DatasetConfig { samples_per_class: 10, test_fraction: 0.3, ..Default::default() };
    let data = generate(&config).unwrap();
    let full = draw(&config, Domain::Target, 10, 0).unwrap();
    assert_eq!(data.target_train.len(), 7 * 8);
    assert_eq!(data.target_test.len(), 3 * 8);
    assert!(data.target_train.labels.is_none());
    let joined: Vec<&ImageTensor> = data.target_train.images.iter().chain(&data.target_test.images).collect();
    assert_eq!(joined, full.images.iter().collect::<Vec<_>>());
    for a in &data.target_train.images {
        assert!(!data.target_test.images.contains(a));
    }
}

#[test]
fn domains_share_prototypes_up_to_the_style_map() {
    let config = DatasetConfig { samples_per_class: 400, noise: 0.5, ..Default::default() };
    let src = draw(&config, Domain::Source, 400, 0).unwrap();
    let tgt = draw(&config, Domain::Target, 400, 0).unwrap();
    let shift = style_shift(&config);
    let n = config.tokens * config.channels;
    let k = config.num_classes;
    let class_mean = |set: &ImageSet, class: usize| {
        let mut m = vec![0.0; n];
        let labels = set.labels().unwrap();
        let mut count = 0.0;
        for (img, &y) in set.images.iter().zip(labels) {
            if y == class {
                m.iter_mut().zip(img.values().data()).for_each(|(a, b)| *a += b);
                count += 1.0;
            }
        }
        m.iter_mut().for_each(|a| *a /= count);
        m
    };
    for class in 0..k {
        let mut mapped = class_mean(&src, class);
        shift.apply(&mut mapped);
        let target = class_mean(&tgt, class);
        // both means carry noise of std noise·gain/20 per entry, so their
        // difference has sqrt(2) times that
        let tol = 5.0 * std::f64::consts::SQRT_2 * config.noise * shift.gains.iter().copied().fold(0.0, f64::max) / 20.0;
        for (a, b) in mapped.iter().zip(&target) {
            assert!((a - b).abs() < tol, "class {class}: {a} vs {b}");
        }
    }
}

#[test]
fn file_round_trip_is_exact() {
    let config = DatasetConfig { samples_per_class: 4, ..Default::default() };
    let data = generate(&config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_all(&data, dir.path()).unwrap();
    let back = load_all(dir.path()).unwrap();
    assert_eq!(back, data);
    for set in [&data.source, &data.target_train, &data.target_test] {
        let bytes = encode(set);
        assert_eq!(encode(&decode(&bytes).unwrap()), bytes);
    }
    for i in [0, 3, 11, 17, 30] {
        let a: Vec<u64> = data.source.images[i].values().data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.source.images[i].values().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(data.source.labels().unwrap()[i], back.source.labels().unwrap()[i]);
    }
}

#[test]
fn malformed_files_are_parse_errors() {
    let config = DatasetConfig { samples_per_class: 2, ..Default::default() };
    let data = generate(&config).unwrap();
    let bytes = encode(&data.source);
    for cut in [0, 5, 10, 40, bytes.len() - 1] {
        assert!(matches!(decode(&bytes[..cut]), Err(Error::Parse { .. })), "cut {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode(&bad), Err(Error::Parse { offset: 0, .. })));
    let mut extra = bytes;
    extra.push(0);
    assert!(decode(&extra).is_err());
}

#[test]
fn degenerate_configs_are_rejected() {
    assert!(generate(&DatasetConfig { samples_per_class: 0, ..Default::default() }).is_err());
    assert!(generate(&DatasetConfig { num_classes: 1, ..Default::default() }).is_err());
    assert!(generate(&DatasetConfig { samples_per_class: 1, ..Default::default() }).is_err());
}
