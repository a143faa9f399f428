use balgrad_core::datagen::{
    apply_perturbation, decode_dataset, encode_dataset, generate, read_dataset, write_dataset,
    Dataset, FeatureRecord, PerturbKind, PerturbSpec, SynthConfig,
};
use balgrad_core::Error;

fn synth(n: usize, d: usize, alpha: f64, seed: u64) -> SynthConfig {
    SynthConfig {
        n,
        classes: 10,
        d_v: d,
        d_l: d,
        alpha,
        sigma: 1.0,
        seed,
    }
}

/// Held-out accuracy of a nearest-class-mean probe on one modality.
fn centroid_probe(train: &Dataset, test: &Dataset, image: bool) -> f64 {
    let pick = |r: &FeatureRecord| if image { r.x_v.clone() } else { r.x_l.clone() };
    let d = pick(&train.records[0]).len();
    let c = train.classes as usize;
    let mut means = vec![vec![0.0; d]; c];
    let mut counts = vec![0.0; c];
    for r in &train.records {
        for (m, x) in means[r.y as usize].iter_mut().zip(pick(r)) {
            *m += x;
        }
        counts[r.y as usize] += 1.0;
    }
    for (m, n) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= n);
    }
    let hits = test
        .records
        .iter()
        .filter(|r| {
            let x = pick(r);
            let dist = |m: &Vec<f64>| m.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..c)
                .min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b])))
                .unwrap();
            best == r.y as usize
        })
        .count();
    hits as f64 / test.len() as f64
}

#[test]
fn image_probe_beats_text_probe_when_image_dominates() {
    for seed in 0..3 {
        let (train, test) = generate(&synth(2000, 8, 0.9, seed)).unwrap().split(0.2, seed).unwrap();
        let (v, l) = (centroid_probe(&train, &test, true), centroid_probe(&train, &test, false));
        assert!(100.0 * (v - l) > 10.0, "seed {seed}: image {v}, text {l}");
    }
}

#[test]
fn balanced_generator_gives_comparable_probes() {
    let (train, test) = generate(&synth(2000, 8, 0.5, 0)).unwrap().split(0.2, 0).unwrap();
    let (v, l) = (centroid_probe(&train, &test, true), centroid_probe(&train, &test, false));
    assert!((v - l).abs() < 0.1, "image {v}, text {l}");
}

#[test]
fn noise_levels_follow_alpha() {
    let c = synth(10, 2, 0.9, 0);
    assert!((c.sigma_v() - 0.6).abs() < 1e-12 && (c.sigma_l() - 1.4).abs() < 1e-12);
    let c = synth(10, 2, 0.5, 0);
    assert_eq!(c.sigma_v(), c.sigma_l());
}

#[test]
fn encoding_matches_hand_built_layout() {
    let ds = Dataset {
        classes: 2,
        d_v: 1,
        d_l: 2,
        records: vec![
            FeatureRecord { x_v: vec![1.5], x_l: vec![-0.0, 2.0], y: 1 },
            FeatureRecord { x_v: vec![f64::MIN_POSITIVE], x_l: vec![3.25, -7.0], y: 0 },
        ],
    };
    let mut expected = b"BMF1".to_vec();
    expected.extend(1u32.to_le_bytes());
    expected.extend(2u64.to_le_bytes());
    for v in [2u32, 1, 2] {
        expected.extend(v.to_le_bytes());
    }
    for r in &ds.records {
        expected.extend(r.y.to_le_bytes());
        for x in r.x_v.iter().chain(&r.x_l) {
            expected.extend(x.to_bits().to_le_bytes());
        }
    }
    assert_eq!(encode_dataset(&ds).unwrap(), expected);
    let back = decode_dataset(&expected).unwrap();
    assert_eq!(back, ds);
    assert!(back.records[0].x_l[0].is_sign_negative());
}

#[test]
fn file_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bmf");
    let ds = generate(&synth(200, 5, 0.7, 3)).unwrap();
    write_dataset(&ds, &path).unwrap();
    let back = read_dataset(&path).unwrap();
    for (a, b) in ds.records.iter().zip(&back.records) {
        assert_eq!(a.y, b.y);
        assert!(a.x_v.iter().chain(&a.x_l).zip(b.x_v.iter().chain(&b.x_l)).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(std::fs::read(&path).unwrap(), encode_dataset(&back).unwrap());
}

#[test]
fn corrupt_files_are_rejected_with_offsets() {
    let bytes = encode_dataset(&generate(&synth(20, 3, 0.5, 0)).unwrap()).unwrap();
    let offset_of = |b: &[u8]| match decode_dataset(b) {
        Err(Error::Format { offset, .. }) => offset,
        other => panic!("expected format error, got {other:?}"),
    };
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert_eq!(offset_of(&bad), 0);
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert_eq!(offset_of(&bad), 4);
    assert_eq!(offset_of(&bytes[..bytes.len() - 3]), (bytes.len() - 3) as u64);
    assert_eq!(offset_of(&bytes[..10]), 8);
    let mut bad = bytes.clone();
    bad.push(0);
    assert_eq!(offset_of(&bad), bytes.len() as u64);
    let mut bad = bytes.clone();
    bad[28] = 200;
    assert_eq!(offset_of(&bad), 28);
}

#[test]
fn empty_dataset_is_not_written() {
    let ds = Dataset { classes: 3, d_v: 1, d_l: 1, records: vec![] };
    assert!(encode_dataset(&ds).is_err());
}

#[test]
fn generation_and_perturbation_are_deterministic() {
    let a = encode_dataset(&generate(&synth(300, 6, 0.9, 42)).unwrap()).unwrap();
    let b = encode_dataset(&generate(&synth(300, 6, 0.9, 42)).unwrap()).unwrap();
    assert_eq!(a, b);
    let c = encode_dataset(&generate(&synth(300, 6, 0.9, 43)).unwrap()).unwrap();
    assert_ne!(a, c);

    let ds = decode_dataset(&a).unwrap();
    for kind in [
        PerturbKind::MissingImage,
        PerturbKind::MissingText,
        PerturbKind::NoisyImage,
        PerturbKind::NoisyText,
    ] {
        let spec = PerturbSpec::new(kind, 0.5, 0.3, 7);
        let x = encode_dataset(&apply_perturbation(&ds, &spec).unwrap()).unwrap();
        let y = encode_dataset(&apply_perturbation(&ds, &spec).unwrap()).unwrap();
        assert_eq!(x, y, "{kind:?}");
    }
}

#[test]
fn perturbation_contracts() {
    let ds = generate(&synth(100, 20, 0.5, 1)).unwrap();
    assert_eq!(apply_perturbation(&ds, &PerturbSpec::none()).unwrap(), ds);

    let all_missing = apply_perturbation(&ds, &PerturbSpec::missing_image(1.0, 0)).unwrap();
    for (a, b) in all_missing.records.iter().zip(&ds.records) {
        assert!(a.x_v.iter().all(|x| *x == 0.0));
        assert_eq!((a.y, &a.x_l), (b.y, &b.x_l));
    }

    let noisy = apply_perturbation(&ds, &PerturbSpec::new(PerturbKind::NoisyText, 1.0, 0.15, 2)).unwrap();
    for (a, b) in noisy.records.iter().zip(&ds.records) {
        let zeroed = a.x_l.iter().zip(&b.x_l).filter(|(x, y)| **x == 0.0 && **y != 0.0).count();
        assert_eq!(zeroed, 3); // round(0.15 * 20)
    }

    let half = apply_perturbation(&ds, &PerturbSpec::missing_text(0.5, 3)).unwrap();
    let hit = half.records.iter().filter(|r| r.x_l.iter().all(|x| *x == 0.0)).count();
    assert_eq!(hit, 50);
    // Affected sets grow with the ratio.
    let more = apply_perturbation(&ds, &PerturbSpec::missing_text(0.8, 3)).unwrap();
    for (h, m) in half.records.iter().zip(&more.records) {
        if h.x_l.iter().all(|x| *x == 0.0) {
            assert!(m.x_l.iter().all(|x| *x == 0.0));
        }
    }
    assert!(apply_perturbation(&ds, &PerturbSpec::missing_text(1.5, 3)).is_err());
}
