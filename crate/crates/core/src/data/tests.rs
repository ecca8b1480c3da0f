use super::*;
use crate::signal::dft;
use crate::vmd::select_centers;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_fleet(snr_db: f64, seed: u64) -> Dataset {
    gen_fleet(&GenConfig::new(4, 12, 128, snr_db, seed)).unwrap()
}

#[test]
fn generation_is_deterministic() {
    let a = small_fleet(20.0, 42);
    let b = small_fleet(20.0, 42);
    assert_eq!(a, b);
    let c = small_fleet(20.0, 43);
    assert_ne!(a, c);
}

#[test]
fn zero_impairments_and_infinite_snr_yield_clean_preamble() {
    let clean = clean_preamble(128);
    let profile = SynthDeviceProfile {
        gain_imbalance_db: 0.0,
        phase_imbalance: 0.0,
        dc_offset: (0.0, 0.0),
        carrier_offset: 0.0,
        phase_noise_std: 0.0,
        nonlinearity_coeff: 0.0,
        seed: 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let out = synthesize_frame(&clean, &profile, f64::INFINITY, &mut rng);
    assert_eq!(out, clean);

    // all-zero caps rejected at the fleet level
    let mut config = GenConfig::new(4, 12, 128, 20.0, 1);
    config.caps = ImpairmentCaps {
        gain_imbalance_db: 0.0,
        phase_imbalance: 0.0,
        dc_offset: 0.0,
        carrier_offset: 0.0,
        phase_noise_std: 0.0,
        nonlinearity_coeff: 0.0,
    };
    assert!(matches!(gen_fleet(&config), Err(DataError::DegenerateCaps)));
}

#[test]
fn generator_snr_is_calibrated() {
    // regenerate the same frames noiselessly and measure the actual SNR
    let snr_db = 15.0;
    let config = GenConfig::new(2, 64, 128, snr_db, 7);
    let noisy = gen_fleet(&config).unwrap();
    let mut clean_config = config.clone();
    clean_config.snr_db = f64::INFINITY;
    let clean = gen_fleet(&clean_config).unwrap();

    let mut p_sig = 0.0;
    let mut p_noise = 0.0;
    for (n, c) in noisy.frames.iter().zip(&clean.frames) {
        for (a, b) in n.iter().zip(c) {
            p_sig += b.norm_sqr();
            p_noise += (a - b).norm_sqr();
        }
    }
    let measured = 10.0 * (p_sig / p_noise).log10();
    assert!(
        (measured - snr_db).abs() <= 0.5,
        "measured {measured} dB vs requested {snr_db} dB"
    );
}

#[test]
fn impairments_separate_devices_beyond_noise() {
    // device-averaged spectra should differ more across an impaired
    // fleet than across identical devices at the same SNR
    let mean_pairwise_distance = |ds: &Dataset| {
        let n_classes = ds.n_classes();
        let len = ds.frame_len;
        let mut means = vec![vec![0.0f64; len]; n_classes];
        let mut counts = vec![0usize; n_classes];
        for (i, &label) in ds.labels.iter().enumerate() {
            let spec = dft(&ds.iq_frame(i).unwrap());
            for (m, b) in means[label as usize].iter_mut().zip(spec.bins()) {
                *m += b.norm_sqr();
            }
            counts[label as usize] += 1;
        }
        for (m, &c) in means.iter_mut().zip(&counts) {
            for v in m.iter_mut() {
                *v /= c as f64;
            }
        }
        let mut total = 0.0;
        let mut pairs = 0;
        for a in 0..n_classes {
            for b in (a + 1)..n_classes {
                let d: f64 = means[a]
                    .iter()
                    .zip(&means[b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                total += d;
                pairs += 1;
            }
        }
        total / pairs as f64
    };

    let impaired = gen_fleet(&GenConfig::new(10, 20, 128, 20.0, 42)).unwrap();

    // baseline: same devices, impairments suppressed to (almost) nothing
    let mut base_config = GenConfig::new(10, 20, 128, 20.0, 42);
    base_config.caps = ImpairmentCaps {
        gain_imbalance_db: 0.0,
        phase_imbalance: 0.0,
        dc_offset: 0.0,
        carrier_offset: 0.0,
        phase_noise_std: 1e-12,
        nonlinearity_coeff: 0.0,
    };
    let baseline = gen_fleet(&base_config).unwrap();

    let d_imp = mean_pairwise_distance(&impaired);
    let d_base = mean_pairwise_distance(&baseline);
    assert!(
        d_imp > d_base,
        "impaired {d_imp} should exceed AWGN-only baseline {d_base}"
    );
}

#[test]
fn stratified_split_exact_counts() {
    // 5 classes × 100 samples
    let config = GenConfig::new(5, 100, 64, 20.0, 4);
    let ds = gen_fleet(&config).unwrap();
    let (train, val, test) = stratified_split(&ds, &SplitSpec::default()).unwrap();
    assert_eq!(train.len(), 400);
    assert_eq!(val.len(), 50);
    assert_eq!(test.len(), 50);
    for class in 0..5u16 {
        assert_eq!(train.labels.iter().filter(|&&l| l == class).count(), 80);
        assert_eq!(val.labels.iter().filter(|&&l| l == class).count(), 10);
        assert_eq!(test.labels.iter().filter(|&&l| l == class).count(), 10);
    }
    // determinism
    let again = stratified_split(&ds, &SplitSpec::default()).unwrap();
    assert_eq!(again.0, train);

    // splits are disjoint and cover everything
    assert_eq!(train.len() + val.len() + test.len(), ds.len());
}

#[test]
fn apportion_follows_largest_remainder() {
    // 83 × (0.8, 0.1, 0.1): quotas (66.4, 8.3, 8.3) → floors (66, 8, 8)
    // and the leftover seat goes to the largest remainder (train)
    assert_eq!(apportion(83, (0.8, 0.1, 0.1)), [67, 8, 8]);
    assert_eq!(apportion(100, (0.8, 0.1, 0.1)), [80, 10, 10]);
    assert_eq!(apportion(19, (0.8, 0.1, 0.1)), [15, 2, 2]);
    // every part within one sample of exact, for a range of sizes
    for n in 10..400 {
        let counts = apportion(n, (0.8, 0.1, 0.1));
        assert_eq!(counts.iter().sum::<usize>(), n);
        for (i, r) in [0.8, 0.1, 0.1].iter().enumerate() {
            assert!(
                (counts[i] as f64 - r * n as f64).abs() < 1.0,
                "n={n} part {i}: {} vs {}",
                counts[i],
                r * n as f64
            );
        }
    }
}

#[test]
fn split_rejects_small_classes_and_bad_ratios() {
    let ds = gen_fleet(&GenConfig::new(3, 9, 64, 20.0, 5)).unwrap();
    assert!(matches!(
        stratified_split(&ds, &SplitSpec::default()),
        Err(DataError::ClassTooSmall { .. })
    ));
    let ds = small_fleet(20.0, 5);
    let spec = SplitSpec {
        ratios: (0.5, 0.2, 0.2),
        ..Default::default()
    };
    assert!(matches!(
        stratified_split(&ds, &spec),
        Err(DataError::BadRatios(_))
    ));
}

#[test]
fn legal_illegal_partition_examples() {
    let ds = gen_fleet(&GenConfig::new(10, 10, 64, 20.0, 6)).unwrap();
    let split = legal_illegal_partition(&ds, 2, 42).unwrap();
    assert_eq!(split.legal_classes.len(), 8);
    assert_eq!(split.illegal_classes.len(), 2);
    assert_eq!(split.legal.n_classes(), 8);
    assert!(split.legal.labels.iter().all(|&l| l < 8));
    assert_eq!(split.legal.len(), 80);
    assert_eq!(split.illegal.len(), 20);
    // mapping is consistent: names survive the re-index
    for (new, &orig) in split.legal_classes.iter().enumerate() {
        assert_eq!(split.legal.class_names[new], ds.class_names[orig]);
    }
    // determinism
    let again = legal_illegal_partition(&ds, 2, 42).unwrap();
    assert_eq!(again.illegal_classes, split.illegal_classes);

    // n_illegal = 0: everything legal
    let all_legal = legal_illegal_partition(&ds, 0, 1).unwrap();
    assert!(all_legal.illegal.is_empty());
    assert_eq!(all_legal.legal.len(), ds.len());

    assert!(matches!(
        legal_illegal_partition(&ds, 10, 1),
        Err(DataError::TooManyIllegal { .. })
    ));
}

#[test]
fn class_weight_examples() {
    assert_eq!(class_weights(&[0, 0, 1, 1], 2).unwrap(), vec![1.0, 1.0]);
    let w = class_weights(&[vec![0u16; 10], vec![1u16; 30]].concat(), 2).unwrap();
    assert!((w[0] - 2.0).abs() < 1e-15);
    assert!((w[1] - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(class_weights(&[0, 0, 0], 1).unwrap(), vec![1.0]);
    assert!(matches!(
        class_weights(&[0, 0], 2),
        Err(DataError::MissingClass(1))
    ));
}

#[test]
fn vmd_preprocess_channel_layout() {
    let ds = gen_fleet(&GenConfig::new(2, 10, 128, 20.0, 8)).unwrap();
    let centers = select_centers(3, 12.5, 128).unwrap();
    let decomposed = vmd_preprocess(&ds, &centers).unwrap();
    assert_eq!(decomposed.layout, Layout::Vmd { mode_count: 3 });
    assert_eq!(decomposed.layout.channels(), 6);
    assert_eq!(decomposed.labels, ds.labels);
    assert_eq!(decomposed.len(), ds.len());

    // summing mode channels reconstructs the original frame
    for (orig, packed) in ds.frames.iter().zip(&decomposed.frames) {
        for t in 0..128 {
            let total: Complex64 = (0..3).map(|m| packed[m * 128 + t]).sum();
            assert!((total - orig[t]).norm() <= 1e-12 * orig[t].norm().max(1.0));
        }
    }

    // model input shape: (b, T, 2k)
    let x = decomposed.to_model_input(&[0, 1]);
    assert_eq!(x.shape(), &[2, 128, 6]);

    // vmd input cannot be decomposed again
    assert!(matches!(
        vmd_preprocess(&decomposed, &centers),
        Err(DataError::WrongLayout(_))
    ));
}

#[test]
fn single_center_at_zero_reproduces_raw_frames() {
    let ds = gen_fleet(&GenConfig::new(2, 5, 64, 20.0, 9)).unwrap();
    let centers = CenterSet::new(vec![0.0], Some(12.5)).unwrap();
    let decomposed = vmd_preprocess(&ds, &centers).unwrap();
    assert_eq!(decomposed.layout.channels(), 2);
    for (orig, got) in ds.frames.iter().zip(&decomposed.frames) {
        for (a, b) in orig.iter().zip(got) {
            assert!((a - b).norm() < 1e-12);
        }
    }
}

#[test]
fn rfiq_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fleet.rfiq");
    let ds = small_fleet(20.0, 10);
    save_iq(&path, &ds).unwrap();
    let loaded = load_iq(&path).unwrap();
    assert_eq!(loaded.labels, ds.labels);
    assert_eq!(loaded.class_names, ds.class_names);
    assert_eq!(loaded.layout, ds.layout);
    // storage is f32; values match at f32 precision
    for (a, b) in ds.frames.iter().zip(&loaded.frames) {
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.re as f32, y.re as f32);
            assert_eq!(y.re, y.re as f32 as f64);
        }
    }
    // a second save of the loaded dataset is byte-identical
    let path2 = dir.path().join("fleet2.rfiq");
    save_iq(&path2, &loaded).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(&path2).unwrap()
    );
}

#[test]
fn rfiq_empty_dataset_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.rfiq");
    let ds = Dataset::from_complex_frames(
        Vec::new(),
        Vec::new(),
        vec!["tx00".into(), "tx01".into()],
        Layout::RawIq,
        256,
        25e6,
        2e6,
    )
    .unwrap();
    save_iq(&path, &ds).unwrap();
    let loaded = load_iq(&path).unwrap();
    assert!(loaded.is_empty());
    assert_eq!(loaded.n_classes(), 2);
}

#[test]
fn rfiq_error_diagnostics() {
    let dir = tempfile::tempdir().unwrap();

    // magic mismatch
    let path = dir.path().join("bad_magic.rfiq");
    std::fs::write(&path, b"WAVE else entirely").unwrap();
    assert!(matches!(load_iq(&path), Err(DataError::BadMagic(_))));

    // truncated payload names the offsets
    let path = dir.path().join("truncated.rfiq");
    let ds = small_fleet(20.0, 11);
    save_iq(&path, &ds).unwrap();
    let full = std::fs::read(&path).unwrap();
    std::fs::write(&path, &full[..full.len() - 100]).unwrap();
    match load_iq(&path) {
        Err(DataError::TruncatedPayload { file_len, expected }) => {
            assert_eq!(file_len, full.len() - 100);
            assert_eq!(expected, full.len());
        }
        other => panic!("expected truncation error, got {other:?}"),
    }

    // label out of range: patch the first label bytes past n_classes
    let path = dir.path().join("bad_label.rfiq");
    let mut bytes = full.clone();
    let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let labels_at = 10 + header_len;
    bytes[labels_at..labels_at + 2].copy_from_slice(&900u16.to_le_bytes());
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        load_iq(&path),
        Err(DataError::LabelOutOfRange { index: 0, label: 900, .. })
    ));

    // trailing garbage is flagged too
    let path = dir.path().join("trailing.rfiq");
    let mut bytes = full.clone();
    bytes.extend_from_slice(&[0u8; 16]);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        load_iq(&path),
        Err(DataError::TrailingBytes { extra: 16 })
    ));
}

#[test]
fn to_model_input_raw_layout() {
    let ds = small_fleet(20.0, 12);
    let x = ds.to_model_input(&[3]);
    assert_eq!(x.shape(), &[1, 128, 2]);
    let frame = &ds.frames[3];
    for t in 0..128 {
        assert_eq!(x.data()[t * 2], frame[t].re);
        assert_eq!(x.data()[t * 2 + 1], frame[t].im);
    }
}
