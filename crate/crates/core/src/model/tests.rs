use super::*;
use crate::model::encoders::BnMode;
use crate::model::encoders::ResConvParams;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_config(mode: EncoderMode, in_channels: usize, n_classes: usize) -> ModelConfig {
    ModelConfig {
        cfre: CfreConfig {
            in_channels,
            hidden: (4, 6),
            model_dim: 8,
            kernel_t: 3,
            kernel_f: 15,
            dilation: 2,
        },
        mode,
        tdse: TdseConfig {
            layers: 1,
            heads: 2,
            model_dim: 8,
            ff_dim: 16,
            dropout: 0.0,
            max_len: 16,
        },
        mlfe: MlfeConfig {
            layers: 1,
            model_dim: 8,
            state_dim: 4,
            conv_kernel: 4,
            expand: 2,
        },
        n_classes,
    }
}

fn random_input(shape: &[usize], seed: u64) -> TensorData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TensorData::randn(shape, 0.0, 1.0, &mut rng)
}

#[test]
fn tdse_shape_contracts() {
    let mut model = Model::new(tiny_config(EncoderMode::Tdse, 2, 3), 1).unwrap();
    let tape = Tape::new();
    let out = model.forward(&tape, random_input(&[2, 10, 2], 2)).unwrap();
    assert_eq!(out.x_enc.shape(), vec![2, 11, 8]); // class token prepended
    assert_eq!(out.x_co.shape(), vec![2, 8]);
    assert_eq!(out.logits.shape(), vec![2, 3]);

    // x_co is exactly index 0 of the encoded sequence
    let enc = out.x_enc.value();
    let co = out.x_co.value();
    for b in 0..2 {
        for j in 0..8 {
            assert_eq!(enc.data()[b * 11 * 8 + j], co.data()[b * 8 + j]);
        }
    }
}

#[test]
fn mlfe_shape_contracts() {
    let mut model = Model::new(tiny_config(EncoderMode::Mlfe, 2, 3), 1).unwrap();
    let tape = Tape::new();
    let out = model.forward(&tape, random_input(&[2, 10, 2], 3)).unwrap();
    assert_eq!(out.x_enc.shape(), vec![2, 10, 8]);
    assert_eq!(out.x_co.shape(), vec![2, 8]);
    assert!(out.attention.is_empty());
}

#[test]
fn vmd_channel_width_accepted() {
    // c = 2k for k=3 decomposed input
    let mut model = Model::new(tiny_config(EncoderMode::Tdse, 6, 3), 1).unwrap();
    let tape = Tape::new();
    let out = model.forward(&tape, random_input(&[1, 8, 6], 4)).unwrap();
    assert_eq!(out.logits.shape(), vec![1, 3]);

    let err = model.forward(&tape, random_input(&[1, 8, 2], 5));
    assert!(matches!(
        err,
        Err(ModelError::ChannelMismatch { expected: 6, got: 2 })
    ));
}

#[test]
fn sequence_longer_than_positional_table_rejected() {
    let mut model = Model::new(tiny_config(EncoderMode::Tdse, 2, 3), 1).unwrap();
    let tape = Tape::new();
    let err = model.forward(&tape, random_input(&[1, 17, 2], 6));
    assert!(matches!(err, Err(ModelError::SequenceTooLong { t: 17, t_max: 16 })));
}

#[test]
fn config_validation() {
    let mut config = tiny_config(EncoderMode::Tdse, 2, 3);
    config.cfre.kernel_f = 14;
    assert!(matches!(Model::new(config, 0), Err(ModelError::BadConfig(_))));

    let mut config = tiny_config(EncoderMode::Tdse, 2, 3);
    config.tdse.heads = 3; // 8 % 3 != 0
    assert!(matches!(Model::new(config, 0), Err(ModelError::BadConfig(_))));

    let mut config = tiny_config(EncoderMode::Mlfe, 2, 3);
    config.mlfe.model_dim = 7;
    assert!(matches!(Model::new(config, 0), Err(ModelError::BadConfig(_))));
}

#[test]
fn res_conv_zero_weights_is_identity() {
    // c_in = c_out, zero conv paths, BN at init → ReLU(BN(0)) + x = x
    let tape = Tape::new();
    let c = 3;
    let params = ResConvParams {
        conv_t_weight: tape.leaf(TensorData::zeros(&[c, c, 3]), true),
        conv_t_bias: tape.leaf(TensorData::zeros(&[c]), true),
        conv_f_weight: tape.leaf(TensorData::zeros(&[c, c, 5]), true),
        conv_f_bias: tape.leaf(TensorData::zeros(&[c]), true),
        bn_gamma: tape.leaf(TensorData::full(&[c], 1.0), true),
        bn_beta: tape.leaf(TensorData::zeros(&[c]), true),
        shortcut: None,
    };
    let x_data = random_input(&[2, 3, 4], 7);
    let x = tape.constant(x_data.clone());
    let (out, stats) = res_conv_forward(x, &params, 1, BnMode::Train).unwrap();
    assert_eq!(out.value().data(), x_data.data());
    assert!(stats.is_some());
}

#[test]
fn res_conv_preserves_length_with_dilation() {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = ResConvParams {
        conv_t_weight: tape.leaf(TensorData::randn(&[4, 2, 3], 0.0, 0.1, &mut rng), true),
        conv_t_bias: tape.leaf(TensorData::zeros(&[4]), true),
        conv_f_weight: tape.leaf(TensorData::randn(&[4, 2, 15], 0.0, 0.1, &mut rng), true),
        conv_f_bias: tape.leaf(TensorData::zeros(&[4]), true),
        bn_gamma: tape.leaf(TensorData::full(&[4], 1.0), true),
        bn_beta: tape.leaf(TensorData::zeros(&[4]), true),
        shortcut: Some((
            tape.leaf(TensorData::randn(&[4, 2, 1], 0.0, 0.1, &mut rng), true),
            tape.leaf(TensorData::zeros(&[4]), true),
        )),
    };
    let x = tape.constant(random_input(&[1, 2, 8], 9));
    let (out, _) = res_conv_forward(x, &params, 2, BnMode::Train).unwrap();
    assert_eq!(out.shape(), vec![1, 4, 8]);
}

#[test]
fn attention_rows_sum_to_one_per_head() {
    let mut config = tiny_config(EncoderMode::Tdse, 2, 3);
    config.tdse.layers = 2;
    let mut model = Model::new(config, 11).unwrap();
    let tape = Tape::new();
    let out = model.forward(&tape, random_input(&[2, 6, 2], 12)).unwrap();
    assert_eq!(out.attention.len(), 2);
    for attn in &out.attention {
        let v = attn.value();
        let shape = attn.shape(); // (b, H, S, S)
        assert_eq!(shape, vec![2, 2, 7, 7]);
        let s = shape[3];
        for row in v.data().chunks(s) {
            let total: f64 = row.iter().sum();
            assert!((total - 1.0).abs() <= 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }
}

/// Scalar-loop oracle for one single-head TDSE layer at d_m = 4, T = 2:
/// positions and class token zeroed, FFN zeroed, Wo = I, so the layer
/// reduces to LN(seq + softmax(QKᵀ/√d_k)V) evaluated by hand.
#[test]
fn tdse_layer_matches_hand_computed_attention() {
    let mut config = tiny_config(EncoderMode::Tdse, 2, 3);
    config.cfre.model_dim = 4;
    config.cfre.hidden = (3, 3);
    config.tdse.model_dim = 4;
    config.tdse.heads = 1;
    config.tdse.layers = 1;
    config.tdse.ff_dim = 4;
    let mut model = Model::new(config, 13).unwrap();

    let d = 4;
    let wq = [0.2, -0.1, 0.0, 0.3, 0.1, 0.4, -0.2, 0.0, 0.0, 0.1, 0.3, -0.1, 0.2, 0.0, 0.1, 0.2];
    let wk = [0.1, 0.0, 0.2, -0.3, 0.0, 0.2, 0.1, 0.1, -0.1, 0.3, 0.0, 0.2, 0.3, -0.2, 0.1, 0.0];
    let wv = [0.3, 0.1, -0.1, 0.0, 0.1, 0.2, 0.0, 0.1, 0.2, -0.3, 0.1, 0.1, 0.0, 0.1, 0.2, -0.2];
    let eye = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
    {
        let store = model.store_mut();
        *store.param_mut("tdse.layer0.attn.wq").unwrap() =
            TensorData::new(vec![4, 4], wq.to_vec()).unwrap();
        *store.param_mut("tdse.layer0.attn.wk").unwrap() =
            TensorData::new(vec![4, 4], wk.to_vec()).unwrap();
        *store.param_mut("tdse.layer0.attn.wv").unwrap() =
            TensorData::new(vec![4, 4], wv.to_vec()).unwrap();
        *store.param_mut("tdse.layer0.attn.wo").unwrap() =
            TensorData::new(vec![4, 4], eye.to_vec()).unwrap();
        *store.param_mut("tdse.pos").unwrap() = TensorData::zeros(&[1, 16, 4]);
        *store.param_mut("tdse.cls").unwrap() = TensorData::zeros(&[1, 1, 4]);
        *store.param_mut("tdse.layer0.ffn.w1").unwrap() = TensorData::zeros(&[4, 4]);
        *store.param_mut("tdse.layer0.ffn.w2").unwrap() = TensorData::zeros(&[4, 4]);
    }

    // feed features straight into the encoder by bypassing CFRE:
    // call the encoder function with a hand-built binding
    let feats = TensorData::new(
        vec![1, 2, 4],
        vec![0.5, -0.2, 0.1, 0.4, -0.3, 0.6, 0.2, -0.1],
    )
    .unwrap();
    let tape = Tape::new();
    let (bound, _) = model.bind(&tape, false);
    let x = tape.constant(feats.clone());
    let (x_enc, x_co, attn) = super::encoders::tdse_forward(
        x,
        &bound,
        &model.config().tdse,
        false,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    assert_eq!(x_enc.shape(), vec![1, 3, 4]);

    // hand computation with scalar loops
    let seq = [[0.0; 4], [0.5, -0.2, 0.1, 0.4], [-0.3, 0.6, 0.2, -0.1]];
    let matvec = |m: &[f64; 16], v: &[f64; 4]| {
        let mut out = [0.0; 4];
        for (i, vi) in v.iter().enumerate() {
            for j in 0..4 {
                out[j] += vi * m[i * 4 + j];
            }
        }
        out
    };
    let mut q = [[0.0; 4]; 3];
    let mut k = [[0.0; 4]; 3];
    let mut v = [[0.0; 4]; 3];
    for t in 0..3 {
        q[t] = matvec(&wq, &seq[t]);
        k[t] = matvec(&wk, &seq[t]);
        v[t] = matvec(&wv, &seq[t]);
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut hand_attn = [[0.0; 3]; 3];
    for i in 0..3 {
        let mut scores = [0.0; 3];
        for j in 0..3 {
            scores[j] = scale * q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>();
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for j in 0..3 {
            hand_attn[i][j] = exps[j] / total;
        }
    }
    let attn_v = attn[0].value();
    for i in 0..3 {
        for j in 0..3 {
            assert!(
                (attn_v.data()[i * 3 + j] - hand_attn[i][j]).abs() < 1e-12,
                "attention ({i},{j})"
            );
        }
    }

    // context, residual, two layer norms (FFN path is zero)
    let hand_co = {
        let mut ctx = [0.0; 4];
        for j in 0..3 {
            for c in 0..4 {
                ctx[c] += hand_attn[0][j] * v[j][c];
            }
        }
        let mut row = [0.0; 4];
        for c in 0..4 {
            row[c] = seq[0][c] + ctx[c]; // Wo = identity, bias 0
        }
        let ln = |row: &[f64; 4]| {
            let m: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 4.0;
            let istd = 1.0 / (var + 1e-5).sqrt();
            let mut out = [0.0; 4];
            for c in 0..4 {
                out[c] = (row[c] - m) * istd;
            }
            out
        };
        ln(&ln(&row))
    };
    let co = x_co.value();
    for c in 0..4 {
        assert!((co.data()[c] - hand_co[c]).abs() < 1e-12, "x_co[{c}]");
    }
}

#[test]
fn mlfe_zero_projection_gives_zero_output() {
    let mut model = Model::new(tiny_config(EncoderMode::Mlfe, 2, 3), 14).unwrap();
    {
        let store = model.store_mut();
        *store.param_mut("mlfe.layer0.dbc.weight").unwrap() = TensorData::zeros(&[8, 16]);
        *store.param_mut("mlfe.layer0.dbc.bias").unwrap() = TensorData::zeros(&[16]);
    }
    let tape = Tape::new();
    let out = model.forward(&tape, random_input(&[1, 6, 2], 15)).unwrap();
    // B = 0 keeps the state at h₀ = 0, so the scan output and the gated
    // product are identically zero
    assert!(out.x_enc.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn mlfe_encoder_is_causal() {
    // probe the encoder on feature sequences directly: the CFRE in front
    // of it uses symmetric padding and is not causal by design
    let model = Model::new(tiny_config(EncoderMode::Mlfe, 2, 3), 16).unwrap();
    let t0 = 4;
    let base = random_input(&[1, 10, 8], 17);
    let mut perturbed = base.clone();
    for t in (t0 + 1)..10 {
        for c in 0..8 {
            perturbed.data_mut()[t * 8 + c] += 3.5;
        }
    }
    let run = |input: TensorData| {
        let tape = Tape::new();
        let (bound, _) = model.bind(&tape, false);
        let x = tape.constant(input);
        let (enc, _) = super::encoders::mlfe_forward(x, &bound, &model.config().mlfe).unwrap();
        enc.value()
    };
    let out_a = run(base);
    let out_b = run(perturbed);
    for t in 0..=t0 {
        for c in 0..8 {
            assert_eq!(
                out_a.data()[t * 8 + c],
                out_b.data()[t * 8 + c],
                "t={t} c={c}"
            );
        }
    }
    // and the future does change
    assert!(out_a.data()[9 * 8..] != out_b.data()[9 * 8..]);
}

#[test]
fn tdse_is_position_sensitive() {
    let mut model = Model::new(tiny_config(EncoderMode::Tdse, 2, 3), 18).unwrap();
    let base = random_input(&[1, 8, 2], 19);
    let mut swapped = base.clone();
    for c in 0..2 {
        let a = base.data()[2 * 2 + c];
        let b = base.data()[5 * 2 + c];
        swapped.data_mut()[2 * 2 + c] = b;
        swapped.data_mut()[5 * 2 + c] = a;
    }
    let tape = Tape::new();
    let co_a = model.forward(&tape, base).unwrap().x_co.value();
    let co_b = model.forward(&tape, swapped).unwrap().x_co.value();
    let diff: f64 = co_a
        .data()
        .iter()
        .zip(co_b.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    assert!(diff > 1e-9, "positional encoding should break permutation symmetry");
}

#[test]
fn closed_head_examples() {
    let mut model = Model::new(tiny_config(EncoderMode::Tdse, 2, 3), 20).unwrap();
    {
        let store = model.store_mut();
        *store.param_mut("head.weight").unwrap() = TensorData::zeros(&[8, 3]);
        *store.param_mut("head.bias").unwrap() = TensorData::zeros(&[3]);
    }
    let tape = Tape::new();
    let out = model.forward(&tape, random_input(&[2, 6, 2], 21)).unwrap();
    assert!(out.logits.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn checkpoint_round_trip_preserves_forward() {
    let mut model = Model::new(tiny_config(EncoderMode::Mlfe, 2, 4), 22).unwrap();
    // push some training noise into buffers so they round-trip too
    model.set_training(true);
    let tape = Tape::new();
    let _ = model.forward(&tape, random_input(&[4, 8, 2], 23)).unwrap();
    model.set_training(false);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    model.save(&path).unwrap();
    let mut restored = Model::load(model.config().clone(), &path).unwrap();

    let input = random_input(&[2, 8, 2], 24);
    let tape_a = Tape::new();
    let logits_a = model.forward(&tape_a, input.clone()).unwrap().logits.value();
    let tape_b = Tape::new();
    let logits_b = restored.forward(&tape_b, input).unwrap().logits.value();
    assert_eq!(logits_a.data(), logits_b.data());
}

#[test]
fn forward_is_deterministic_given_seed() {
    let input = random_input(&[2, 8, 2], 25);
    let run = || {
        let mut model = Model::new(tiny_config(EncoderMode::Tdse, 2, 3), 77).unwrap();
        let tape = Tape::new();
        model.forward(&tape, input.clone()).unwrap().logits.value()
    };
    assert_eq!(run().data(), run().data());
}

/// Finite-difference check of every parameter gradient through the full
/// model (CFRE → encoder → head → weighted cross-entropy), both modes.
fn full_model_grad_err(mode: EncoderMode, seed: u64) -> f64 {
    let mut config = tiny_config(mode, 2, 3);
    config.cfre.kernel_f = 5; // keep the unit test quick; acceptance runs k_f = 15
    config.tdse.max_len = 8;
    let mut model = Model::new(config, seed).unwrap();
    // move the parameters to a generic, well-conditioned point: at the
    // tiny N(0, 0.02) init the pre-BN activations have variance far
    // below eps, a high-curvature regime where central differences
    // themselves lose accuracy
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 99);
    for (name, data) in model.store_mut().params_mut() {
        let randomized = TensorData::randn(data.shape(), 0.0, 0.4, &mut rng);
        *data = randomized;
        if name.ends_with("a_diag") {
            for v in data.data_mut() {
                *v = -v.abs() - 0.1; // keep the scan dynamics decaying
            }
        }
    }
    model.set_training(true);
    let input = random_input(&[2, 8, 2], seed + 1);
    let targets = vec![0usize, 2];
    let weights = vec![1.0, 1.5, 0.7];

    let loss_of = |model: &mut Model| -> f64 {
        let tape = Tape::new();
        let out = model.forward(&tape, input.clone()).unwrap();
        out.logits
            .cross_entropy(&targets, &weights)
            .unwrap()
            .scalar_value()
    };

    // analytic
    let analytic: Vec<TensorData> = {
        let tape = Tape::new();
        let out = model.forward(&tape, input.clone()).unwrap();
        let loss = out.logits.cross_entropy(&targets, &weights).unwrap();
        tape.backward(loss).unwrap();
        out.param_grads()
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.unwrap_or_else(|| TensorData::zeros(model.store().params()[i].1.shape()))
            })
            .collect()
    };

    let h = 1e-5;
    let mut max_err = 0.0f64;
    let mut worst = String::new();
    let names: Vec<String> = model.store().params().iter().map(|(n, _)| n.clone()).collect();
    for (pi, name) in names.iter().enumerate() {
        let n = model.store().params()[pi].1.numel();
        for e in 0..n {
            let orig = model.store().params()[pi].1.data()[e];
            model.store_mut().param_mut(name).unwrap().data_mut()[e] = orig + h;
            let f_plus = loss_of(&mut model);
            model.store_mut().param_mut(name).unwrap().data_mut()[e] = orig - h;
            let f_minus = loss_of(&mut model);
            model.store_mut().param_mut(name).unwrap().data_mut()[e] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[pi].data()[e];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if err > max_err {
                max_err = err;
                worst = format!("{name}[{e}] analytic={a} numeric={numeric}");
            }
        }
    }
    eprintln!("worst: {worst}");
    max_err
}

#[test]
fn full_model_gradients_match_finite_differences_tdse() {
    let err = full_model_grad_err(EncoderMode::Tdse, 30);
    assert!(err <= 1e-4, "max rel err {err}");
}

#[test]
fn full_model_gradients_match_finite_differences_mlfe() {
    let err = full_model_grad_err(EncoderMode::Mlfe, 31);
    assert!(err <= 1e-4, "max rel err {err}");
}

#[test]
fn mlfe_forward_time_is_roughly_linear() {
    // trend check: doubling T should not much more than double wall time
    let mut config = tiny_config(EncoderMode::Mlfe, 2, 3);
    config.tdse.max_len = 1024;
    let mut model = Model::new(config, 32).unwrap();
    let mut times = Vec::new();
    for &t in &[64usize, 128, 256, 512] {
        let input = random_input(&[1, t, 2], t as u64);
        // warm up then measure the best of several runs to damp noise
        let mut best = f64::INFINITY;
        for _ in 0..5 {
            let tape = Tape::new();
            let start = std::time::Instant::now();
            let _ = model.forward(&tape, input.clone()).unwrap();
            best = best.min(start.elapsed().as_secs_f64());
        }
        times.push(best);
    }
    for w in times.windows(2) {
        assert!(w[1] / w[0] <= 2.5, "ratio {} over {:?}", w[1] / w[0], times);
    }
}
