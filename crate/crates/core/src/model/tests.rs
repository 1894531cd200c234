use super::*;
use crate::autograd::fd_check;
use crate::config::ExperimentConfig;
use rand::Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn stage(out_channels: usize, stride: usize, pool: bool) -> StemStage {
    StemStage {
        out_channels,
        stride,
        pool,
    }
}

fn small_config(attention: AttentionKind) -> ModelConfig {
    ModelConfig {
        img_h: 8,
        img_w: 8,
        in_channels: 1,
        stem: vec![stage(16, 1, true)],
        embed_dim: 16,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        pos_embedding: PosEmbedding::Learnable,
        num_classes: 3,
        attention,
        qkv_bias: true,
    }
}

/// Replaces every parameter with values large enough that no gradient is
/// negligible next to finite-difference noise.
fn randomize(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = model.params().names().to_vec();
    for (name, t) in names.iter().zip(model.params_mut().tensors_mut()) {
        let offset = if name.ends_with("gamma") { 1.0 } else { 0.0 };
        *t = random(t.shape(), &mut rng, 0.5).add_scalar(offset);
    }
}

#[test]
fn stem_maps_mnist_to_7x7_tokens() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.token_grid().unwrap(), (7, 7));
    let model = Model::new(cfg, 0).unwrap();
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let stem: Vec<_> = model.layout.stem.iter().map(|&(w, b)| (bound[w.0], bound[b.0])).collect();
    let img = g.constant(Tensor::zeros(&[1, 28, 28]));
    let tokens = conv_stem_forward(&mut g, img, &stem, &model.config().stem).unwrap();
    assert_eq!(g.shape(tokens), &[49, 32]);
}

#[test]
fn stem_tokens_follow_raster_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = random(&[1, 4, 5], &mut rng, 1.0).map(f64::abs);
    let mut w = Tensor::zeros(&[1, 1, 3, 3]);
    w.data_mut()[4] = 1.0;
    let mut g = Graph::new();
    let x = g.constant(img.clone());
    let wv = g.constant(w);
    let b = g.constant(Tensor::zeros(&[1]));
    let tokens = conv_stem_forward(&mut g, x, &[(wv, b)], &[stage(1, 1, false)]).unwrap();
    // Identity kernel on non-negative input: token i = x + y·w is pixel (y, x).
    assert_eq!(g.shape(tokens), &[20, 1]);
    for i in 0..20 {
        assert_eq!(g.value(tokens).data()[i], img.data()[(i / 5) * 5 + i % 5]);
    }
}

#[test]
fn stem_gradient_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let img = random(&[2, 6, 6], &mut rng, 1.0);
    let w1 = random(&[3, 2, 3, 3], &mut rng, 0.5);
    let b1 = random(&[3], &mut rng, 0.5);
    let w2 = random(&[4, 3, 3, 3], &mut rng, 0.5);
    let b2 = random(&[4], &mut rng, 0.5);
    let weights = random(&[9, 4], &mut rng, 1.0);
    let stages = [stage(3, 1, true), stage(4, 1, false)];
    let err = fd_check(
        |g, wv| {
            let x = g.constant(img.clone());
            let vars = [(wv, g.constant(b1.clone())), (g.constant(w2.clone()), g.constant(b2.clone()))];
            let t = conv_stem_forward(g, x, &vars, &stages)?;
            let c = g.constant(weights.clone());
            let p = g.mul(t, c)?;
            Ok(g.sum(p))
        },
        &w1,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-5, "{err:e}");
}

fn block_vars(g: &mut Graph, d: usize, hidden: usize, zero_weights: bool, rng: &mut ChaCha8Rng) -> EncoderBlockVars {
    let mut t = |shape: &[usize]| {
        if zero_weights {
            Tensor::zeros(shape)
        } else {
            random(shape, rng, 0.5)
        }
    };
    let (wq, wk, wv, wo) = (t(&[d, d]), t(&[d, d]), t(&[d, d]), t(&[d, d]));
    let (w1, b1, w2, b2) = (t(&[d, hidden]), t(&[hidden]), t(&[hidden, d]), t(&[d]));
    EncoderBlockVars {
        ln1: (g.constant(Tensor::ones(&[d])), g.constant(Tensor::zeros(&[d]))),
        attn: AttentionVars {
            wq: g.constant(wq),
            wk: g.constant(wk),
            wv: g.constant(wv),
            wo: g.constant(wo),
            biases: None,
        },
        ln2: (g.constant(Tensor::ones(&[d])), g.constant(Tensor::zeros(&[d]))),
        fc1: (g.constant(w1), g.constant(b1)),
        fc2: (g.constant(w2), g.constant(b2)),
    }
}

#[test]
fn zero_weight_block_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let geom = AttentionGeometry::new(3, 4, 8, 2).unwrap();
    let xt = random(&[12, 8], &mut rng, 1.0);
    for kind in [AttentionKind::Standard, AttentionKind::CoupledFast, AttentionKind::CoupledExplicit] {
        let mut g = Graph::new();
        let vars = block_vars(&mut g, 8, 16, true, &mut rng);
        let x = g.constant(xt.clone());
        let y = encoder_block_forward(&mut g, x, &vars, kind, &geom).unwrap();
        assert_eq!(g.value(y), &xt, "{kind}");
    }
}

#[test]
fn block_fast_matches_explicit() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (h, w, heads) in [(3, 4, 1), (4, 4, 2), (5, 3, 4)] {
        let geom = AttentionGeometry::new(h, w, 8, heads).unwrap();
        let xt = random(&[h * w, 8], &mut rng, 1.0);
        let seed: u64 = rng.random();
        let run = |kind| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let vars = block_vars(&mut g, 8, 16, false, &mut r);
            let x = g.constant(xt.clone());
            let y = encoder_block_forward(&mut g, x, &vars, kind, &geom).unwrap();
            g.value(y).clone()
        };
        let diff = run(AttentionKind::CoupledFast)
            .max_abs_diff(&run(AttentionKind::CoupledExplicit))
            .unwrap();
        assert!(diff <= 1e-9, "{h}x{w} heads {heads}: {diff:e}");
    }
}

#[test]
fn sequence_pool_laws() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let xt = random(&[6, 4], &mut rng, 1.0);
    let mut g = Graph::new();
    let x = g.constant(xt.clone());
    let zero = g.constant(Tensor::zeros(&[4, 1]));
    let pooled = sequence_pool(&mut g, x, zero).unwrap();
    for j in 0..4 {
        let mean = (0..6).map(|i| xt.at2(i, j)).sum::<f64>() / 6.0;
        assert!((g.value(pooled).at2(0, j) - mean).abs() < 1e-15);
    }

    let one = random(&[1, 4], &mut rng, 1.0);
    let x1 = g.constant(one.clone());
    let wt = g.constant(random(&[4, 1], &mut rng, 1.0));
    let p1 = sequence_pool(&mut g, x1, wt).unwrap();
    assert_eq!(g.value(p1), &one);

    let scores = xt.matmul(&random(&[4, 1], &mut rng, 3.0)).unwrap();
    let alpha = scores.transpose2d().unwrap().softmax_rows().unwrap();
    assert!((alpha.sum() - 1.0).abs() < 1e-12);
}

#[test]
fn logits_have_class_count_shape() {
    for (classes, attention) in [(10, AttentionKind::CoupledFast), (3, AttentionKind::Standard), (7, AttentionKind::CoupledExplicit)] {
        let cfg = ModelConfig {
            num_classes: classes,
            attention,
            ..small_config(attention)
        };
        let model = Model::new(cfg, 1).unwrap();
        let logits = model.predict(&Tensor::ones(&[1, 8, 8])).unwrap();
        assert_eq!(logits.shape(), &[classes]);
    }
}

#[test]
fn position_embedding_modes_agree_at_init() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let img = random(&[1, 28, 28], &mut rng, 1.0);
    let learn = Model::new(ModelConfig::default(), 4).unwrap();
    let none = Model::new(
        ModelConfig {
            pos_embedding: PosEmbedding::None,
            ..ModelConfig::default()
        },
        4,
    )
    .unwrap();
    assert_eq!(learn.predict(&img).unwrap(), none.predict(&img).unwrap());
    assert_eq!(learn.param_count() - none.param_count(), 49 * 32);
}

#[test]
fn full_model_input_gradient_matches_fd() {
    let cfg = crate::verify::gradcheck_model_config();
    for seed in 0..3 {
        let err = crate::verify::model_gradient_error(&cfg, seed).unwrap();
        assert!(err <= 1e-4, "seed {seed}: {err:e}");
    }
}

/// Every parameter coordinate against central differences. Some true
/// gradients are ~1e-8, below what differences can resolve relatively, so
/// the denominator gets an absolute floor of 1e-6.
#[test]
fn full_model_parameter_gradients_match_fd() {
    use crate::autograd::numeric_gradient;
    let cfg = crate::verify::gradcheck_model_config();
    for seed in 0..2 {
        let model = crate::verify::randomized_model(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
        let image = random(&[1, 8, 8], &mut rng, 1.0);
        let label = rng.random_range(0..3);
        let analytic = model.loss_and_grads(&image, label).unwrap().grads;
        let params = model.params().tensors().to_vec();
        for (i, p) in params.iter().enumerate() {
            let numeric = numeric_gradient(
                |g, xv| {
                    let bound: Vec<Var> = params
                        .iter()
                        .enumerate()
                        .map(|(j, t)| if j == i { xv } else { g.constant(t.clone()) })
                        .collect();
                    let x = g.constant(image.clone());
                    let logits = model.forward(g, &bound, x)?;
                    g.cross_entropy(logits, label)
                },
                p,
                1e-5,
            )
            .unwrap();
            for (a, n) in analytic[i].data().iter().zip(numeric.data()) {
                let err = (a - n).abs() / (n.abs() + 1e-6);
                assert!(err <= 1e-4, "seed {seed} {}: {a:e} vs {n:e}", model.params().names()[i]);
            }
        }
    }
}

#[test]
fn key_bias_gradient_vanishes() {
    // A key bias shifts every score in a softmax row by the same amount.
    for attention in [AttentionKind::Standard, AttentionKind::CoupledFast] {
        let mut model = Model::new(small_config(attention), 3).unwrap();
        randomize(&mut model, 30);
        let img = Tensor::from_fn(&[1, 8, 8], |i| ((i[1] * 3 + i[2]) % 5) as f64 - 2.0);
        let s = model.loss_and_grads(&img, 2).unwrap();
        let names = model.params().names();
        let bk = names.iter().position(|n| n == "blocks.0.attn.bk").unwrap();
        let bq = names.iter().position(|n| n == "blocks.0.attn.bq").unwrap();
        assert!(s.grads[bk].max_abs() < 1e-14, "{attention}");
        assert!(s.grads[bq].max_abs() > 1e-6, "{attention}");
    }
}

#[test]
fn loss_and_grads_agree_with_bind() {
    let model = Model::new(small_config(AttentionKind::CoupledFast), 2).unwrap();
    let img = Tensor::ones(&[1, 8, 8]);
    let s = model.loss_and_grads(&img, 1).unwrap();
    assert_eq!(s.grads.len(), model.params().len());
    for (g, p) in s.grads.iter().zip(model.params().tensors()) {
        assert_eq!(g.shape(), p.shape());
    }
    assert!(s.loss > 0.0);
}

#[test]
fn param_count_matches_analytic() {
    for cfg in [
        ModelConfig::default(),
        small_config(AttentionKind::Standard),
        ModelConfig {
            pos_embedding: PosEmbedding::None,
            heads: 4,
            depth: 3,
            ..ModelConfig::default()
        },
    ] {
        let model = Model::new(cfg.clone(), 0).unwrap();
        assert_eq!(model.param_count(), cfg.analytic_param_count().unwrap());
    }
}

#[test]
fn same_seed_same_model() {
    let a = Model::new(ModelConfig::default(), 11).unwrap();
    let b = Model::new(ModelConfig::default(), 11).unwrap();
    let c = Model::new(ModelConfig::default(), 12).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
    let img = Tensor::from_fn(&[1, 28, 28], |i| (i[1] * i[2]) as f64 / 784.0);
    assert_eq!(a.predict(&img).unwrap(), b.predict(&img).unwrap());
}

#[test]
fn config_validation() {
    let cfg = ModelConfig {
        embed_dim: 48,
        ..ModelConfig::default()
    };
    assert!(matches!(Model::new(cfg, 0), Err(Error::Config(_))));
    let cfg = ModelConfig {
        heads: 5,
        ..ModelConfig::default()
    };
    assert!(Model::new(cfg, 0).is_err());
    assert!("8:x".parse::<StemStage>().is_err());
    assert_eq!("16".parse::<StemStage>().unwrap(), stage(16, 1, true));
    assert_eq!("16:2:nopool".parse::<StemStage>().unwrap().to_string(), "16:2:nopool");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut exp = ExperimentConfig {
        model: small_config(AttentionKind::CoupledFast),
        ..ExperimentConfig::default()
    };
    exp.train.seed = 5;
    let mut model = Model::new(exp.model.clone(), 5).unwrap();
    randomize(&mut model, 77);
    save_checkpoint(dir.path(), &model, &exp).unwrap();
    let (cfg, loaded) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(cfg, exp);
    for (a, b) in loaded.params().tensors().iter().zip(model.params().tensors()) {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    let manifest = std::fs::read_to_string(dir.path().join(CHECKPOINT_MANIFEST)).unwrap();
    assert!(manifest.starts_with("stem.0.weight 16x1x3x3\n"));
}

#[test]
fn checkpoint_geometry_mismatch_is_error() {
    let dir = tempfile::tempdir().unwrap();
    let exp = ExperimentConfig {
        model: small_config(AttentionKind::CoupledFast),
        ..ExperimentConfig::default()
    };
    let model = Model::new(exp.model.clone(), 0).unwrap();
    save_checkpoint(dir.path(), &model, &exp).unwrap();
    let mut other = Model::new(
        ModelConfig {
            heads: 4,
            depth: 1,
            ..small_config(AttentionKind::CoupledFast)
        },
        0,
    )
    .unwrap();
    let err = other.load_params(read_params(dir.path()).unwrap()).unwrap_err();
    assert!(err.to_string().contains("incompatible checkpoint geometry"), "{err}");
}

