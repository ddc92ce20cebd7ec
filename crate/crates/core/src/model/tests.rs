use super::*;
use crate::seed;
use ndarray::{array, Array2};
use rand::Rng;

fn cfg(density: DensityConfig, mode: PairwiseMode, share: bool) -> HeadConfig {
    HeadConfig {
        feature_dim: 6,
        hidden_dim: 5,
        num_actions: 3,
        num_target_slots: 2,
        num_object_classes: 3,
        density,
        use_interaction_branch: true,
        pairwise_mode: mode,
        concat_hidden: 4,
        share_interaction_heads: share,
    }
}

fn randn(rng: &mut impl Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-1.5..1.5))
}

/// Moves every parameter to a random value of moderate size so that
/// gradient checks exercise more than the tiny initial output layers.
fn randomize(model: &mut Model, seed: u64) {
    let mut rng = seed::rng(seed, &[1]);
    for (_, _, t) in model.params.tensors_mut() {
        for v in t.iter_mut() {
            *v = rng.random_range(-0.6..0.6);
        }
    }
}

fn random_samples(c: &HeadConfig, seed: u64) -> ImageSamples {
    let mut rng = seed::rng(seed, &[2]);
    let d = c.feature_dim;
    let no = 7;
    let labels: Vec<usize> = (0..no).map(|_| rng.random_range(0..=c.num_object_classes)).collect();
    let reg_targets = labels
        .iter()
        .map(|&l| (l < c.num_object_classes).then(|| RelOffset::new(rng.random_range(-2.0..2.0), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5))))
        .collect();
    let nh = 4;
    let actions = Array2::from_shape_fn((nh, c.num_actions), |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
    let targets = (0..nh)
        .map(|_| {
            (0..c.num_target_slots)
                .map(|_| rng.random_bool(0.6).then(|| RelOffset::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))))
                .collect()
        })
        .collect();
    let np = 3;
    ImageSamples {
        object: ObjectSamples {
            features: randn(&mut rng, no, d),
            labels,
            reg_targets,
        },
        human: HumanSamples {
            features: randn(&mut rng, nh, d),
            actions,
            targets,
        },
        interaction: InteractionSamples {
            human: randn(&mut rng, np, d),
            object: randn(&mut rng, np, d),
            labels: Array2::from_shape_fn((np, c.num_actions), |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }),
        },
    }
}

fn check_gradients(c: HeadConfig, seed: u64) {
    let mut model = Model::new(c, seed).unwrap();
    randomize(&mut model, seed);
    let w = LossWeights::default();
    let batch = vec![random_samples(&model.config, seed), random_samples(&model.config, seed + 100)];
    let (_, grad) = batch_loss_and_grad(&model, &w, &batch).unwrap();
    let names: Vec<String> = model.params.tensors().into_iter().map(|(n, _, _)| n).collect();
    let analytic: Vec<Vec<f64>> = grad.tensors().into_iter().map(|(_, _, t)| t.to_vec()).collect();
    let h = 1e-5;
    for (ti, name) in names.iter().enumerate() {
        for k in 0..analytic[ti].len() {
            let orig = model.params.tensors()[ti].2[k];
            model.params.tensors_mut()[ti].2[k] = orig + h;
            let up = batch_loss_and_grad(&model, &w, &batch).unwrap().0.total;
            model.params.tensors_mut()[ti].2[k] = orig - h;
            let down = batch_loss_and_grad(&model, &w, &batch).unwrap().0.total;
            model.params.tensors_mut()[ti].2[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[ti][k];
            let err = (a - numeric).abs();
            assert!(
                err <= 1e-6 || err <= 1e-4 * a.abs().max(numeric.abs()),
                "{name}[{k}]: analytic {a}, numeric {numeric}"
            );
        }
    }
}

#[test]
fn gradients_fixed_sigma_logit_sum() {
    check_gradients(cfg(DensityConfig::fixed_sigma(), PairwiseMode::LogitSum, false), 1);
}

#[test]
fn gradients_mixture_single_fixed_width() {
    check_gradients(cfg(DensityConfig::mixture(1, false), PairwiseMode::LogitSum, false), 2);
}

#[test]
fn gradients_mixture_two_learned_width() {
    check_gradients(cfg(DensityConfig::mixture(2, true), PairwiseMode::LogitSum, false), 3);
}

#[test]
fn gradients_concat_mlp() {
    check_gradients(cfg(DensityConfig::mixture(2, true), PairwiseMode::ConcatMlp, false), 4);
}

#[test]
fn gradients_shared_heads() {
    check_gradients(cfg(DensityConfig::fixed_sigma(), PairwiseMode::LogitSum, true), 5);
    check_gradients(cfg(DensityConfig::fixed_sigma(), PairwiseMode::ConcatMlp, true), 6);
}

#[test]
fn zero_params_give_uniform_classes_and_half_scores() {
    let c = cfg(DensityConfig::fixed_sigma(), PairwiseMode::LogitSum, false);
    let model = Model::from_parts(c.clone(), ModelParams::zeros(&c)).unwrap();
    let x = randn(&mut seed::rng(0, &[]), 3, 6);
    let o = model.forward_object(&x).unwrap();
    for i in 0..3 {
        for p in o.probs(i) {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }
    let h = model.forward_human(&x).unwrap();
    assert_eq!(h.action_scores(1), vec![0.5; 3]);
    let s = model.forward_interaction(&x, &x).unwrap();
    assert!(s.iter().all(|&v| v == 0.5));
}

#[test]
fn probabilities_on_simplex() {
    let c = cfg(DensityConfig::mixture(2, true), PairwiseMode::LogitSum, false);
    let mut model = Model::new(c, 3).unwrap();
    randomize(&mut model, 3);
    let x = randn(&mut seed::rng(1, &[]), 5, 6);
    let o = model.forward_object(&x).unwrap();
    let h = model.forward_human(&x).unwrap();
    for i in 0..5 {
        assert!((o.probs(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(h.action_scores(i).iter().all(|&s| s > 0.0 && s < 1.0));
        for slot in 0..2 {
            let mix = h.mixture(i, slot, &model.config.density);
            mix.validate(0.3).unwrap();
        }
    }
}

#[test]
fn hand_built_heads() {
    // one feature, one hidden unit, identity trunk
    let c = HeadConfig {
        feature_dim: 1,
        hidden_dim: 1,
        num_actions: 2,
        num_target_slots: 1,
        num_object_classes: 1,
        ..cfg(DensityConfig::fixed_sigma(), PairwiseMode::LogitSum, false)
    };
    let mut p = ModelParams::zeros(&c);
    p.obj_trunk.fc1.w[[0, 0]] = 1.0;
    p.obj_trunk.fc2.w[[0, 0]] = 1.0;
    p.obj_cls.w = array![[1.0, -1.0]];
    p.hum_act.b = array![2.0, 1.0];
    p.int_act.as_mut().unwrap().b = array![0.0, 1.5];
    let model = Model::from_parts(c, p).unwrap();
    let x = array![[2.0]];
    let probs = model.forward_object(&x).unwrap().probs(0);
    assert!((probs[0] - 0.982_013_790_037_908_4).abs() < 1e-12);
    assert!((probs[1] - 0.017_986_209_962_091_56).abs() < 1e-12);
    let h = model.forward_human(&x).unwrap().action_scores(0);
    assert!((h[0] - 0.880_797_077_977_882_3).abs() < 1e-12);
    let s = model.forward_interaction(&x, &x).unwrap();
    assert!((s[[0, 1]] - 0.924_141_819_978_756_5).abs() < 1e-12);
}

#[test]
fn action_heads_are_independent() {
    let c = cfg(DensityConfig::fixed_sigma(), PairwiseMode::LogitSum, false);
    let mut model = Model::new(c, 9).unwrap();
    let x = randn(&mut seed::rng(2, &[]), 2, 6);
    let before = model.forward_human(&x).unwrap();
    for r in 0..5 {
        model.params.hum_act.w[[r, 1]] += 0.7;
    }
    model.params.hum_act.b[1] -= 0.3;
    let after = model.forward_human(&x).unwrap();
    for i in 0..2 {
        let (a, b) = (before.action_scores(i), after.action_scores(i));
        assert_eq!(a[0], b[0]);
        assert_eq!(a[2], b[2]);
        assert_ne!(a[1], b[1]);
    }
}

#[test]
fn logit_sum_symmetry_iff_shared() {
    let x = randn(&mut seed::rng(3, &[]), 2, 6);
    let y = randn(&mut seed::rng(4, &[]), 2, 6);
    for share in [true, false] {
        let mut model = Model::new(cfg(DensityConfig::fixed_sigma(), PairwiseMode::LogitSum, share), 5).unwrap();
        randomize(&mut model, 5);
        let a = model.forward_interaction(&x, &y).unwrap();
        let b = model.forward_interaction(&y, &x).unwrap();
        let same = a.iter().zip(b.iter()).all(|(p, q)| (p - q).abs() < 1e-12);
        assert_eq!(same, share);
    }
}

#[test]
fn bce_examples() {
    assert!((bce_loss(0.5, 1.0) - 2f64.ln()).abs() < 1e-15);
    assert!(bce_loss(1.0 - 1e-12, 1.0) < 1.1e-7);
    assert!((bce_loss(0.8808, 0.0) - 2.126_952_524_350_887_8).abs() < 1e-12);
    assert!(bce_loss(0.0, 1.0).is_finite());
}

#[test]
fn loss_total_is_weighted_sum() {
    let c = cfg(DensityConfig::fixed_sigma(), PairwiseMode::LogitSum, false);
    let mut model = Model::new(c, 7).unwrap();
    randomize(&mut model, 7);
    let w = LossWeights::default();
    let (r, _) = image_loss_and_grad(&model, &w, &random_samples(&model.config, 7)).unwrap();
    let expect = r.object_cls + r.object_reg + 2.0 * r.action_cls + r.target_loc + r.interaction_cls;
    assert!((r.total - expect).abs() < 1e-9);
    assert!(r.action_cls > 0.0 && r.object_cls > 0.0 && r.interaction_cls > 0.0);
}

#[test]
fn action_weight_enters_linearly() {
    let c = cfg(DensityConfig::fixed_sigma(), PairwiseMode::LogitSum, false);
    let mut model = Model::new(c, 8).unwrap();
    randomize(&mut model, 8);
    let s = random_samples(&model.config, 8);
    let grad = |a: f64| {
        let w = LossWeights {
            action_cls: a,
            ..LossWeights::default()
        };
        image_loss_and_grad(&model, &w, &s).unwrap().1
    };
    let (g0, g2, g4) = (grad(0.0), grad(2.0), grad(4.0));
    let mut contrib2 = g2.clone();
    contrib2.add_scaled(&g0, -1.0);
    let mut contrib4 = g4.clone();
    contrib4.add_scaled(&g0, -1.0);
    for ((_, _, a), (_, _, b)) in contrib2.tensors().into_iter().zip(contrib4.tensors()) {
        for (x, y) in a.iter().zip(b) {
            assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1e-3));
        }
    }
}

#[test]
fn disabled_interaction_branch_has_no_parameters_or_gradient() {
    let mut c = cfg(DensityConfig::fixed_sigma(), PairwiseMode::LogitSum, false);
    c.use_interaction_branch = false;
    let mut model = Model::new(c, 10).unwrap();
    randomize(&mut model, 10);
    assert!(model.params.int_trunk.is_none() && model.params.int_act.is_none() && model.params.pair_fc1.is_none());
    let mut s = random_samples(&model.config, 10);
    let w = LossWeights::default();
    let (r1, g1) = image_loss_and_grad(&model, &w, &s).unwrap();
    s.interaction = ImageSamples::empty(6, 3).interaction;
    let (r2, g2) = image_loss_and_grad(&model, &w, &s).unwrap();
    assert_eq!(r1.interaction_cls, 0.0);
    assert_eq!(r1, r2);
    assert_eq!(g1, g2);
}

#[test]
fn zero_gradient_at_minimum() {
    // Only the localization term is active and every target equals the
    // current prediction.
    for density in [DensityConfig::fixed_sigma(), DensityConfig::mixture(1, false)] {
        let c = cfg(density, PairwiseMode::LogitSum, false);
        let mut model = Model::new(c, 11).unwrap();
        randomize(&mut model, 11);
        let mut s = random_samples(&model.config, 11);
        let out = model.forward_human(&s.human.features).unwrap();
        for (i, row) in s.human.targets.iter_mut().enumerate() {
            for (slot, t) in row.iter_mut().enumerate() {
                *t = Some(out.mean(i, slot, &model.config.density));
            }
        }
        let w = LossWeights {
            object_cls: 0.0,
            object_reg: 0.0,
            action_cls: 0.0,
            target_loc: 1.0,
            interaction_cls: 0.0,
        };
        let (_, g) = image_loss_and_grad(&model, &w, &s).unwrap();
        for (name, _, t) in g.tensors() {
            assert!(t.iter().all(|v| v.abs() < 1e-15), "{name}");
        }
    }
}

#[test]
fn dimension_mismatch_is_reported() {
    let model = Model::new(cfg(DensityConfig::fixed_sigma(), PairwiseMode::LogitSum, false), 1).unwrap();
    let x = Array2::zeros((2, 5));
    assert!(matches!(model.forward_object(&x), Err(ModelError::Dimension { expected: 6, got: 5 })));
    assert!(matches!(model.forward_human(&x), Err(ModelError::Dimension { .. })));
}

#[test]
fn non_finite_loss_names_the_term() {
    let model = Model::new(cfg(DensityConfig::fixed_sigma(), PairwiseMode::LogitSum, false), 1).unwrap();
    let mut s = random_samples(&model.config, 1);
    s.human.targets[0][0] = Some(RelOffset::new(f64::NAN, 0.0, 0.0, 0.0));
    let err = image_loss_and_grad(&model, &LossWeights::default(), &s).unwrap_err();
    assert!(matches!(err, ModelError::NonFinite { term: "target_loc" }), "{err}");
}

#[test]
fn sgd_examples() {
    let c = HeadConfig {
        feature_dim: 1,
        hidden_dim: 1,
        num_actions: 1,
        num_target_slots: 1,
        num_object_classes: 1,
        ..HeadConfig::default()
    };
    let mut p = ModelParams::zeros(&c);
    p.hum_act.b[0] = 1.0;
    let mut g = p.zeros_like();
    g.hum_act.b[0] = 1.0;

    let mut sgd = Sgd::new(&p, 0.0, 0.0);
    let mut q = p.clone();
    sgd.step(&mut q, &g, 0.001);
    assert!((q.hum_act.b[0] - 0.999).abs() < 1e-15);

    let mut sgd = Sgd::new(&p, 0.9, 0.0);
    let mut q = p.clone();
    sgd.step(&mut q, &p.zeros_like(), 0.1);
    assert_eq!(q, p);

    let mut sgd = Sgd::new(&p, 0.9, 1e-4);
    let mut q = p.clone();
    sgd.step(&mut q, &p.zeros_like(), 0.001);
    assert!((q.hum_act.b[0] - (1.0 - 0.001 * 0.0001)).abs() < 1e-15);

    // momentum accumulates: second step moves by lr * (0.9 * 1 + 1)
    let mut sgd = Sgd::new(&p, 0.9, 0.0);
    let mut q = p.clone();
    sgd.step(&mut q, &g, 0.1);
    sgd.step(&mut q, &g, 0.1);
    assert!((q.hum_act.b[0] - (1.0 - 0.1 - 0.19)).abs() < 1e-12);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    for c in [
        cfg(DensityConfig::fixed_sigma(), PairwiseMode::LogitSum, false),
        cfg(DensityConfig::mixture(2, true), PairwiseMode::ConcatMlp, true),
    ] {
        let mut model = Model::new(c, 12).unwrap();
        randomize(&mut model, 12);
        model.params.obj_cls.b[0] = f64::MIN_POSITIVE;
        let ckpt = Checkpoint {
            model,
            actions: vec![crate::dataset::VerbDef {
                name: "hold".into(),
                roles: vec![crate::dataset::Role::Object],
                person_targets: false,
            }],
            categories: vec!["person".into(), "cup".into(), "ball".into()],
            extra: serde_json::json!({"iteration": 3}),
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ckpt).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, ckpt);
        for ((_, _, a), (_, _, b)) in back.model.params.tensors().into_iter().zip(ckpt.model.params.tensors()) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let mut again = Vec::new();
        write_checkpoint(&mut again, &back).unwrap();
        assert_eq!(again, buf);

        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_checkpoint(extra.as_slice()).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
    }
}

#[test]
fn row_outputs_do_not_depend_on_batch() {
    let mut model = Model::new(cfg(DensityConfig::mixture(2, true), PairwiseMode::ConcatMlp, false), 9).unwrap();
    randomize(&mut model, 9);
    let mut rng = seed::rng(9, &[3]);
    let x = randn(&mut rng, 40, 6);
    let all = model.forward_human(&x).unwrap();
    for i in [0, 17, 39] {
        let one = model.forward_human(&x.slice(ndarray::s![i..i + 1, ..]).to_owned()).unwrap();
        assert_eq!(one.action_logits.row(0), all.action_logits.row(i));
        assert_eq!(one.mu.row(0), all.mu.row(i));
        assert_eq!(one.raw_sigmas.unwrap().row(0), all.raw_sigmas.as_ref().unwrap().row(i));
    }
    let dense = model.params.hum_act.forward(&all.trunk);
    let reference = all.trunk.dot(&model.params.hum_act.w) + &model.params.hum_act.b;
    assert!(dense.iter().zip(&reference).all(|(a, b)| (a - b).abs() < 1e-12));
}
