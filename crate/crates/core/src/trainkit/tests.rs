use super::*;
use crate::datasynth::{generate, GenConfig};
use crate::losses::{info_nce_node, softcon_node};

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        encoder: EncoderConfig {
            image_size: 16,
            patch_size: 4,
            d_model: 16,
            heads: 2,
            blocks: 1,
            mlp_hidden: 32,
            ..EncoderConfig::default()
        },
        projector_hidden: 32,
        projector_dim: 8,
        augment: AugmentPolicy::standard(16),
        batch_size: 16,
        epochs: 2,
        warmup_epochs: 1,
        ..TrainConfig::default()
    }
}

fn toy(num_scenes: usize) -> Dataset {
    generate(&GenConfig {
        num_scenes,
        size: 16,
        ..GenConfig::default()
    })
    .unwrap()
}

fn views(ds: &Dataset, n: usize) -> Vec<SceneViews<'_>> {
    ds.scenes[..n].iter().map(|s| SceneViews::from_scene(s).unwrap()).collect()
}

#[test]
fn view_pairs_are_uniform() {
    assert_eq!(select_views(1, &mut stream(0, &[])), (0, 0));
    let mut rng = stream(4, &[]);
    let draws = 10_000;
    let mut counts = [[0usize; 4]; 4];
    for _ in 0..draws {
        let (a, b) = select_views(4, &mut rng);
        counts[a][b] += 1;
    }
    for (a, row) in counts.iter().enumerate() {
        assert_eq!(row[a], 0);
        for (b, &c) in row.iter().enumerate().filter(|&(b, _)| b != a) {
            let f = c as f64 / draws as f64;
            assert!((f - 1.0 / 12.0).abs() <= 0.01, "({a},{b}) at {f}");
        }
    }
    let again = select_views(4, &mut stream(9, &[]));
    assert_eq!(again, select_views(4, &mut stream(9, &[])));
}

#[test]
fn zero_lambda_total_is_contrast() {
    let ds = toy(24);
    let cfg = TrainConfig {
        lambda: 0.0,
        ..tiny_cfg()
    };
    let state = TrainState::new(&cfg, None).unwrap();
    let prep = prepare_batch(&views(&ds, 8), &cfg, 0).unwrap();
    let out = loss_and_gradients(&prep, &state, &cfg).unwrap();
    assert!((out.total - out.contrast).abs() <= 1e-12);
    assert!(out.softcon > 0.0);
}

#[test]
fn supcon_term_uses_its_own_weight() {
    let ds = toy(24);
    for w in [0.0, 0.3, 1.0] {
        let cfg = TrainConfig {
            variant: Variant::ContrastSupcon,
            supcon_weight: w,
            lambda: 7.0,
            ..tiny_cfg()
        };
        let state = TrainState::new(&cfg, None).unwrap();
        let prep = prepare_batch(&views(&ds, 8), &cfg, 0).unwrap();
        let out = loss_and_gradients(&prep, &state, &cfg).unwrap();
        assert!((out.total - out.contrast - w * out.softcon).abs() <= 1e-12);
    }
}

#[test]
fn gradients_cover_only_used_heads() {
    let ds = toy(24);
    for variant in Variant::ALL {
        let cfg = TrainConfig { variant, ..tiny_cfg() };
        let state = TrainState::new(&cfg, None).unwrap();
        let prep = prepare_batch(&views(&ds, 8), &cfg, 0).unwrap();
        let out = loss_and_gradients(&prep, &state, &cfg).unwrap();
        assert!(out.gradients.keys().all(|k| state.pair.base.get(k).is_some()));
        let has = |p: &str| out.gradients.keys().any(|k| k.starts_with(p));
        assert!(has(ENCODER_PREFIX));
        assert_eq!(has(CONTRAST_PREFIX), variant != Variant::SoftconOnly, "{variant:?}");
        assert_eq!(has(SOFT_PREFIX), variant != Variant::ContrastOnly, "{variant:?}");
    }
}

/// Builds both branches in one graph with the momentum parameters bound as
/// frozen inputs; its base gradients must equal the two-graph pipeline's.
#[test]
fn momentum_branch_receives_no_gradient() {
    let ds = toy(40);
    let cfg = TrainConfig {
        queue: true,
        queue_size: 16,
        batch_size: 8,
        ..tiny_cfg()
    };
    let mut state = TrainState::new(&cfg, None).unwrap();
    let schedule = Schedule::new(1e-2, 0, 1, 3).unwrap();
    for _ in 0..3 {
        train_step(&views(&ds, 8), &mut state, &cfg, &schedule, 0).unwrap();
    }
    assert!(state.pair.base.distance(&state.pair.momentum) > 0.0);

    let batch = views(&ds, 8);
    let prep = prepare_batch(&batch, &cfg, 1).unwrap();
    let split = loss_and_gradients(&prep, &state, &cfg).unwrap();

    let mut bound = state.pair.base.clone();
    bound.extend_prefixed("m.", &state.pair.momentum);
    let n = batch.len();
    let mut g = Graph::new();
    let (fm, _) = build_encoder(&mut g, "m.encoder.", &state.encoder, &prep.momentum_patches, None, false).unwrap();
    let kc = build_projector(&mut g, "m.proj_contrast.", fm, false);
    let ks = build_projector(&mut g, "m.proj_soft.", fm, false);
    let (f, _) = build_encoder(&mut g, ENCODER_PREFIX, &state.encoder, &prep.base_patches, Some(&prep.masks), true).unwrap();
    let qc = build_projector(&mut g, CONTRAST_PREFIX, f, true);
    let qs = build_projector(&mut g, SOFT_PREFIX, f, true);
    let queue = g.constant(state.queue.as_ref().unwrap().to_tensor());
    // Keys [kc; queue] stacked with selection matrices.
    let sa = g.constant(select(n, n + 16, 0));
    let sb = g.constant(select(16, n + 16, n));
    let top = g.matmul(sa, kc);
    let bottom = g.matmul(sb, queue);
    let keys = g.add(top, bottom);
    let xc = g.matmul_nt(qc, keys);
    let c = info_nce_node(&mut g, xc, n, n + 16, cfg.temperature);
    let xs = g.matmul_nt(qs, ks);
    let s = softcon_node(&mut g, xs, &batch_label_similarity(&prep.labels).unwrap());
    let s = g.scale(s, cfg.lambda);
    let total = g.add(c, s);
    let loss = g.scale(total, 1.0 / n as f64);
    g.set_output(loss);
    let joint_total = g.forward(&bound).unwrap();
    let joint = g.backward().unwrap();

    assert!((joint_total - split.total).abs() <= 1e-12);
    assert!(joint.keys().all(|k| !k.starts_with("m.")));
    assert_eq!(joint.keys().collect::<Vec<_>>(), split.gradients.keys().collect::<Vec<_>>());
    for (k, a) in &joint {
        assert!(a.max_abs_diff(&split.gradients[k]) <= 1e-12, "{k}");
    }
}

/// `(n + q) × rows` matrix placing a `rows × rows` identity at row `at`.
fn select(rows: usize, total: usize, at: usize) -> Tensor {
    let mut t = Tensor::zeros(&[total, rows]);
    for i in 0..rows {
        t.data_mut()[(at + i) * rows + i] = 1.0;
    }
    t
}

#[test]
fn one_step_replays_ema_formula() {
    let ds = toy(24);
    let cfg = tiny_cfg();
    let mut state = TrainState::new(&cfg, None).unwrap();
    let schedule = Schedule::new(1e-2, 0, 1, 1).unwrap();
    let before = state.pair.momentum.clone();
    train_step(&views(&ds, 8), &mut state, &cfg, &schedule, 0).unwrap();
    let m = cfg.momentum;
    for (name, mom) in state.pair.momentum.iter() {
        let base = state.pair.base.get(name).unwrap();
        let prev = before.get(name).unwrap();
        for ((x, b), p) in mom.data().iter().zip(base.data()).zip(prev.data()) {
            assert_eq!(*x, m * p + (1.0 - m) * b, "{name}");
        }
    }
    assert_eq!(state.step, 1);
}

#[test]
fn toy_run_reduces_loss() {
    let ds = toy(80);
    let cfg = TrainConfig {
        base_lr: 3e-3,
        warmup_epochs: 0,
        ..tiny_cfg()
    };
    let batch = views(&ds, 64);
    let mut state = TrainState::new(&cfg, None).unwrap();
    let steps = 50;
    let schedule = Schedule::new(cfg.base_lr, 0, 1, steps).unwrap();
    let chunks: Vec<&[SceneViews]> = batch.chunks(16).collect();
    let losses: Vec<f64> = (0..steps)
        .map(|s| {
            train_step(chunks[s % chunks.len()], &mut state, &cfg, &schedule, s / chunks.len())
                .unwrap()
                .total
        })
        .collect();
    let first: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let last: f64 = losses[steps - 10..].iter().sum::<f64>() / 10.0;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn random_steps_stay_finite() {
    let ds = toy(48);
    let batch = views(&ds, 48);
    for (i, variant) in Variant::ALL.into_iter().enumerate() {
        let cfg = TrainConfig {
            variant,
            batch_size: 4,
            lambda: [0.01, 0.1, 0.5, 1.0][i],
            mask_ratio: [0.0, 0.2, 0.5, 0.75][i],
            queue: i % 2 == 1,
            queue_size: 8,
            seed: i as u64,
            ..tiny_cfg()
        };
        let steps = 250;
        let schedule = Schedule::new(5e-3, 0, 1, steps).unwrap();
        let mut state = TrainState::new(&cfg, None).unwrap();
        for s in 0..steps {
            let at = (s * 4) % 44;
            let m = train_step(&batch[at..at + 4], &mut state, &cfg, &schedule, s).unwrap();
            assert!(m.total.is_finite() && m.contrast.is_finite() && m.softcon.is_finite());
        }
        assert!(state.pair.base.iter().all(|(_, t)| t.is_finite()));
    }
}

#[test]
fn token_count_follows_mask_ratio() {
    let ds = toy(24);
    for (r, tokens) in [(0.0, 16), (0.2, 13), (0.5, 8)] {
        let cfg = TrainConfig {
            mask_ratio: r,
            ..tiny_cfg()
        };
        let mut state = TrainState::new(&cfg, None).unwrap();
        let schedule = Schedule::new(1e-3, 0, 1, 1).unwrap();
        let m = train_step(&views(&ds, 4), &mut state, &cfg, &schedule, 0).unwrap();
        assert_eq!(m.tokens_per_image, tokens);
    }
}

#[test]
fn zero_epochs_returns_initialization() {
    let ds = toy(24);
    let cfg = TrainConfig {
        epochs: 0,
        ..tiny_cfg()
    };
    let out = pretrain(&ds, &cfg, None, &BTreeMap::new(), None).unwrap();
    let init = TrainState::new(&cfg, None).unwrap();
    assert_eq!(out.checkpoint.params(), init.pair.base);
    assert!(out.history.is_empty());
    assert_eq!(out.checkpoint.metadata["step"], "0");
}

#[test]
fn identical_seeds_give_identical_artifacts() {
    let ds = toy(40);
    let cfg = tiny_cfg();
    let run = || {
        let mut csv = Vec::new();
        let out = pretrain(&ds, &cfg, None, &BTreeMap::new(), Some(&mut csv)).unwrap();
        (out.checkpoint.to_bytes().unwrap(), csv)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a, b);
    assert_eq!(ma, mb);
    let text = String::from_utf8(ma).unwrap();
    assert!(text.starts_with(METRICS_HEADER));
    let other = pretrain(&ds, &TrainConfig { seed: 1, ..cfg.clone() }, None, &BTreeMap::new(), None).unwrap();
    assert_ne!(other.checkpoint.to_bytes().unwrap(), a);
}

#[test]
fn continual_encoder_must_match_config() {
    let cfg = tiny_cfg();
    let other = EncoderParams::init(
        EncoderConfig {
            d_model: 8,
            ..cfg.encoder.clone()
        },
        &mut stream(0, &[]),
    )
    .unwrap();
    assert!(TrainState::new(&cfg, Some(other)).is_err());
}

#[test]
fn mismatched_dataset_is_rejected() {
    let ds = toy(10);
    let cfg = TrainConfig {
        encoder: EncoderConfig {
            channels: 13,
            ..tiny_cfg().encoder
        },
        ..tiny_cfg()
    };
    assert!(pretrain(&ds, &cfg, None, &BTreeMap::new(), None).is_err());
}
