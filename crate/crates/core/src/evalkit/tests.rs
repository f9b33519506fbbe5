use proptest::prelude::*;
use rand::Rng as _;

use super::*;
use crate::datasynth::{generate, GenConfig};
use crate::encoder::EncoderConfig;
use crate::rng::normal;
use crate::trainkit::Variant;

/// Precision at every positive rank, enumerated directly from pairwise
/// comparisons rather than a sort.
fn brute_ap(scores: &[f64], targets: &[bool]) -> f64 {
    let n = scores.len();
    let ahead = |i: usize, j: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let mut total = 0.0;
    let mut pos = 0;
    for i in (0..n).filter(|&i| targets[i]) {
        pos += 1;
        let rank = 1 + (0..n).filter(|&j| j != i && ahead(i, j)).count();
        let hits = 1 + (0..n).filter(|&j| j != i && targets[j] && ahead(i, j)).count();
        total += hits as f64 / rank as f64;
    }
    total / pos as f64
}

#[test]
fn ap_examples() {
    assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
    assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[false, true, false]).unwrap(), 0.5);
    assert_eq!(average_precision(&[0.3, 0.3], &[true, false]).unwrap(), 1.0);
    assert_eq!(average_precision(&[0.3, 0.3], &[false, true]).unwrap(), 0.5);
    assert!(matches!(average_precision(&[0.1, 0.2], &[false, false]), Err(Error::UndefinedAp)));
    assert!(average_precision(&[0.1], &[true, false]).is_err());
}

#[test]
fn ap_matches_enumeration_for_small_n() {
    let mut rng = stream(11, &[]);
    for n in 1..=6usize {
        for pattern in 1u32..(1 << n) {
            let t: Vec<bool> = (0..n).map(|i| pattern >> i & 1 == 1).collect();
            for draw in 0..20 {
                // Coarse scores on every other draw so ties get exercised.
                let s: Vec<f64> = (0..n)
                    .map(|_| {
                        let u: f64 = rng.random_range(0.0..1.0);
                        if draw % 2 == 0 { (u * 3.0).floor() } else { u }
                    })
                    .collect();
                let got = average_precision(&s, &t).unwrap();
                assert!((got - brute_ap(&s, &t)).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn mean_ap_modes() {
    let targets = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
    let perfect = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8], vec![0.0, 0.0]]).unwrap();
    assert_eq!(mean_ap(&perfect, &targets, ApMode::Micro).unwrap(), 1.0);
    assert_eq!(mean_ap(&perfect, &targets, ApMode::Macro).unwrap(), 1.0);

    // Class 0 ranked first, class 1's positive ranked second.
    let scores = Tensor::from_rows(&[vec![0.9, 0.7], vec![0.2, 0.5], vec![0.0, 0.1]]).unwrap();
    let t = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
    assert_eq!(per_class_ap(&scores, &t).unwrap(), vec![Some(1.0), Some(0.5)]);
    assert_eq!(mean_ap(&scores, &t, ApMode::Macro).unwrap(), 0.75);

    let empty = Tensor::zeros(&[3, 2]);
    assert!(matches!(mean_ap(&scores, &empty, ApMode::Micro), Err(Error::UndefinedAp)));
    assert!(matches!(mean_ap(&scores, &empty, ApMode::Macro), Err(Error::UndefinedAp)));
    assert!(mean_ap(&scores, &Tensor::zeros(&[2, 3]), ApMode::Micro).is_err());
}

#[test]
fn macro_skips_classes_without_positives() {
    let s = Tensor::from_rows(&[vec![0.9, 0.5], vec![0.1, 0.4]]).unwrap();
    let t = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
    assert_eq!(per_class_ap(&s, &t).unwrap(), vec![Some(0.5), None]);
    assert_eq!(mean_ap(&s, &t, ApMode::Macro).unwrap(), 0.5);
}

proptest! {
    #[test]
    fn micro_equals_flattened_ap(seed in any::<u64>()) {
        let mut rng = stream(seed, &[]);
        let s: Vec<f64> = (0..15).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut t: Vec<f64> = (0..15).map(|_| f64::from(u8::from(rng.random_bool(0.4)))).collect();
        t[0] = 1.0;
        let st = Tensor::new(&[5, 3], s.clone()).unwrap();
        let tt = Tensor::new(&[5, 3], t.clone()).unwrap();
        let flags: Vec<bool> = t.iter().map(|&v| v == 1.0).collect();
        let got = mean_ap(&st, &tt, ApMode::Micro).unwrap();
        prop_assert!((got - brute_ap(&s, &flags)).abs() <= 1e-12);
    }

    #[test]
    fn one_class_micro_is_plain_ap(seed in any::<u64>()) {
        let mut rng = stream(seed, &[]);
        let s: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut flags: Vec<bool> = (0..8).map(|_| rng.random_bool(0.5)).collect();
        flags[3] = true;
        let t: Vec<f64> = flags.iter().map(|&b| f64::from(u8::from(b))).collect();
        let micro = mean_ap(
            &Tensor::new(&[8, 1], s.clone()).unwrap(),
            &Tensor::new(&[8, 1], t).unwrap(),
            ApMode::Micro,
        ).unwrap();
        prop_assert_eq!(micro, average_precision(&s, &flags).unwrap());
    }

    #[test]
    fn ap_lies_in_unit_interval(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = stream(seed, &[]);
        let s: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let mut t: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        t[n - 1] = true;
        let ap = average_precision(&s, &t).unwrap();
        prop_assert!(ap > 0.0 && ap <= 1.0);
    }
}

fn table(features: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> FeatureTable {
    FeatureTable {
        ids: (0..features.len() as u32).collect(),
        features: Tensor::from_rows(&features).unwrap(),
        targets: Tensor::from_rows(&targets).unwrap(),
    }
}

/// Targets are thresholds of fixed random projections of the features.
fn separable(n: usize, seed: u64) -> FeatureTable {
    let mut rng = stream(seed, &[]);
    let mut r = stream(5, &[]);
    let dirs: Vec<Vec<f64>> = (0..3).map(|_| (0..8).map(|_| normal(&mut r)).collect()).collect();
    let mut x = Vec::new();
    let mut y = Vec::new();
    while x.len() < n {
        let f: Vec<f64> = (0..8).map(|_| normal(&mut rng)).collect();
        let proj: Vec<f64> = dirs.iter().map(|d| d.iter().zip(&f).map(|(a, b)| a * b).sum()).collect();
        // Keep a margin so the classes are strictly separable.
        if proj.iter().any(|p: &f64| p.abs() < 0.3) {
            continue;
        }
        y.push(proj.iter().map(|&p| f64::from(u8::from(p > 0.0))).collect());
        x.push(f);
    }
    table(x, y)
}

#[test]
fn probe_fits_separable_features() {
    let cfg = ProbeConfig {
        epochs: 60,
        ..ProbeConfig::default()
    };
    let r = linear_probe(&separable(600, 1), &separable(200, 2), &cfg).unwrap();
    assert!(r.micro_map >= 0.99, "micro {}", r.micro_map);
    assert!(r.per_class.iter().flatten().all(|ap| (0.0..=1.0).contains(ap)));
    assert!((0.0..=1.0).contains(&r.macro_map));
}

#[test]
fn probe_on_noise_scores_near_prevalence() {
    let noise = |n: usize, seed: u64| {
        let mut rng = stream(seed, &[]);
        let x = (0..n).map(|_| (0..8).map(|_| normal(&mut rng)).collect()).collect();
        let y = (0..n)
            .map(|_| (0..4).map(|_| f64::from(u8::from(rng.random_bool(0.3)))).collect())
            .collect();
        table(x, y)
    };
    let test = noise(2000, 4);
    let prevalence = test.targets.data().iter().sum::<f64>() / test.targets.len() as f64;
    let cfg = ProbeConfig {
        epochs: 20,
        ..ProbeConfig::default()
    };
    let r = linear_probe(&noise(1000, 3), &test, &cfg).unwrap();
    assert!((r.micro_map - prevalence).abs() <= 0.05, "{} vs {prevalence}", r.micro_map);
}

#[test]
fn probe_rejects_degenerate_tables() {
    let t = separable(10, 1);
    let empty = FeatureTable {
        ids: vec![],
        features: Tensor::zeros(&[0, 8]),
        targets: Tensor::zeros(&[0, 3]),
    };
    assert!(linear_probe(&empty, &t, &ProbeConfig::default()).is_err());
    assert!(linear_probe(&t, &empty, &ProbeConfig::default()).is_err());
    let narrow = table(vec![vec![0.0; 4]; 2], vec![vec![1.0, 0.0, 0.0]; 2]);
    assert!(linear_probe(&t, &narrow, &ProbeConfig::default()).is_err());
}

fn tiny() -> (Dataset, EncoderParams) {
    let ds = generate(&GenConfig {
        num_scenes: 40,
        size: 16,
        ..GenConfig::default()
    })
    .unwrap();
    let cfg = EncoderConfig {
        image_size: 16,
        d_model: 16,
        heads: 2,
        blocks: 1,
        mlp_hidden: 32,
        ..EncoderConfig::default()
    };
    let enc = EncoderParams::init(cfg, &mut stream(0, &[])).unwrap();
    (ds, enc)
}

#[test]
fn extraction_is_deterministic_and_leaves_encoder_alone() {
    let (ds, enc) = tiny();
    let before = enc.clone();
    let a = extract_features(&enc, &ds, Split::Test).unwrap();
    let b = extract_features(&enc, &ds, Split::Test).unwrap();
    assert_eq!(a, b);
    assert_eq!(enc, before);
    assert_eq!(a.len(), ds.split(Split::Test).len());
    assert_eq!(a.features.dims(), &[a.len(), 16]);
    let single = enc.encode(&ds.split(Split::Test)[0].seasons[0], None).unwrap().0;
    for (x, y) in a.features.row(0).iter().zip(&single) {
        assert!((x - y).abs() < 1e-12);
    }
    let report = probe_encoder(&enc, &ds, &ProbeConfig { epochs: 2, ..ProbeConfig::default() }).unwrap();
    assert_eq!(enc, before);
    assert!((0.0..=1.0).contains(&report.micro_map));
}

#[test]
fn extraction_rejects_mismatched_encoder() {
    let (ds, enc) = tiny();
    let other = EncoderParams::init(
        EncoderConfig {
            channels: 13,
            ..enc.config.clone()
        },
        &mut stream(0, &[]),
    )
    .unwrap();
    assert!(matches!(extract_features(&other, &ds, Split::Train), Err(Error::Architecture(_))));
}

#[test]
fn plan_and_csv_layout() {
    let plan = AblationPlan {
        variants: vec![Variant::ContrastOnly, Variant::ContrastSoftcon],
        lambdas: vec![0.01, 0.1, 0.5, 1.0],
        mask_ratios: vec![0.2],
        inits: vec![InitMode::Scratch],
        seeds: vec![0, 1, 2],
    };
    assert_eq!(plan.runs().len(), 24);
    let rows: Vec<AblationRow> = plan.runs()[..3]
        .iter()
        .enumerate()
        .map(|(i, run)| AblationRow {
            run: *run,
            micro_map: 0.5 + 0.1 * i as f64,
            macro_map: 0.4,
        })
        .collect();
    let s = summarize(&rows);
    assert_eq!(s.len(), 1);
    assert!((s[0].micro_mean - 0.6).abs() < 1e-12);
    assert!((s[0].micro_std - (0.02f64 / 3.0).sqrt()).abs() < 1e-12);
    let csv = ablation_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], ABLATION_HEADER);
    assert_eq!(lines[1], "contrast-only,0.01,0.2,scratch,0,0.500000,0.400000");
    assert_eq!(lines[4], "contrast-only,0.01,0.2,scratch,mean,0.600000,0.400000");
    assert!(lines[5].starts_with("contrast-only,0.01,0.2,scratch,std,"));
    assert_eq!(lines.len(), 6);
}

#[test]
fn single_run_report_has_one_row() {
    let (ds, enc) = tiny();
    let base = crate::trainkit::TrainConfig {
        encoder: enc.config.clone(),
        augment: crate::trainkit::AugmentPolicy::standard(16),
        batch_size: 8,
        epochs: 1,
        warmup_epochs: 0,
        projector_hidden: 16,
        projector_dim: 8,
        ..Default::default()
    };
    let plan = AblationPlan {
        variants: vec![Variant::ContrastSupcon],
        lambdas: vec![0.1],
        mask_ratios: vec![0.2],
        inits: vec![InitMode::Scratch],
        seeds: vec![3],
    };
    let probe = ProbeConfig {
        epochs: 2,
        ..ProbeConfig::default()
    };
    let rows = ablation_report(&plan, &ds, &base, &probe, None).unwrap();
    assert_eq!(rows.len(), 1);
    assert!((0.0..=1.0).contains(&rows[0].micro_map));
    let continual = AblationPlan {
        inits: vec![InitMode::Continual],
        ..plan
    };
    assert!(ablation_report(&continual, &ds, &base, &probe, None).is_err());
}
