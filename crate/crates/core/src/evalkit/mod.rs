//! Frozen-encoder evaluation: feature extraction, average precision, linear
//! probing, and the ablation harness.

mod ablation;
mod metrics;

pub use ablation::{
    ablation_csv, ablation_report, run_ablation, summarize, AblationPlan, AblationRow, AblationRun,
    AblationSummary, InitMode, ABLATION_HEADER,
};
pub use metrics::{average_precision, mean_ap, per_class_ap, ApMode};

use rand::seq::SliceRandom;

use crate::datasynth::{Dataset, Split};
use crate::encoder::{EncoderParams, ParamSet};
use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor};
use crate::rng::{purpose, stream};
use crate::trainkit::{cosine_warmup_lr, AdamState, AdamW, Schedule};

const EXTRACT_BATCH: usize = 256;

/// Frozen features and binary multi-label targets, one row per scene.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub ids: Vec<u32>,
    pub features: Tensor,
    pub targets: Tensor,
}

impl FeatureTable {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Unmasked features of each scene's first season, in dataset order.
pub fn extract_features(enc: &EncoderParams, ds: &Dataset, split: Split) -> Result<FeatureTable> {
    let c = &enc.config;
    if ds.channels != c.channels || ds.size != c.image_size {
        return Err(Error::Architecture(vec![format!(
            "encoder expects {}×{}×{} images, dataset has {}×{}×{}",
            c.channels, c.image_size, c.image_size, ds.channels, ds.size, ds.size
        )]));
    }
    let scenes = ds.split(split);
    if scenes.is_empty() {
        return Err(Error::Invalid(format!("{} split is empty", split.as_str())));
    }
    let mut features = Vec::with_capacity(scenes.len() * c.d_model);
    for chunk in scenes.chunks(EXTRACT_BATCH) {
        let images: Vec<&Tensor> = chunk.iter().map(|s| &s.seasons[0]).collect();
        features.extend_from_slice(enc.encode_batch(&images)?.data());
    }
    let nc = ds.num_classes;
    let mut targets = vec![0.0; scenes.len() * nc];
    for (i, s) in scenes.iter().enumerate() {
        for j in s.label.indices() {
            targets[i * nc + j] = 1.0;
        }
    }
    Ok(FeatureTable {
        ids: scenes.iter().map(|s| s.id).collect(),
        features: Tensor::new(&[scenes.len(), c.d_model], features)?,
        targets: Tensor::new(&[scenes.len(), nc], targets)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Standardize features with train-split statistics before fitting.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.05,
            batch_size: 256,
            weight_decay: 1e-4,
            standardize: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub micro_map: f64,
    pub macro_map: f64,
    pub per_class: Vec<Option<f64>>,
    pub config: ProbeConfig,
}

fn standardizer(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, d) = x.shape2()?;
    let mut mean = vec![0.0; d];
    for row in x.data().chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n as f64);
    }
    let mut var = vec![0.0; d];
    for row in x.data().chunks(d) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m) / n as f64;
        }
    }
    Ok((mean, var.into_iter().map(|v| 1.0 / (v.sqrt() + 1e-6)).collect()))
}

fn apply(x: &Tensor, mean: &[f64], inv_std: &[f64]) -> Tensor {
    let d = mean.len();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        for ((v, m), s) in row.iter_mut().zip(mean).zip(inv_std) {
            *v = (*v - m) * s;
        }
    }
    out
}

/// Scores of a fitted affine layer on `x`.
fn scores(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut s = x.matmul(w)?;
    let c = b.len();
    for row in s.data_mut().chunks_mut(c) {
        row.iter_mut().zip(b.data()).for_each(|(v, bi)| *v += bi);
    }
    Ok(s)
}

/// Fits an affine multi-label classifier on `train` with elementwise BCE and
/// reports mAP on `test`. Only the probe's own weights are trained.
pub fn linear_probe(train: &FeatureTable, test: &FeatureTable, cfg: &ProbeConfig) -> Result<ProbeReport> {
    let (n, d) = train.features.shape2()?;
    let (_, c) = train.targets.shape2()?;
    if n == 0 || test.is_empty() {
        return Err(Error::Invalid("probe needs nonempty train and test splits".into()));
    }
    if test.features.dims()[1] != d || test.targets.dims()[1] != c {
        return Err(Error::shape("linear_probe", "train and test tables disagree"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Invalid("probe batch size must be positive".into()));
    }
    let (xtr, xte) = if cfg.standardize {
        let (m, s) = standardizer(&train.features)?;
        (apply(&train.features, &m, &s), apply(&test.features, &m, &s))
    } else {
        (train.features.clone(), test.features.clone())
    };

    let mut params = ParamSet::new();
    params.insert("probe.weight", Tensor::zeros(&[d, c]));
    params.insert("probe.bias", Tensor::zeros(&[c]));
    let mut adam = AdamState::new(&params);
    let opt = AdamW {
        weight_decay: cfg.weight_decay,
        ..AdamW::default()
    };
    let b = cfg.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(b);
    let schedule = Schedule::new(cfg.lr, 0, cfg.epochs, steps_per_epoch)?;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(cfg.seed, &[purpose::PROBE, epoch as u64]));
        for chunk in order.chunks(b) {
            let rows = |t: &Tensor, width: usize| {
                let data = chunk.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
                Tensor::new(&[chunk.len(), width], data)
            };
            let mut g = Graph::new();
            let x = g.constant(rows(&xtr, d)?);
            let w = g.input("probe.weight");
            let bias = g.input("probe.bias");
            let z = g.matmul(x, w);
            let z = g.add(z, bias);
            let l = g.bce_with_logits(z, rows(&train.targets, c)?);
            let l = g.mean(l, None);
            g.set_output(l);
            g.forward(&params)?;
            let grads = g.backward()?;
            step += 1;
            let lr = cosine_warmup_lr(step, &schedule)?;
            opt.step(&mut params, &grads, &mut adam, lr)?;
        }
    }
    let s = scores(&xte, params.require("probe.weight")?, params.require("probe.bias")?)?;
    Ok(ProbeReport {
        micro_map: mean_ap(&s, &test.targets, ApMode::Micro)?,
        macro_map: mean_ap(&s, &test.targets, ApMode::Macro)?,
        per_class: per_class_ap(&s, &test.targets)?,
        config: cfg.clone(),
    })
}

/// Extracts both splits and probes them.
pub fn probe_encoder(enc: &EncoderParams, ds: &Dataset, cfg: &ProbeConfig) -> Result<ProbeReport> {
    let train = extract_features(enc, ds, Split::Train)?;
    let test = extract_features(enc, ds, Split::Test)?;
    linear_probe(&train, &test, cfg)
}

#[cfg(test)]
mod tests;
