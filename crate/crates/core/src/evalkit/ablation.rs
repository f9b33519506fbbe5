use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{probe_encoder, ProbeConfig};
use crate::checkpoint::Checkpoint;
use crate::datasynth::Dataset;
use crate::encoder::init_continual;
use crate::error::{Error, Result};
use crate::rng::{purpose, stream};
use crate::trainkit::{pretrain, TrainConfig, Variant};

pub const ABLATION_HEADER: &str = "variant,lambda,mask_ratio,init,seed,micro_map,macro_map";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum InitMode {
    Scratch,
    /// Encoder copied from a source checkpoint, patch embedding redrawn when
    /// the channel count changes.
    Continual,
}

impl InitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InitMode::Scratch => "scratch",
            InitMode::Continual => "continual",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(InitMode::Scratch),
            "continual" => Ok(InitMode::Continual),
            _ => Err(Error::Invalid(format!("unknown init mode `{s}`"))),
        }
    }
}

/// One pretrain-then-probe experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationRun {
    pub variant: Variant,
    pub lambda: f64,
    pub mask_ratio: f64,
    pub init: InitMode,
    pub seed: u64,
}

/// Cartesian grid of runs.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationPlan {
    pub variants: Vec<Variant>,
    pub lambdas: Vec<f64>,
    pub mask_ratios: Vec<f64>,
    pub inits: Vec<InitMode>,
    pub seeds: Vec<u64>,
}

impl AblationPlan {
    /// Runs ordered by variant, λ, mask ratio, init, then seed.
    pub fn runs(&self) -> Vec<AblationRun> {
        let mut out = Vec::new();
        for &variant in &self.variants {
            for &lambda in &self.lambdas {
                for &mask_ratio in &self.mask_ratios {
                    for &init in &self.inits {
                        for &seed in &self.seeds {
                            out.push(AblationRun {
                                variant,
                                lambda,
                                mask_ratio,
                                init,
                                seed,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationRow {
    pub run: AblationRun,
    pub micro_map: f64,
    pub macro_map: f64,
}

/// Mean and population standard deviation over the seeds of one setting.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationSummary {
    pub variant: Variant,
    pub lambda: f64,
    pub mask_ratio: f64,
    pub init: InitMode,
    pub runs: usize,
    pub micro_mean: f64,
    pub micro_std: f64,
    pub macro_mean: f64,
    pub macro_std: f64,
}

/// Pretrains and probes every run of `plan`. Continual runs start from
/// `source`, which must then be given.
pub fn ablation_report(
    plan: &AblationPlan,
    ds: &Dataset,
    base: &TrainConfig,
    probe: &ProbeConfig,
    source: Option<&Checkpoint>,
) -> Result<Vec<AblationRow>> {
    let runs = plan.runs();
    if runs.is_empty() {
        return Err(Error::Invalid("ablation plan has no runs".into()));
    }
    runs.iter().map(|run| run_ablation(run, ds, base, probe, source)).collect()
}

pub fn run_ablation(
    run: &AblationRun,
    ds: &Dataset,
    base: &TrainConfig,
    probe: &ProbeConfig,
    source: Option<&Checkpoint>,
) -> Result<AblationRow> {
    let cfg = TrainConfig {
        variant: run.variant,
        lambda: run.lambda,
        mask_ratio: run.mask_ratio,
        seed: run.seed,
        ..base.clone()
    };
    let init = match run.init {
        InitMode::Scratch => None,
        InitMode::Continual => {
            let src = source.ok_or_else(|| {
                Error::Invalid("continual run without a source checkpoint".into())
            })?;
            let mut rng = stream(run.seed, &[purpose::CONTINUAL]);
            Some(init_continual(src, ds.channels, &mut rng)?)
        }
    };
    let out = pretrain(ds, &cfg, init, &BTreeMap::new(), None)?;
    let report = probe_encoder(
        &out.state.encoder_params(),
        ds,
        &ProbeConfig {
            seed: run.seed,
            ..probe.clone()
        },
    )?;
    Ok(AblationRow {
        run: *run,
        micro_map: report.micro_map,
        macro_map: report.macro_map,
    })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Groups rows by everything but the seed, in first-appearance order.
pub fn summarize(rows: &[AblationRow]) -> Vec<AblationSummary> {
    let mut groups: Vec<(AblationRun, Vec<&AblationRow>)> = Vec::new();
    for row in rows {
        let same = |r: &AblationRun| {
            r.variant == row.run.variant
                && r.lambda == row.run.lambda
                && r.mask_ratio == row.run.mask_ratio
                && r.init == row.run.init
        };
        match groups.iter_mut().find(|(r, _)| same(r)) {
            Some((_, g)) => g.push(row),
            None => groups.push((row.run, vec![row])),
        }
    }
    groups
        .into_iter()
        .map(|(r, g)| {
            let micro: Vec<f64> = g.iter().map(|x| x.micro_map).collect();
            let macro_: Vec<f64> = g.iter().map(|x| x.macro_map).collect();
            let (micro_mean, micro_std) = mean_std(&micro);
            let (macro_mean, macro_std) = mean_std(&macro_);
            AblationSummary {
                variant: r.variant,
                lambda: r.lambda,
                mask_ratio: r.mask_ratio,
                init: r.init,
                runs: g.len(),
                micro_mean,
                micro_std,
                macro_mean,
                macro_std,
            }
        })
        .collect()
}

/// Per-run rows followed by a `mean` and a `std` row per setting, with the
/// statistic's name in the seed column.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6},{:.6}",
            r.run.variant.as_str(),
            r.run.lambda,
            r.run.mask_ratio,
            r.run.init.as_str(),
            r.run.seed,
            r.micro_map,
            r.macro_map
        );
    }
    for s in summarize(rows) {
        for (tag, micro, macro_) in [
            ("mean", s.micro_mean, s.macro_mean),
            ("std", s.micro_std, s.macro_std),
        ] {
            let _ = writeln!(
                out,
                "{},{},{},{},{tag},{micro:.6},{macro_:.6}",
                s.variant.as_str(),
                s.lambda,
                s.mask_ratio,
                s.init.as_str()
            );
        }
    }
    out
}
