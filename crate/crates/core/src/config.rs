//! Flat `key = value` run configuration.
//!
//! Every tunable has one dotted key. Files hold one assignment per line with
//! `#` starting a comment; command-line overrides go through [`RunConfig::set`]
//! after the file, so flags win. [`RunConfig::echo`] lists every key with its
//! effective value and parses back to the same config.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::datasynth::GenConfig;
use crate::encoder::EncoderKind;
use crate::error::{Error, Result};
use crate::evalkit::ProbeConfig;
use crate::trainkit::{TrainConfig, Variant};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub data: GenConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Invalid(format!("`{key}`: cannot parse `{value}`: {e}")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(Error::Invalid(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

fn list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|v| num(key, v.trim())).collect()
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Defaults with `text` applied on top, then validated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies every assignment of `text` without validating.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Invalid(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (d, t, p) = (&mut self.data, &mut self.train, &mut self.probe);
        let e = &mut t.encoder;
        let a = &mut t.augment;
        match key {
            "data.num_scenes" => d.num_scenes = num(key, value)?,
            "data.channels" => d.channels = num(key, value)?,
            "data.size" => d.size = num(key, value)?,
            "data.num_classes" => d.num_classes = num(key, value)?,
            "data.label_counts" => d.label_counts = list(key, value)?,
            "data.season_counts" => d.season_counts = list(key, value)?,
            "data.noise_std" => d.noise_std = num(key, value)?,
            "data.seed" => d.seed = num(key, value)?,
            "encoder.kind" => e.kind = EncoderKind::parse(value)?,
            "encoder.channels" => e.channels = num(key, value)?,
            "encoder.image_size" => {
                e.image_size = num(key, value)?;
                a.crop_size = e.image_size;
            }
            "encoder.patch_size" => e.patch_size = num(key, value)?,
            "encoder.d_model" => e.d_model = num(key, value)?,
            "encoder.heads" => e.heads = num(key, value)?,
            "encoder.blocks" => e.blocks = num(key, value)?,
            "encoder.mlp_hidden" => e.mlp_hidden = num(key, value)?,
            "projector.hidden" => t.projector_hidden = num(key, value)?,
            "projector.dim" => t.projector_dim = num(key, value)?,
            "train.variant" => t.variant = Variant::parse(value)?,
            "train.temperature" => t.temperature = num(key, value)?,
            "train.lambda" => t.lambda = num(key, value)?,
            "train.supcon_weight" => t.supcon_weight = num(key, value)?,
            "train.momentum" => t.momentum = num(key, value)?,
            "train.mask_ratio" => t.mask_ratio = num(key, value)?,
            "train.queue" => t.queue = flag(key, value)?,
            "train.queue_size" => t.queue_size = num(key, value)?,
            "train.batch_size" => t.batch_size = num(key, value)?,
            "train.epochs" => t.epochs = num(key, value)?,
            "train.warmup_epochs" => t.warmup_epochs = num(key, value)?,
            "train.base_lr" => t.base_lr = num(key, value)?,
            "train.weight_decay" => t.optimizer.weight_decay = num(key, value)?,
            "train.seed" => t.seed = num(key, value)?,
            "augment.min_scale" => a.min_scale = num(key, value)?,
            "augment.hflip_p" => a.hflip_p = num(key, value)?,
            "augment.vflip_p" => a.vflip_p = num(key, value)?,
            "augment.jitter_p" => a.jitter_p = num(key, value)?,
            "augment.jitter" => a.jitter = num(key, value)?,
            "augment.grey_p" => a.grey_p = num(key, value)?,
            "augment.blur_p" => a.blur_p = num(key, value)?,
            "probe.epochs" => p.epochs = num(key, value)?,
            "probe.lr" => p.lr = num(key, value)?,
            "probe.batch_size" => p.batch_size = num(key, value)?,
            "probe.weight_decay" => p.weight_decay = num(key, value)?,
            "probe.standardize" => p.standardize = flag(key, value)?,
            "probe.seed" => p.seed = num(key, value)?,
            _ => return Err(Error::Usage(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        let p = &self.probe;
        if p.epochs == 0 || p.batch_size == 0 {
            return Err(Error::Invalid("probe epochs and batch size must be positive".into()));
        }
        if !(p.lr > 0.0 && p.lr.is_finite()) || !(p.weight_decay >= 0.0 && p.weight_decay.is_finite()) {
            return Err(Error::Invalid("probe learning rate or weight decay invalid".into()));
        }
        Ok(())
    }

    /// Every key with its effective value.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let (d, t, p) = (&self.data, &self.train, &self.probe);
        let (e, a) = (&t.encoder, &t.augment);
        [
            ("data.num_scenes", d.num_scenes.to_string()),
            ("data.channels", d.channels.to_string()),
            ("data.size", d.size.to_string()),
            ("data.num_classes", d.num_classes.to_string()),
            ("data.label_counts", join(&d.label_counts)),
            ("data.season_counts", join(&d.season_counts)),
            ("data.noise_std", d.noise_std.to_string()),
            ("data.seed", d.seed.to_string()),
            ("encoder.kind", e.kind.as_str().to_string()),
            ("encoder.channels", e.channels.to_string()),
            ("encoder.image_size", e.image_size.to_string()),
            ("encoder.patch_size", e.patch_size.to_string()),
            ("encoder.d_model", e.d_model.to_string()),
            ("encoder.heads", e.heads.to_string()),
            ("encoder.blocks", e.blocks.to_string()),
            ("encoder.mlp_hidden", e.mlp_hidden.to_string()),
            ("projector.hidden", t.projector_hidden.to_string()),
            ("projector.dim", t.projector_dim.to_string()),
            ("train.variant", t.variant.as_str().to_string()),
            ("train.temperature", t.temperature.to_string()),
            ("train.lambda", t.lambda.to_string()),
            ("train.supcon_weight", t.supcon_weight.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.mask_ratio", t.mask_ratio.to_string()),
            ("train.queue", t.queue.to_string()),
            ("train.queue_size", t.queue_size.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.warmup_epochs", t.warmup_epochs.to_string()),
            ("train.base_lr", t.base_lr.to_string()),
            ("train.weight_decay", t.optimizer.weight_decay.to_string()),
            ("train.seed", t.seed.to_string()),
            ("augment.min_scale", a.min_scale.to_string()),
            ("augment.hflip_p", a.hflip_p.to_string()),
            ("augment.vflip_p", a.vflip_p.to_string()),
            ("augment.jitter_p", a.jitter_p.to_string()),
            ("augment.jitter", a.jitter.to_string()),
            ("augment.grey_p", a.grey_p.to_string()),
            ("augment.blur_p", a.blur_p.to_string()),
            ("probe.epochs", p.epochs.to_string()),
            ("probe.lr", p.lr.to_string()),
            ("probe.batch_size", p.batch_size.to_string()),
            ("probe.weight_decay", p.weight_decay.to_string()),
            ("probe.standardize", p.standardize.to_string()),
            ("probe.seed", p.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// The echo as config-file text.
    pub fn to_text(&self) -> String {
        self.echo().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(cfg.echo()["train.temperature"], "0.2");
        assert_eq!(cfg.echo()["train.lambda"], "0.1");
    }

    #[test]
    fn every_echoed_key_is_settable() {
        let mut cfg = RunConfig::default();
        for (k, v) in RunConfig::default().echo() {
            cfg.set(&k, &v).unwrap();
        }
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn comments_blanks_and_overrides() {
        let text = "# recipe\n\ntrain.lambda = 0.5   # heavier\ntrain.variant=contrast+supcon\nencoder.image_size = 16\n";
        let mut cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.train.lambda, 0.5);
        assert_eq!(cfg.train.variant, Variant::ContrastSupcon);
        assert_eq!(cfg.train.augment.crop_size, 16);
        cfg.set("train.lambda", "0.1").unwrap();
        assert_eq!(cfg.train.lambda, 0.1);
        let changed = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(changed, cfg);
    }

    #[test]
    fn bad_input_is_rejected() {
        assert!(matches!(RunConfig::parse("nope = 1"), Err(Error::Invalid(m)) if m.contains("line 1")));
        assert!(RunConfig::parse("train.lambda").is_err());
        assert!(RunConfig::parse("train.epochs = -3").is_err());
        assert!(RunConfig::parse("train.temperature = 0").is_err());
        assert!(RunConfig::parse("train.lambda = -0.1").is_err());
        assert!(RunConfig::parse("train.supcon_weight = -1").is_err());
        assert!(RunConfig::parse("train.momentum = 1").is_err());
        assert!(RunConfig::parse("train.mask_ratio = 1.0").is_err());
        assert!(RunConfig::parse("train.queue = maybe").is_err());
        assert!(RunConfig::parse("data.label_counts = 0.5,0.4").is_err());
        assert!(matches!(RunConfig::default().set("x", "1"), Err(Error::Usage(_))));
    }
}
