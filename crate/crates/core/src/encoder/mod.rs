//! Micro encoder: patch tokenizer, tiny transformer (or MLP stack), dual
//! projector heads, patch masking, momentum pairing and continual init.
//!
//! Parameters live in [`ParamSet`]s keyed by dotted names. The graph builders
//! in [`model`] read them as named graph inputs, so the same builder serves
//! the trainable branch (differentiable inputs) and the momentum branch
//! (frozen inputs).

mod continual;
mod ema;
mod mask;
pub mod model;
mod params;

use std::collections::BTreeMap;

pub use continual::{encoder_from_checkpoint, fresh_patch_embed, init_continual, ENCODER_PREFIX};
pub use ema::{ema_update, MomentumPair};
pub use mask::{sample_mask, visible_count, MaskPattern};
pub use model::{EncodeTrace, EncoderParams, ProjectorParams};
pub use params::ParamSet;

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::rng::{truncated_normal, Rng};
use rand::Rng as _;

pub const PATCH_EMBED_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Transformer,
    Mlp,
}

impl EncoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Transformer => "transformer",
            Self::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(Self::Transformer),
            "mlp" => Ok(Self::Mlp),
            _ => Err(Error::Invalid(format!("unknown encoder kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub channels: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Hidden width of the per-block MLP.
    pub mlp_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Transformer,
            channels: 4,
            image_size: 32,
            patch_size: 8,
            d_model: 64,
            heads: 4,
            blocks: 4,
            mlp_hidden: 128,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.channels == 0 || self.d_model == 0 || self.patch_size == 0 || self.mlp_hidden == 0 {
            return bad("encoder dimensions must be positive".into());
        }
        if self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.kind == EncoderKind::Transformer
            && (self.heads == 0 || self.d_model % self.heads != 0)
        {
            return bad(format!(
                "d_model {} not divisible into {} heads",
                self.d_model, self.heads
            ));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn to_metadata(&self, out: &mut BTreeMap<String, String>) {
        let mut put = |k: &str, v: String| {
            out.insert(format!("encoder.{k}"), v);
        };
        put("kind", self.kind.as_str().into());
        put("channels", self.channels.to_string());
        put("image_size", self.image_size.to_string());
        put("patch_size", self.patch_size.to_string());
        put("d_model", self.d_model.to_string());
        put("heads", self.heads.to_string());
        put("blocks", self.blocks.to_string());
        put("mlp_hidden", self.mlp_hidden.to_string());
    }

    pub fn from_metadata(meta: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| -> Result<&String> {
            meta.get(&format!("encoder.{k}"))
                .ok_or_else(|| Error::Invalid(format!("checkpoint metadata lacks `encoder.{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Invalid(format!("bad `encoder.{k}` in metadata")))
        };
        let cfg = Self {
            kind: EncoderKind::parse(get("kind")?)?,
            channels: num("channels")?,
            image_size: num("image_size")?,
            patch_size: num("patch_size")?,
            d_model: num("d_model")?,
            heads: num("heads")?,
            blocks: num("blocks")?,
            mlp_hidden: num("mlp_hidden")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorConfig {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_proj: usize,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self {
            d_in: 64,
            d_hidden: 128,
            d_proj: 32,
        }
    }
}

impl ProjectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_hidden == 0 || self.d_proj == 0 {
            return Err(Error::Invalid("projector dimensions must be positive".into()));
        }
        Ok(())
    }
}

pub(crate) fn xavier(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
    Tensor::from_parts(vec![fan_in, fan_out], data)
}

pub(crate) fn trunc_normal(rng: &mut Rng, dims: &[usize], std: f64) -> Tensor {
    let n = dims.iter().product();
    let data = (0..n).map(|_| truncated_normal(rng, std)).collect();
    Tensor::from_parts(dims.to_vec(), data)
}
