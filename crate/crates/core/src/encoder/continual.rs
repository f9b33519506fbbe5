use super::{trunc_normal, EncoderConfig, EncoderParams, ParamSet, PATCH_EMBED_STD};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::rng::{stream, Rng};

/// Name prefix of encoder tensors inside a checkpoint.
pub const ENCODER_PREFIX: &str = "encoder.";

/// Freshly drawn patch embedding: truncated-normal weight, zero bias.
pub fn fresh_patch_embed(cfg: &EncoderConfig, rng: &mut Rng) -> (Tensor, Tensor) {
    let w = trunc_normal(rng, &[cfg.patch_dim(), cfg.d_model], PATCH_EMBED_STD);
    (w, Tensor::zeros(&[cfg.d_model]))
}

/// Encoder for a `target_channels` domain initialized from a pretrained
/// checkpoint. Everything is copied except the patch embedding, which is
/// redrawn from `rng` when the channel counts differ.
pub fn init_continual(
    source: &Checkpoint,
    target_channels: usize,
    rng: &mut Rng,
) -> Result<EncoderParams> {
    let src_cfg = EncoderConfig::from_metadata(&source.metadata)?;
    let target_cfg = EncoderConfig {
        channels: target_channels,
        ..src_cfg.clone()
    };
    target_cfg.validate()?;
    let src = ParamSet::from(source.tensors.clone()).strip_prefix(ENCODER_PREFIX);
    let reference = EncoderParams::init(target_cfg.clone(), &mut stream(0, &[]))?;
    let redraw = target_channels != src_cfg.channels;

    let mut out = ParamSet::new();
    let mut bad = Vec::new();
    for (name, want) in reference.params.iter() {
        if redraw && name.starts_with("patch_embed.") {
            continue;
        }
        match src.get(name) {
            Some(t) if t.dims() == want.dims() => out.insert(name.clone(), t.clone()),
            Some(t) => bad.push(format!("`{name}` {:?} vs {:?}", t.dims(), want.dims())),
            None => bad.push(format!("`{name}` missing")),
        }
    }
    for name in src.names() {
        if reference.params.get(name).is_none() {
            bad.push(format!("`{name}` unexpected"));
        }
    }
    if !bad.is_empty() {
        return Err(Error::Architecture(bad));
    }
    if redraw {
        let (w, b) = fresh_patch_embed(&target_cfg, rng);
        out.insert("patch_embed.weight", w);
        out.insert("patch_embed.bias", b);
    }
    EncoderParams::from_params(target_cfg, out)
}

/// The pretrained encoder stored in a checkpoint, shapes checked against the
/// architecture recorded in its metadata.
pub fn encoder_from_checkpoint(source: &Checkpoint) -> Result<EncoderParams> {
    let cfg = EncoderConfig::from_metadata(&source.metadata)?;
    let params = ParamSet::from(source.tensors.clone()).strip_prefix(ENCODER_PREFIX);
    EncoderParams::from_params(cfg, params)
}
