//! Graph builders for the encoder and projector heads, plus direct
//! evaluation helpers that wrap them.

use super::{
    trunc_normal, xavier, EncoderConfig, EncoderKind, MaskPattern, ParamSet, ProjectorConfig,
    LN_EPS, PATCH_EMBED_STD,
};
use crate::error::{Error, Result};
use crate::numcore::{Graph, NodeId, Tensor};
use crate::rng::Rng;

/// Shapes observed while building an encoder graph.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EncodeTrace {
    /// Tokens each image contributes after masking.
    pub tokens_per_image: usize,
    /// Dims of every attention score tensor, `[batch, tokens, tokens]`.
    pub attention_dims: Vec<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub params: ParamSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorParams {
    pub config: ProjectorConfig,
    pub params: ParamSet,
}

/// Splits a `C×H×W` image into `P` rows of flattened `C·p·p` patches.
/// Patches are numbered row-major; within a patch the layout is
/// channel, then row, then column.
pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor> {
    let (c, h, w) = match image.dims() {
        &[c, h, w] => (c, h, w),
        d => return Err(Error::shape("patchify", format!("expected C×H×W, got {d:?}"))),
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape(
            "patchify",
            format!("{h}×{w} not divisible by patch size {p}"),
        ));
    }
    let (ph, pw) = (h / p, w / p);
    let dim = c * p * p;
    let src = image.data();
    let mut out = Vec::with_capacity(ph * pw * dim);
    for py in 0..ph {
        for px in 0..pw {
            for ch in 0..c {
                for dy in 0..p {
                    let start = ch * h * w + (py * p + dy) * w + px * p;
                    out.extend_from_slice(&src[start..start + p]);
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![ph * pw, dim], out))
}

fn param(g: &mut Graph, prefix: &str, name: &str, trainable: bool) -> NodeId {
    let full = format!("{prefix}{name}");
    if trainable {
        g.input(&full)
    } else {
        g.input_frozen(&full)
    }
}

fn affine(g: &mut Graph, x: NodeId, prefix: &str, layer: &str, trainable: bool) -> NodeId {
    let w = param(g, prefix, &format!("{layer}.weight"), trainable);
    let b = param(g, prefix, &format!("{layer}.bias"), trainable);
    let y = g.matmul(x, w);
    g.add(y, b)
}

fn norm(g: &mut Graph, x: NodeId, prefix: &str, layer: &str, trainable: bool) -> NodeId {
    let gamma = param(g, prefix, &format!("{layer}.gamma"), trainable);
    let beta = param(g, prefix, &format!("{layer}.beta"), trainable);
    let n = g.layer_norm(x, LN_EPS);
    let s = g.mul(n, gamma);
    g.add(s, beta)
}

/// Adds the encoder to `g` for a batch of pre-patchified images and returns
/// the `N×d_model` feature node. With masks, only visible patches enter the
/// graph; every mask must keep the same number of patches.
pub fn build_encoder(
    g: &mut Graph,
    prefix: &str,
    cfg: &EncoderConfig,
    patches: &[Tensor],
    masks: Option<&[MaskPattern]>,
    trainable: bool,
) -> Result<(NodeId, EncodeTrace)> {
    let n = patches.len();
    let total = cfg.num_patches();
    let pdim = cfg.patch_dim();
    if n == 0 {
        return Err(Error::Invalid("empty encoder batch".into()));
    }
    if let Some(m) = masks {
        if m.len() != n {
            return Err(Error::Invalid(format!("{} masks for {n} images", m.len())));
        }
    }
    let full = MaskPattern::full(total);
    let mask_of = |i: usize| masks.map_or(&full, |m| &m[i]);
    let t = mask_of(0).visible().len();
    if t == 0 {
        return Err(Error::Invalid("mask leaves no visible patch".into()));
    }

    let mut rows = Vec::with_capacity(n * t * pdim);
    let mut positions = Vec::with_capacity(n * t);
    for (i, p) in patches.iter().enumerate() {
        if p.dims() != [total, pdim] {
            return Err(Error::shape(
                "encoder input",
                format!("patches {:?}, expected [{total}, {pdim}]", p.dims()),
            ));
        }
        let mask = mask_of(i);
        if mask.total() != total || mask.visible().len() != t {
            return Err(Error::Invalid(format!(
                "mask {i} keeps {} of {}, expected {t} of {total}",
                mask.visible().len(),
                mask.total()
            )));
        }
        for &v in mask.visible() {
            rows.extend_from_slice(p.row(v));
            positions.push(v);
        }
    }
    let x = g.constant(Tensor::from_parts(vec![n * t, pdim], rows));
    let tok = affine(g, x, prefix, "patch_embed", trainable);
    let pos_table = param(g, prefix, "pos_embed", trainable);
    let pos = g.gather_rows(pos_table, positions);
    let mut x = g.add(tok, pos);

    let mut trace = EncodeTrace {
        tokens_per_image: t,
        attention_dims: Vec::new(),
    };
    let d = cfg.d_model;
    for b in 0..cfg.blocks {
        let blk = format!("blocks.{b}");
        match cfg.kind {
            EncoderKind::Transformer => {
                let dh = cfg.head_dim();
                let h = norm(g, x, prefix, &format!("{blk}.ln1"), trainable);
                let qkv = affine(g, h, prefix, &format!("{blk}.attn.qkv"), trainable);
                let wo = param(g, prefix, &format!("{blk}.attn.proj.weight"), trainable);
                let mut attn: Option<NodeId> = None;
                for head in 0..cfg.heads {
                    let split = |g: &mut Graph, which: usize| {
                        let s = g.slice_cols(qkv, which * d + head * dh, dh);
                        g.reshape(s, &[n, t, dh])
                    };
                    let q = split(g, 0);
                    let k = split(g, 1);
                    let v = split(g, 2);
                    let s = g.matmul_nt(q, k);
                    let s = g.scale(s, 1.0 / (dh as f64).sqrt());
                    trace.attention_dims.push([n, t, t]);
                    let a = g.softmax_row(s);
                    let o = g.matmul(a, v);
                    let o = g.reshape(o, &[n * t, dh]);
                    let w = g.gather_rows(wo, (head * dh..(head + 1) * dh).collect());
                    let o = g.matmul(o, w);
                    attn = Some(match attn {
                        Some(acc) => g.add(acc, o),
                        None => o,
                    });
                }
                let bo = param(g, prefix, &format!("{blk}.attn.proj.bias"), trainable);
                let attn = g.add(attn.expect("at least one head"), bo);
                x = g.add(x, attn);

                let h = norm(g, x, prefix, &format!("{blk}.ln2"), trainable);
                let h = affine(g, h, prefix, &format!("{blk}.mlp.fc1"), trainable);
                let h = g.relu(h);
                let h = affine(g, h, prefix, &format!("{blk}.mlp.fc2"), trainable);
                x = g.add(x, h);
            }
            EncoderKind::Mlp => {
                let h = affine(g, x, prefix, &format!("{blk}.fc"), trainable);
                x = g.relu(h);
            }
        }
    }
    let x = norm(g, x, prefix, "final_norm", trainable);
    let x = g.reshape(x, &[n, t, d]);
    Ok((g.mean(x, Some(1)), trace))
}

/// Adds a projector head on top of `features` and returns the unit-norm
/// embedding rows.
pub fn build_projector(g: &mut Graph, prefix: &str, features: NodeId, trainable: bool) -> NodeId {
    let h = affine(g, features, prefix, "fc1", trainable);
    let h = g.relu(h);
    let z = affine(g, h, prefix, "fc2", trainable);
    g.l2_normalize_row(z)
}

impl EncoderParams {
    pub fn init(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut p = ParamSet::new();
        let (w, b) = super::fresh_patch_embed(&config, rng);
        p.insert("patch_embed.weight", w);
        p.insert("patch_embed.bias", b);
        p.insert(
            "pos_embed",
            trunc_normal(rng, &[config.num_patches(), d], PATCH_EMBED_STD),
        );
        let ln = |p: &mut ParamSet, name: &str| {
            p.insert(format!("{name}.gamma"), Tensor::filled(&[d], 1.0));
            p.insert(format!("{name}.beta"), Tensor::zeros(&[d]));
        };
        let lin = |p: &mut ParamSet, rng: &mut Rng, name: &str, i: usize, o: usize| {
            p.insert(format!("{name}.weight"), xavier(rng, i, o));
            p.insert(format!("{name}.bias"), Tensor::zeros(&[o]));
        };
        for b in 0..config.blocks {
            let blk = format!("blocks.{b}");
            match config.kind {
                EncoderKind::Transformer => {
                    ln(&mut p, &format!("{blk}.ln1"));
                    lin(&mut p, rng, &format!("{blk}.attn.qkv"), d, 3 * d);
                    lin(&mut p, rng, &format!("{blk}.attn.proj"), d, d);
                    ln(&mut p, &format!("{blk}.ln2"));
                    lin(&mut p, rng, &format!("{blk}.mlp.fc1"), d, config.mlp_hidden);
                    lin(&mut p, rng, &format!("{blk}.mlp.fc2"), config.mlp_hidden, d);
                }
                EncoderKind::Mlp => lin(&mut p, rng, &format!("{blk}.fc"), d, d),
            }
        }
        ln(&mut p, "final_norm");
        Ok(Self { config, params: p })
    }

    /// Wraps an existing parameter set after checking it against the
    /// architecture.
    pub fn from_params(config: EncoderConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let reference = Self::init(config.clone(), &mut crate::rng::stream(0, &[]))?;
        let bad = reference.params.shape_mismatches(&params);
        if !bad.is_empty() {
            return Err(Error::Architecture(bad));
        }
        if params.iter().any(|(_, t)| !t.is_finite()) {
            return Err(Error::Invalid("non-finite encoder parameter".into()));
        }
        Ok(Self { config, params })
    }

    fn check_image(&self, image: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let expected = [c.channels, c.image_size, c.image_size];
        if image.dims() != expected {
            return Err(Error::shape(
                "encoder input",
                format!("image {:?}, expected {expected:?}", image.dims()),
            ));
        }
        patchify(image, c.patch_size)
    }

    /// Token sequence `P×d_model`: affine patch embedding plus position
    /// embedding.
    pub fn patch_embed(&self, image: &Tensor) -> Result<Tensor> {
        let patches = self.check_image(image)?;
        let w = self.params.require("patch_embed.weight")?;
        let b = self.params.require("patch_embed.bias")?;
        let pos = self.params.require("pos_embed")?;
        let mut tok = patches.matmul(w)?;
        let d = self.config.d_model;
        for (i, row) in tok.data_mut().chunks_mut(d).enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += b.data()[j] + pos.data()[i * d + j];
            }
        }
        Ok(tok)
    }

    /// Feature vector for one image, optionally masked.
    pub fn encode(&self, image: &Tensor, mask: Option<&MaskPattern>) -> Result<(Vec<f64>, EncodeTrace)> {
        let patches = self.check_image(image)?;
        let masks = mask.map(|m| std::slice::from_ref(m));
        let mut g = Graph::new();
        let (f, trace) = build_encoder(&mut g, "", &self.config, &[patches], masks, false)?;
        g.evaluate(&self.params)?;
        Ok((g.value(f).expect("evaluated").data().to_vec(), trace))
    }

    /// Unmasked features for a batch of images, `N×d_model`.
    pub fn encode_batch(&self, images: &[&Tensor]) -> Result<Tensor> {
        let patches = images
            .iter()
            .map(|im| self.check_image(im))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new();
        let (f, _) = build_encoder(&mut g, "", &self.config, &patches, None, false)?;
        g.evaluate(&self.params)?;
        Ok(g.value(f).expect("evaluated").clone())
    }
}

impl ProjectorParams {
    pub fn init(config: ProjectorConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut p = ParamSet::new();
        p.insert("fc1.weight", xavier(rng, config.d_in, config.d_hidden));
        p.insert("fc1.bias", Tensor::zeros(&[config.d_hidden]));
        p.insert("fc2.weight", xavier(rng, config.d_hidden, config.d_proj));
        p.insert("fc2.bias", Tensor::zeros(&[config.d_proj]));
        Ok(Self { config, params: p })
    }

    /// Unit-norm embedding of one feature vector.
    pub fn project(&self, feature: &[f64]) -> Result<Vec<f64>> {
        if feature.len() != self.config.d_in {
            return Err(Error::shape(
                "projector input",
                format!("{} features, expected {}", feature.len(), self.config.d_in),
            ));
        }
        let mut g = Graph::new();
        let f = g.constant(Tensor::new(&[1, feature.len()], feature.to_vec())?);
        let z = build_projector(&mut g, "", f, false);
        g.evaluate(&self.params)?;
        Ok(g.value(z).expect("evaluated").data().to_vec())
    }
}
