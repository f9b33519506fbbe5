//! Siamese pretraining: view selection, augmentation, negative queue,
//! learning-rate schedule, AdamW, and the train step tying the losses to the
//! momentum encoder.
//!
//! The trainable branch encodes a masked view through a graph with
//! differentiable parameter inputs. The momentum branch is evaluated in a
//! separate forward-only graph and enters the loss graph as constants, so no
//! gradient can reach the momentum parameters or the queue.

mod augment;
mod optim;
mod queue;
mod schedule;

pub use augment::{apply_draw, augment, sample_draw, AugmentDraw, AugmentPolicy};
pub use optim::{AdamState, AdamW};
pub use queue::{queue_push, NegativeQueue};
pub use schedule::{cosine_warmup_lr, Schedule};

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::checkpoint::Checkpoint;
use crate::datasynth::{Dataset, Scene, Split};
use crate::encoder::model::{build_encoder, build_projector, patchify};
use crate::encoder::{
    sample_mask, EncodeTrace, EncoderConfig, EncoderParams, MaskPattern, MomentumPair, ParamSet,
    ProjectorConfig, ProjectorParams, ENCODER_PREFIX,
};
use crate::error::{Error, Result};
use crate::labelsim::{batch_label_similarity, MultiHot};
use crate::losses::{info_nce_node, softcon_node, supcon_node, ClassIdBatch};
use crate::numcore::{Gradients, Graph, NodeId, Tensor};
use crate::rng::{purpose, stream, Rng};

pub const CONTRAST_PREFIX: &str = "proj_contrast.";
pub const SOFT_PREFIX: &str = "proj_soft.";
pub const METRICS_HEADER: &str = "step,epoch,lr,loss_total,loss_contrast,loss_softcon";

/// Which loss terms drive pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    ContrastOnly,
    SoftconOnly,
    /// InfoNCE plus SupCon on the dominant-class id of each scene.
    ContrastSupcon,
    ContrastSoftcon,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::ContrastOnly,
        Variant::SoftconOnly,
        Variant::ContrastSupcon,
        Variant::ContrastSoftcon,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::ContrastOnly => "contrast-only",
            Variant::SoftconOnly => "softcon-only",
            Variant::ContrastSupcon => "contrast+supcon",
            Variant::ContrastSoftcon => "contrast+softcon",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown variant `{s}`")))
    }

    fn uses_contrast(self) -> bool {
        self != Variant::SoftconOnly
    }

    fn uses_soft_head(self) -> bool {
        self != Variant::ContrastOnly
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub projector_hidden: usize,
    pub projector_dim: usize,
    pub variant: Variant,
    pub temperature: f64,
    pub lambda: f64,
    /// Weight of the SupCon term in contrast+supcon runs.
    pub supcon_weight: f64,
    pub momentum: f64,
    pub mask_ratio: f64,
    pub queue: bool,
    pub queue_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub optimizer: AdamW,
    pub augment: AugmentPolicy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        let crop = encoder.image_size;
        Self {
            encoder,
            projector_hidden: 128,
            projector_dim: 32,
            variant: Variant::ContrastSoftcon,
            temperature: crate::losses::DEFAULT_TEMPERATURE,
            lambda: crate::losses::DEFAULT_LAMBDA,
            supcon_weight: 1.0,
            momentum: 0.99,
            mask_ratio: 0.2,
            queue: false,
            queue_size: 512,
            batch_size: 64,
            epochs: 30,
            warmup_epochs: 10,
            base_lr: 3e-3,
            optimizer: AdamW::default(),
            augment: AugmentPolicy::standard(crop),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        self.encoder.validate()?;
        self.augment.validate()?;
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature {} must be > 0", self.temperature));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be ≥ 0", self.lambda));
        }
        if !(self.supcon_weight >= 0.0 && self.supcon_weight.is_finite()) {
            return bad(format!("supcon weight {} must be ≥ 0", self.supcon_weight));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!("mask ratio {} outside [0, 1)", self.mask_ratio));
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2".into());
        }
        if self.queue && self.queue_size < self.batch_size {
            return bad(format!(
                "queue size {} below batch size {}",
                self.queue_size, self.batch_size
            ));
        }
        if self.augment.crop_size != self.encoder.image_size {
            return bad(format!(
                "crop size {} differs from encoder image size {}",
                self.augment.crop_size, self.encoder.image_size
            ));
        }
        if self.projector_hidden == 0 || self.projector_dim == 0 {
            return bad("projector dimensions must be positive".into());
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!("learning rate {} invalid", self.base_lr));
        }
        Ok(())
    }

    pub fn projector(&self) -> ProjectorConfig {
        ProjectorConfig {
            d_in: self.encoder.d_model,
            d_hidden: self.projector_hidden,
            d_proj: self.projector_dim,
        }
    }
}

/// The seasonal images of one location and its labels.
#[derive(Debug, Clone, Copy)]
pub struct SceneViews<'a> {
    pub id: u32,
    pub seasons: &'a [Tensor],
    pub label: &'a MultiHot,
    /// Dominant pixel class, the single label used by SupCon.
    pub class_id: usize,
}

impl<'a> SceneViews<'a> {
    pub fn from_scene(scene: &'a Scene) -> Result<Self> {
        if scene.seasons.is_empty() {
            return Err(Error::Invalid(format!("scene {} has no season", scene.id)));
        }
        Ok(Self {
            id: scene.id,
            seasons: &scene.seasons,
            label: &scene.label,
            class_id: scene.pixel_map.modal_class(scene.label.num_classes())?,
        })
    }
}

/// Indices of two distinct seasons, or the only season twice.
pub fn select_views(num_seasons: usize, rng: &mut Rng) -> (usize, usize) {
    if num_seasons < 2 {
        return (0, 0);
    }
    let a = rng.random_range(0..num_seasons);
    let mut b = rng.random_range(0..num_seasons - 1);
    if b >= a {
        b += 1;
    }
    (a, b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub encoder: EncoderConfig,
    pub projector: ProjectorConfig,
    /// Encoder and both heads under `encoder.`, `proj_contrast.` and
    /// `proj_soft.`, with the momentum copy alongside.
    pub pair: MomentumPair,
    pub adam: AdamState,
    pub queue: Option<NegativeQueue>,
    pub step: u64,
}

impl TrainState {
    /// Fresh state from the config seed; `encoder` replaces the randomly
    /// initialized encoder (continual pretraining).
    pub fn new(cfg: &TrainConfig, encoder: Option<EncoderParams>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(cfg.seed, &[purpose::INIT]);
        let fresh = EncoderParams::init(cfg.encoder.clone(), &mut rng)?;
        let contrast = ProjectorParams::init(cfg.projector(), &mut rng)?;
        let soft = ProjectorParams::init(cfg.projector(), &mut rng)?;
        let enc = match encoder {
            Some(e) if e.config != cfg.encoder => {
                return Err(Error::Invalid(format!(
                    "initial encoder {:?} differs from configured {:?}",
                    e.config, cfg.encoder
                )))
            }
            Some(e) => e,
            None => fresh,
        };
        let mut base = ParamSet::new();
        base.extend_prefixed(ENCODER_PREFIX, &enc.params);
        base.extend_prefixed(CONTRAST_PREFIX, &contrast.params);
        base.extend_prefixed(SOFT_PREFIX, &soft.params);
        let queue = if cfg.queue {
            let mut qrng = stream(cfg.seed, &[purpose::INIT, 1]);
            Some(NegativeQueue::random(cfg.queue_size, cfg.projector_dim, &mut qrng)?)
        } else {
            None
        };
        Ok(Self {
            encoder: cfg.encoder.clone(),
            projector: cfg.projector(),
            adam: AdamState::new(&base),
            pair: MomentumPair::new(base, cfg.momentum)?,
            queue,
            step: 0,
        })
    }

    pub fn encoder_params(&self) -> EncoderParams {
        EncoderParams {
            config: self.encoder.clone(),
            params: self.pair.base.strip_prefix(ENCODER_PREFIX),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub contrast: f64,
    /// SoftCon term, or the SupCon term for the contrast+supcon variant.
    pub softcon: f64,
    pub tokens_per_image: usize,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.epoch, self.lr, self.total, self.contrast, self.softcon
        )
    }
}

/// Augmented, patchified views of one batch.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub base_patches: Vec<Tensor>,
    pub masks: Vec<MaskPattern>,
    pub momentum_patches: Vec<Tensor>,
    pub labels: Vec<MultiHot>,
    pub class_ids: Vec<usize>,
}

/// Per scene: pick two seasons, augment both and mask the first, all from
/// the scene's own `(seed, id, epoch)` stream.
pub fn prepare_batch(batch: &[SceneViews], cfg: &TrainConfig, epoch: usize) -> Result<PreparedBatch> {
    let p = cfg.encoder.patch_size;
    let mut out = PreparedBatch {
        base_patches: Vec::with_capacity(batch.len()),
        masks: Vec::with_capacity(batch.len()),
        momentum_patches: Vec::with_capacity(batch.len()),
        labels: Vec::with_capacity(batch.len()),
        class_ids: Vec::with_capacity(batch.len()),
    };
    for s in batch {
        let mut rng = stream(cfg.seed, &[purpose::SCENE, u64::from(s.id), epoch as u64]);
        let (a, b) = select_views(s.seasons.len(), &mut rng);
        let va = augment(&s.seasons[a], &mut rng, &cfg.augment)?;
        let vb = augment(&s.seasons[b], &mut rng, &cfg.augment)?;
        out.masks.push(sample_mask(cfg.encoder.num_patches(), cfg.mask_ratio, &mut rng)?);
        out.base_patches.push(patchify(&va, p)?);
        out.momentum_patches.push(patchify(&vb, p)?);
        out.labels.push(s.label.clone());
        out.class_ids.push(s.class_id);
    }
    Ok(out)
}

/// Loss terms (already divided by N), base-parameter gradients, the
/// momentum contrast keys, and the trainable-branch trace.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub total: f64,
    pub contrast: f64,
    pub softcon: f64,
    pub gradients: Gradients,
    pub momentum_keys: Tensor,
    pub trace: EncodeTrace,
}

fn momentum_embeddings(prep: &PreparedBatch, state: &TrainState, cfg: &TrainConfig) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let (f, _) = build_encoder(&mut g, ENCODER_PREFIX, &state.encoder, &prep.momentum_patches, None, false)?;
    let kc = build_projector(&mut g, CONTRAST_PREFIX, f, false);
    let ks = if cfg.variant.uses_soft_head() {
        build_projector(&mut g, SOFT_PREFIX, f, false)
    } else {
        kc
    };
    g.evaluate(&state.pair.momentum)?;
    let get = |id: NodeId| g.value(id).expect("evaluated").clone();
    Ok((get(kc), get(ks)))
}

pub fn loss_and_gradients(prep: &PreparedBatch, state: &TrainState, cfg: &TrainConfig) -> Result<StepOutcome> {
    let n = prep.base_patches.len();
    if n < 2 {
        return Err(Error::Invalid(format!("batch of {n} scenes; in-batch negatives need 2")));
    }
    let (kc, ks) = momentum_embeddings(prep, state, cfg)?;

    let mut g = Graph::new();
    let (f, trace) = build_encoder(&mut g, ENCODER_PREFIX, &state.encoder, &prep.base_patches, Some(&prep.masks), true)?;
    let tau = cfg.temperature;
    let mut contrast = None;
    if cfg.variant.uses_contrast() {
        let qc = build_projector(&mut g, CONTRAST_PREFIX, f, true);
        let keys = match &state.queue {
            Some(q) => {
                let mut rows = kc.data().to_vec();
                rows.extend_from_slice(q.to_tensor().data());
                Tensor::new(&[n + q.capacity(), kc.dims()[1]], rows)?
            }
            None => kc.clone(),
        };
        let cols = keys.dims()[0];
        let k = g.constant(keys);
        let x = g.matmul_nt(qc, k);
        contrast = Some(info_nce_node(&mut g, x, n, cols, tau));
    }
    let mut soft = None;
    if cfg.variant.uses_soft_head() {
        let qs = build_projector(&mut g, SOFT_PREFIX, f, true);
        let k = g.constant(ks);
        let x = g.matmul_nt(qs, k);
        soft = Some(match cfg.variant {
            Variant::ContrastSupcon => supcon_node(&mut g, x, &ClassIdBatch(prep.class_ids.clone()), tau),
            _ => softcon_node(&mut g, x, &batch_label_similarity(&prep.labels)?),
        });
    }
    let weighted_soft = soft.map(|s| match cfg.variant {
        Variant::SoftconOnly => s,
        Variant::ContrastSupcon => g.scale(s, cfg.supcon_weight),
        _ => g.scale(s, cfg.lambda),
    });
    let total = match (contrast, weighted_soft) {
        (Some(c), Some(s)) => g.add(c, s),
        (Some(c), None) => c,
        (None, Some(s)) => s,
        (None, None) => unreachable!("every variant has a loss term"),
    };
    let loss = g.scale(total, 1.0 / n as f64);
    g.set_output(loss);
    let total = g.forward(&state.pair.base)?;
    let term = |id: Option<NodeId>| id.map_or(0.0, |i| g.value(i).expect("evaluated").item() / n as f64);
    let (contrast, softcon) = (term(contrast), term(soft));
    let gradients = g.backward()?;
    Ok(StepOutcome {
        total,
        contrast,
        softcon,
        gradients,
        momentum_keys: kc,
        trace,
    })
}

/// One optimizer step: forward/backward, AdamW, EMA, queue update.
pub fn train_step(
    batch: &[SceneViews],
    state: &mut TrainState,
    cfg: &TrainConfig,
    schedule: &Schedule,
    epoch: usize,
) -> Result<StepMetrics> {
    if batch.len() < 2 {
        return Err(Error::Invalid(format!(
            "batch of {} scenes; in-batch negatives need 2",
            batch.len()
        )));
    }
    let prep = prepare_batch(batch, cfg, epoch)?;
    let out = loss_and_gradients(&prep, state, cfg).map_err(|e| match e {
        Error::NonFinite { node } => Error::Invalid(format!(
            "non-finite loss at step {} (epoch {epoch}): {node}",
            state.step
        )),
        other => other,
    })?;
    let lr = cosine_warmup_lr(state.step as usize + 1, schedule)?;
    cfg.optimizer.step(&mut state.pair.base, &out.gradients, &mut state.adam, lr)?;
    state.pair.update()?;
    if let Some(q) = &mut state.queue {
        queue_push(q, &out.momentum_keys)?;
    }
    state.step += 1;
    Ok(StepMetrics {
        step: state.step,
        epoch,
        lr,
        total: out.total,
        contrast: out.contrast,
        softcon: out.softcon,
        tokens_per_image: out.trace.tokens_per_image,
    })
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub checkpoint: Checkpoint,
    pub state: TrainState,
    pub history: Vec<StepMetrics>,
}

/// Steps per epoch and effective batch size for `n` training scenes.
pub fn batching(n: usize, batch_size: usize) -> (usize, usize) {
    let b = batch_size.min(n);
    (n / b.max(1), b)
}

/// Runs `cfg.epochs` epochs over the train split and returns the final
/// checkpoint. Metrics rows are streamed to `metrics` when given.
pub fn pretrain(
    ds: &Dataset,
    cfg: &TrainConfig,
    init: Option<EncoderParams>,
    echo: &BTreeMap<String, String>,
    mut metrics: Option<&mut dyn Write>,
) -> Result<PretrainOutput> {
    cfg.validate()?;
    if ds.channels != cfg.encoder.channels {
        return Err(Error::Invalid(format!(
            "dataset has {} channels, encoder expects {}",
            ds.channels, cfg.encoder.channels
        )));
    }
    if ds.size < cfg.augment.crop_size {
        return Err(Error::Invalid(format!(
            "images of side {} smaller than crop size {}",
            ds.size, cfg.augment.crop_size
        )));
    }
    let scenes = ds
        .split(Split::Train)
        .into_iter()
        .map(SceneViews::from_scene)
        .collect::<Result<Vec<_>>>()?;
    if scenes.len() < 2 {
        return Err(Error::Invalid(format!(
            "{} training scenes; at least 2 required",
            scenes.len()
        )));
    }
    let (steps_per_epoch, b) = batching(scenes.len(), cfg.batch_size);
    let schedule = Schedule::new(cfg.base_lr, cfg.warmup_epochs, cfg.epochs, steps_per_epoch)?;
    let mut state = TrainState::new(cfg, init)?;
    let mut history = Vec::with_capacity(schedule.total_steps());
    if let Some(w) = metrics.as_deref_mut() {
        writeln!(w, "{METRICS_HEADER}").map_err(|e| Error::io("metrics", e))?;
    }
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut stream(cfg.seed, &[purpose::SHUFFLE, epoch as u64]));
        for s in 0..steps_per_epoch {
            let batch: Vec<SceneViews> = order[s * b..(s + 1) * b].iter().map(|&i| scenes[i]).collect();
            let m = train_step(&batch, &mut state, cfg, &schedule, epoch)?;
            if let Some(w) = metrics.as_deref_mut() {
                writeln!(w, "{}", m.csv_row()).map_err(|e| Error::io("metrics", e))?;
            }
            history.push(m);
        }
    }
    let mut meta = echo.clone();
    state.encoder.to_metadata(&mut meta);
    meta.insert("step".into(), state.step.to_string());
    meta.insert("seed".into(), cfg.seed.to_string());
    let checkpoint = Checkpoint::new(&state.pair.base, meta);
    Ok(PretrainOutput {
        checkpoint,
        state,
        history,
    })
}

#[cfg(test)]
mod tests;
