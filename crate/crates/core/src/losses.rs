//! Contrastive loss family over similarity matrices.
//!
//! All losses return the literal sums (no `1/N` averaging); the training loop
//! rescales by the batch size. Each loss is available both as a value
//! function and as a graph builder so it can sit inside a larger
//! differentiable computation.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::labelsim::LabelSimilarityMatrix;
use crate::numcore::{Graph, NodeId, Tensor};

/// Default InfoNCE / SupCon softmax temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.2;

/// Default weight of the soft contrastive term.
pub const DEFAULT_LAMBDA: f64 = 0.1;

const UNIT_NORM_TOL: f64 = 1e-9;

/// Rows of projected features, each unit-norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch(Tensor);

impl EmbeddingBatch {
    pub fn new(rows: Tensor) -> Result<Self> {
        let (n, _) = rows.shape2()?;
        for i in 0..n {
            let norm = rows.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Invalid(format!("embedding row {i} has norm {norm}")));
            }
        }
        Ok(Self(rows))
    }

    /// L2-normalizes raw projector outputs.
    pub fn normalize(raw: &Tensor) -> Result<Self> {
        raw.shape2()?;
        Ok(Self(raw.row_normalized()?))
    }

    pub fn rows(&self) -> &Tensor {
        &self.0
    }

    pub fn count(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.0.dims()[1]
    }
}

/// `X_ij = z_i · z'_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix(Tensor);

impl SimilarityMatrix {
    /// Wraps a square matrix of logits.
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        let (r, c) = t.shape2()?;
        if r != c {
            return Err(Error::shape("similarity matrix", format!("{r}x{c} is not square")));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn size(&self) -> usize {
        self.0.dims()[0]
    }
}

/// Single-label class ids, one per anchor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassIdBatch(pub Vec<usize>);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub temperature: f64,
    pub weight: f64,
    pub symmetrize: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            weight: DEFAULT_LAMBDA,
            symmetrize: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        if !(self.weight >= 0.0) || !self.weight.is_finite() {
            return Err(Error::Invalid(format!("loss weight {} must be ≥ 0", self.weight)));
        }
        Ok(())
    }
}

/// Combined loss value with its addends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub contrast: f64,
    pub softcon: f64,
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Invalid(format!("temperature {tau} must be > 0")))
    }
}

pub fn similarity_matrix(a: &EmbeddingBatch, b: &EmbeddingBatch) -> Result<SimilarityMatrix> {
    if a.count() != b.count() || a.dim() != b.dim() {
        return Err(Error::shape(
            "similarity_matrix",
            format!("{:?} vs {:?}", a.0.dims(), b.0.dims()),
        ));
    }
    Ok(SimilarityMatrix(a.0.matmul(&b.0.transpose2()?)?))
}

/// Weights selecting the diagonal positive of each anchor row; `cols ≥ rows`
/// lets extra columns act as additional negatives.
pub fn instance_weights(rows: usize, cols: usize) -> Tensor {
    let mut w = Tensor::zeros(&[rows, cols]);
    for i in 0..rows.min(cols) {
        w.data_mut()[i * cols + i] = 1.0;
    }
    w
}

/// `W_ip = 1/|P(i)|` for every `p` sharing anchor `i`'s class.
pub fn supcon_weights(labels: &ClassIdBatch) -> Tensor {
    let n = labels.0.len();
    let mut w = Tensor::zeros(&[n, n]);
    for (i, yi) in labels.0.iter().enumerate() {
        let positives = labels.0.iter().filter(|&y| y == yi).count() as f64;
        for (p, yp) in labels.0.iter().enumerate() {
            if yp == yi {
                w.data_mut()[i * n + p] = 1.0 / positives;
            }
        }
    }
    w
}

/// `−Σ_ij W_ij · log softmax_j(X_ij / τ)`: InfoNCE when `W` picks the
/// diagonal, SupCon when `W` spreads over same-class columns.
pub fn weighted_nce_node(g: &mut Graph, x: NodeId, weights: Tensor, tau: f64) -> NodeId {
    let logits = g.scale(x, 1.0 / tau);
    let log_p = g.log_softmax_row(logits);
    let w = g.constant(weights);
    let picked = g.mul(log_p, w);
    let total = g.sum(picked, None);
    g.scale(total, -1.0)
}

/// InfoNCE over an `rows × cols` logit node.
pub fn info_nce_node(g: &mut Graph, x: NodeId, rows: usize, cols: usize, tau: f64) -> NodeId {
    weighted_nce_node(g, x, instance_weights(rows, cols), tau)
}

pub fn supcon_node(g: &mut Graph, x: NodeId, labels: &ClassIdBatch, tau: f64) -> NodeId {
    weighted_nce_node(g, x, supcon_weights(labels), tau)
}

/// `Σ_ij BCE(σ(X_ij), Y_ij)`.
pub fn softcon_node(g: &mut Graph, x: NodeId, y: &LabelSimilarityMatrix) -> NodeId {
    let bce = g.bce_with_logits(x, y.tensor().clone());
    g.sum(bce, None)
}

/// Evaluates a loss builder on a single bound matrix.
fn eval_on(x: &Tensor, build: impl FnOnce(&mut Graph, NodeId) -> NodeId) -> Result<f64> {
    let mut g = Graph::new();
    let xn = g.input_frozen("X");
    let out = build(&mut g, xn);
    g.set_output(out);
    let mut inputs = BTreeMap::new();
    inputs.insert("X".to_string(), x.clone());
    g.forward(&inputs)
}

pub fn info_nce(x: &SimilarityMatrix, tau: f64) -> Result<f64> {
    check_temperature(tau)?;
    let n = x.size();
    eval_on(&x.0, |g, xn| info_nce_node(g, xn, n, n, tau))
}

pub fn supcon(x: &SimilarityMatrix, labels: &ClassIdBatch, tau: f64) -> Result<f64> {
    check_temperature(tau)?;
    if labels.0.len() != x.size() {
        return Err(Error::shape(
            "supcon",
            format!("{} labels for {} anchors", labels.0.len(), x.size()),
        ));
    }
    eval_on(&x.0, |g, xn| supcon_node(g, xn, labels, tau))
}

pub fn softcon(x: &SimilarityMatrix, y: &LabelSimilarityMatrix) -> Result<f64> {
    if x.0.dims() != y.tensor().dims() {
        return Err(Error::shape(
            "softcon",
            format!("X {:?} vs Y {:?}", x.0.dims(), y.tensor().dims()),
        ));
    }
    eval_on(&x.0, |g, xn| softcon_node(g, xn, y))
}

/// `info_nce(X_c) + λ·softcon(X_s, Y)`, optionally averaged with the
/// view-swapped (transposed) matrices.
pub fn combined(
    x_contrast: &SimilarityMatrix,
    x_soft: &SimilarityMatrix,
    y: &LabelSimilarityMatrix,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let mut contrast = info_nce(x_contrast, cfg.temperature)?;
    let mut soft = softcon(x_soft, y)?;
    if cfg.symmetrize {
        let xt = SimilarityMatrix(x_contrast.0.transpose2()?);
        let st = SimilarityMatrix(x_soft.0.transpose2()?);
        let yt = LabelSimilarityMatrix::from_tensor(y.tensor().transpose2()?)?;
        contrast = 0.5 * (contrast + info_nce(&xt, cfg.temperature)?);
        soft = 0.5 * (soft + softcon(&st, &yt)?);
    }
    Ok(LossBreakdown {
        total: contrast + cfg.weight * soft,
        contrast,
        softcon: soft,
    })
}

/// Loss names covered by [`grad_check_suite`].
pub const SUITE_LOSSES: [&str; 4] = ["info_nce", "supcon", "softcon", "combined"];

/// Worst central-difference relative error of every loss over `instances`
/// random batches of `n` raw `d`-dimensional embedding pairs, differentiated
/// through row normalization.
pub fn grad_check_suite(instances: usize, n: usize, d: usize, epsilon: f64, seed: u64) -> Result<Vec<(&'static str, f64)>> {
    use crate::labelsim::{batch_label_similarity, MultiHot};
    use crate::numcore::grad_check;
    use rand::Rng as _;

    let mut worst = [0.0f64; 4];
    for inst in 0..instances {
        let mut rng = crate::rng::stream(seed, &[inst as u64]);
        let mut inputs = BTreeMap::new();
        for name in ["za", "zb"] {
            let t = Tensor::new(&[n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect())?;
            inputs.insert(name.to_string(), t);
        }
        let ids = ClassIdBatch((0..n).map(|_| rng.random_range(0..4)).collect());
        let labels = (0..n)
            .map(|_| {
                let mut m = MultiHot::empty(9);
                m.set(rng.random_range(0..9));
                (0..9).filter(|_| rng.random_bool(0.3)).for_each(|c| m.set(c));
                m
            })
            .collect::<Vec<_>>();
        let y = batch_label_similarity(&labels)?;
        for (k, w) in worst.iter_mut().enumerate() {
            let mut g = Graph::new();
            let za = g.input("za");
            let zb = g.input("zb");
            let na = g.l2_normalize_row(za);
            let nb = g.l2_normalize_row(zb);
            let x = g.matmul_nt(na, nb);
            let out = match k {
                0 => info_nce_node(&mut g, x, n, n, DEFAULT_TEMPERATURE),
                1 => supcon_node(&mut g, x, &ids, DEFAULT_TEMPERATURE),
                2 => softcon_node(&mut g, x, &y),
                _ => {
                    let c = info_nce_node(&mut g, x, n, n, DEFAULT_TEMPERATURE);
                    let s = softcon_node(&mut g, x, &y);
                    let s = g.scale(s, DEFAULT_LAMBDA);
                    g.add(c, s)
                }
            };
            g.set_output(out);
            *w = w.max(grad_check(&mut g, &inputs, epsilon)?);
        }
    }
    Ok(SUITE_LOSSES.into_iter().zip(worst).collect())
}
