use crate::error::{Error, Result};
use crate::numcore::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApMode {
    /// Average precision over all flattened (sample, class) pairs.
    Micro,
    /// Mean of per-class AP over classes with at least one positive.
    Macro,
}

/// Ranking by descending score, ties broken by ascending index.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Mean of precision@k over the ranks k holding a positive.
pub fn average_precision(scores: &[f64], targets: &[bool]) -> Result<f64> {
    if scores.len() != targets.len() {
        return Err(Error::shape(
            "average_precision",
            format!("{} scores vs {} targets", scores.len(), targets.len()),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Invalid("non-finite score".into()));
    }
    let positives = targets.iter().filter(|&&t| t).count();
    if positives == 0 {
        return Err(Error::UndefinedAp);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in ranking(scores).iter().enumerate() {
        if targets[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

fn binary(t: &Tensor) -> Result<Vec<bool>> {
    t.data()
        .iter()
        .map(|&v| match v {
            0.0 => Ok(false),
            1.0 => Ok(true),
            _ => Err(Error::Invalid(format!("target {v} is not binary"))),
        })
        .collect()
}

/// AP for every class column; `None` where the column has no positive.
pub fn per_class_ap(scores: &Tensor, targets: &Tensor) -> Result<Vec<Option<f64>>> {
    let (n, c) = check(scores, targets)?;
    let t = binary(targets)?;
    (0..c)
        .map(|j| {
            let s: Vec<f64> = (0..n).map(|i| scores.at2(i, j)).collect();
            let y: Vec<bool> = (0..n).map(|i| t[i * c + j]).collect();
            match average_precision(&s, &y) {
                Ok(ap) => Ok(Some(ap)),
                Err(Error::UndefinedAp) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

fn check(scores: &Tensor, targets: &Tensor) -> Result<(usize, usize)> {
    let dims = scores.shape2()?;
    if targets.dims() != scores.dims() {
        return Err(Error::shape(
            "mean_ap",
            format!("scores {:?} vs targets {:?}", scores.dims(), targets.dims()),
        ));
    }
    Ok(dims)
}

pub fn mean_ap(scores: &Tensor, targets: &Tensor, mode: ApMode) -> Result<f64> {
    check(scores, targets)?;
    match mode {
        ApMode::Micro => average_precision(scores.data(), &binary(targets)?),
        ApMode::Macro => {
            let aps: Vec<f64> = per_class_ap(scores, targets)?.into_iter().flatten().collect();
            if aps.is_empty() {
                return Err(Error::UndefinedAp);
            }
            Ok(aps.iter().sum::<f64>() / aps.len() as f64)
        }
    }
}
