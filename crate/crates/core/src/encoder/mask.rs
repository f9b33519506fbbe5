use rand::seq::index;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Patches kept by the trainable branch.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPattern {
    visible: Vec<usize>,
    total: usize,
    ratio: f64,
}

impl MaskPattern {
    /// Every patch visible.
    pub fn full(total: usize) -> Self {
        Self {
            visible: (0..total).collect(),
            total,
            ratio: 0.0,
        }
    }

    /// Explicit visible set; sorted and checked for duplicates and range.
    pub fn from_visible(mut visible: Vec<usize>, total: usize) -> Result<Self> {
        visible.sort_unstable();
        if visible.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Invalid("duplicate visible patch index".into()));
        }
        if let Some(&last) = visible.last() {
            if last >= total {
                return Err(Error::Invalid(format!(
                    "visible patch {last} out of {total}"
                )));
            }
        }
        let ratio = 1.0 - visible.len() as f64 / total.max(1) as f64;
        Ok(Self {
            visible,
            total,
            ratio,
        })
    }

    pub fn visible(&self) -> &[usize] {
        &self.visible
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }
}

/// `P - floor(r * P)`, with a small tolerance so products such as
/// `0.29 * 100 = 28.999...` floor to the intended integer.
pub fn visible_count(total: usize, ratio: f64) -> usize {
    let masked = (ratio * total as f64 + 1e-9).floor() as usize;
    total - masked.min(total)
}

pub fn sample_mask(total: usize, ratio: f64, rng: &mut Rng) -> Result<MaskPattern> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Invalid(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let keep = visible_count(total, ratio);
    let mut visible = index::sample(rng, total, keep).into_vec();
    visible.sort_unstable();
    Ok(MaskPattern {
        visible,
        total,
        ratio,
    })
}
