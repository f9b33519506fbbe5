use super::ParamSet;
use crate::error::{Error, Result};

/// Trainable parameters and their momentum copy.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumPair {
    pub base: ParamSet,
    pub momentum: ParamSet,
    pub m: f64,
}

impl MomentumPair {
    /// Momentum branch starts as an exact copy of the base.
    pub fn new(base: ParamSet, m: f64) -> Result<Self> {
        check_m(m)?;
        Ok(Self {
            momentum: base.clone(),
            base,
            m,
        })
    }

    pub fn update(&mut self) -> Result<()> {
        ema_update(&mut self.momentum, &self.base, self.m)
    }
}

fn check_m(m: f64) -> Result<()> {
    if !(0.0..1.0).contains(&m) {
        return Err(Error::Invalid(format!("momentum {m} outside [0, 1)")));
    }
    Ok(())
}

/// `θm ← m·θm + (1−m)·θb` for every tensor.
pub fn ema_update(momentum: &mut ParamSet, base: &ParamSet, m: f64) -> Result<()> {
    check_m(m)?;
    let bad = momentum.shape_mismatches(base);
    if !bad.is_empty() {
        return Err(Error::Architecture(bad));
    }
    for (name, t) in momentum.iter_mut() {
        let b = base.get(name).expect("shapes checked");
        for (x, &y) in t.data_mut().iter_mut().zip(b.data()) {
            *x = m * *x + (1.0 - m) * y;
        }
    }
    Ok(())
}
