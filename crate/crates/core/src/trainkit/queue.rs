use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::rng::{normal, Rng};

/// FIFO bank of past momentum embeddings used as extra negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeQueue {
    dim: usize,
    rows: VecDeque<Vec<f64>>,
    capacity: usize,
}

impl NegativeQueue {
    /// Queue filled with random unit vectors.
    pub fn random(capacity: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        let rows = (0..capacity)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n).collect()
            })
            .collect::<Vec<_>>();
        Self::from_rows(rows, dim)
    }

    /// Queue holding `rows`, oldest first.
    pub fn from_rows(rows: Vec<Vec<f64>>, dim: usize) -> Result<Self> {
        if rows.is_empty() || dim == 0 {
            return Err(Error::Invalid("queue needs at least one row".into()));
        }
        check_rows(&rows, dim)?;
        Ok(Self {
            dim,
            capacity: rows.len(),
            rows: rows.into(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Rows oldest first.
    pub fn rows(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.rows.iter()
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.rows.iter().flatten().copied().collect();
        Tensor::from_parts(vec![self.capacity, self.dim], data)
    }
}

fn check_rows(rows: &[Vec<f64>], dim: usize) -> Result<()> {
    for r in rows {
        if r.len() != dim {
            return Err(Error::shape("queue", format!("key of dim {} into queue of dim {dim}", r.len())));
        }
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("queue key has norm {n}")));
        }
    }
    Ok(())
}

/// Appends `keys` (rows of a `B×d` tensor), evicting the oldest entries.
pub fn queue_push(q: &mut NegativeQueue, keys: &Tensor) -> Result<()> {
    let (b, d) = keys.shape2()?;
    if d != q.dim {
        return Err(Error::shape("queue_push", format!("keys of dim {d} into queue of dim {}", q.dim)));
    }
    if b > q.capacity {
        return Err(Error::Invalid(format!("batch of {b} exceeds queue capacity {}", q.capacity)));
    }
    let rows: Vec<Vec<f64>> = (0..b).map(|i| keys.row(i).to_vec()).collect();
    check_rows(&rows, d)?;
    for r in rows {
        q.rows.pop_front();
        q.rows.push_back(r);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn unit(i: usize) -> Vec<f64> {
        let mut v = vec![0.0; 6];
        v[i] = 1.0;
        v
    }

    #[test]
    fn fifo_trace() {
        let mut q = NegativeQueue::from_rows((0..4).map(unit).collect(), 6).unwrap();
        let keys = Tensor::from_rows(&[unit(4), unit(5)]).unwrap();
        queue_push(&mut q, &keys).unwrap();
        let got: Vec<&Vec<f64>> = q.rows().collect();
        assert_eq!(got, vec![&unit(2), &unit(3), &unit(4), &unit(5)]);
    }

    #[test]
    fn pushing_capacity_replaces_everything() {
        let mut q = NegativeQueue::random(3, 6, &mut stream(1, &[])).unwrap();
        let keys = Tensor::from_rows(&[unit(0), unit(1), unit(2)]).unwrap();
        queue_push(&mut q, &keys).unwrap();
        assert_eq!(q.to_tensor(), keys);
    }

    #[test]
    fn rejects_bad_keys() {
        let mut q = NegativeQueue::random(2, 6, &mut stream(1, &[])).unwrap();
        assert!(queue_push(&mut q, &Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap()).is_err());
        let big = Tensor::from_rows(&[unit(0), unit(1), unit(2)]).unwrap();
        assert!(queue_push(&mut q, &big).is_err());
        assert!(q.rows().all(|r| (r.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12));
    }
}
