use rand::Rng as _;

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::rng::Rng;

/// Probabilities and ranges of the view augmentations.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    /// Output side length after the random resized crop.
    pub crop_size: usize,
    /// Smallest crop area as a fraction of the image.
    pub min_scale: f64,
    pub hflip_p: f64,
    pub vflip_p: f64,
    pub jitter_p: f64,
    /// Per-channel factors are drawn from `U(1 - jitter, 1 + jitter)`.
    pub jitter: f64,
    pub grey_p: f64,
    pub blur_p: f64,
}

impl AugmentPolicy {
    pub fn standard(crop_size: usize) -> Self {
        Self {
            crop_size,
            min_scale: 0.5,
            hflip_p: 0.5,
            vflip_p: 0.5,
            jitter_p: 0.8,
            jitter: 0.2,
            grey_p: 0.2,
            blur_p: 0.5,
        }
    }

    /// Full-image crop and every random transform switched off.
    pub fn identity(crop_size: usize) -> Self {
        Self {
            crop_size,
            min_scale: 1.0,
            hflip_p: 0.0,
            vflip_p: 0.0,
            jitter_p: 0.0,
            jitter: 0.0,
            grey_p: 0.0,
            blur_p: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.hflip_p, self.vflip_p, self.jitter_p, self.grey_p, self.blur_p];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Invalid("augmentation probabilities must lie in [0, 1]".into()));
        }
        if !(self.min_scale > 0.0 && self.min_scale <= 1.0) || !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::Invalid("augmentation ranges out of bounds".into()));
        }
        if self.crop_size == 0 {
            return Err(Error::Invalid("crop size must be positive".into()));
        }
        Ok(())
    }
}

/// Every random decision of one augmentation, drawn up front.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentDraw {
    pub top: usize,
    pub left: usize,
    pub side: usize,
    pub hflip: bool,
    pub vflip: bool,
    pub jitter: Option<Vec<f64>>,
    pub grey: bool,
    pub blur: bool,
}

fn dims3(image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.dims() {
        [c, h, w] => Ok((c, h, w)),
        ref d => Err(Error::shape("augment", format!("expected C×H×W, got {d:?}"))),
    }
}

fn coin(rng: &mut Rng, p: f64) -> bool {
    p > 0.0 && rng.random_range(0.0..1.0) < p
}

pub fn sample_draw(image: &Tensor, policy: &AugmentPolicy, rng: &mut Rng) -> Result<AugmentDraw> {
    policy.validate()?;
    let (c, h, w) = dims3(image)?;
    let short = h.min(w);
    if policy.crop_size > short {
        return Err(Error::Invalid(format!(
            "crop size {} larger than {h}×{w} image",
            policy.crop_size
        )));
    }
    let scale = if policy.min_scale < 1.0 {
        rng.random_range(policy.min_scale..=1.0)
    } else {
        1.0
    };
    let side = ((scale.sqrt() * short as f64).round() as usize).clamp(1, short);
    let top = rng.random_range(0..=h - side);
    let left = rng.random_range(0..=w - side);
    let hflip = coin(rng, policy.hflip_p);
    let vflip = coin(rng, policy.vflip_p);
    let jitter = coin(rng, policy.jitter_p).then(|| {
        let j = policy.jitter;
        (0..c)
            .map(|_| if j > 0.0 { rng.random_range(1.0 - j..1.0 + j) } else { 1.0 })
            .collect()
    });
    let grey = coin(rng, policy.grey_p);
    let blur = coin(rng, policy.blur_p);
    Ok(AugmentDraw {
        top,
        left,
        side,
        hflip,
        vflip,
        jitter,
        grey,
        blur,
    })
}

/// Bilinear resize of the `side × side` window at `(top, left)` to
/// `out × out`, sampling pixel centers and clamping at the window edges.
fn resized_crop(src: &[f64], w: usize, top: usize, left: usize, side: usize, out: usize) -> Vec<f64> {
    if side == out {
        let mut v = Vec::with_capacity(out * out);
        for r in 0..out {
            let s = (top + r) * w + left;
            v.extend_from_slice(&src[s..s + out]);
        }
        return v;
    }
    let ratio = side as f64 / out as f64;
    let coord = |i: usize| {
        let x = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (side - 1) as f64);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(side - 1);
        (i0, i1, x - i0 as f64)
    };
    let cols: Vec<_> = (0..out).map(coord).collect();
    let mut v = Vec::with_capacity(out * out);
    for r in 0..out {
        let (r0, r1, fr) = coord(r);
        let row0 = &src[(top + r0) * w + left..];
        let row1 = &src[(top + r1) * w + left..];
        for &(c0, c1, fc) in &cols {
            let a = row0[c0] * (1.0 - fc) + row0[c1] * fc;
            let b = row1[c0] * (1.0 - fc) + row1[c1] * fc;
            v.push(a * (1.0 - fr) + b * fr);
        }
    }
    v
}

fn blur3(plane: &mut [f64], n: usize) {
    const K: [f64; 3] = [0.25, 0.5, 0.25];
    let at = |i: isize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            tmp[r * n + c] = (0..3)
                .map(|k| K[k] * plane[r * n + at(c as isize + k as isize - 1)])
                .sum();
        }
    }
    for r in 0..n {
        for c in 0..n {
            plane[r * n + c] = (0..3)
                .map(|k| K[k] * tmp[at(r as isize + k as isize - 1) * n + c])
                .sum();
        }
    }
}

pub fn apply_draw(image: &Tensor, draw: &AugmentDraw, crop_size: usize) -> Result<Tensor> {
    let (c, h, w) = dims3(image)?;
    if draw.top + draw.side > h || draw.left + draw.side > w || draw.side == 0 {
        return Err(Error::Invalid("crop window outside image".into()));
    }
    let n = crop_size;
    let mut planes: Vec<Vec<f64>> = (0..c)
        .map(|ch| resized_crop(&image.data()[ch * h * w..(ch + 1) * h * w], w, draw.top, draw.left, draw.side, n))
        .collect();
    for p in &mut planes {
        if draw.hflip {
            p.chunks_mut(n).for_each(<[f64]>::reverse);
        }
        if draw.vflip {
            let rows: Vec<Vec<f64>> = p.chunks(n).rev().map(<[f64]>::to_vec).collect();
            *p = rows.concat();
        }
    }
    if let Some(f) = &draw.jitter {
        for (p, &f) in planes.iter_mut().zip(f) {
            p.iter_mut().for_each(|v| *v *= f);
        }
    }
    if draw.grey {
        let mean: Vec<f64> = (0..n * n)
            .map(|i| planes.iter().map(|p| p[i]).sum::<f64>() / c as f64)
            .collect();
        planes.iter_mut().for_each(|p| p.copy_from_slice(&mean));
    }
    if draw.blur {
        planes.iter_mut().for_each(|p| blur3(p, n));
    }
    Tensor::new(&[c, n, n], planes.concat())
}

pub fn augment(image: &Tensor, rng: &mut Rng, policy: &AugmentPolicy) -> Result<Tensor> {
    let draw = sample_draw(image, policy, rng)?;
    apply_draw(image, &draw, policy.crop_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn image(c: usize, n: usize) -> Tensor {
        let mut rng = stream(3, &[]);
        Tensor::new(&[c, n, n], (0..c * n * n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn disabled_policy_is_identity() {
        let im = image(3, 8);
        let out = augment(&im, &mut stream(1, &[]), &AugmentPolicy::identity(8)).unwrap();
        assert_eq!(out, im);
    }

    #[test]
    fn seeded_output_is_reproducible() {
        let im = image(4, 16);
        let p = AugmentPolicy::standard(12);
        let a = augment(&im, &mut stream(7, &[]), &p).unwrap();
        let b = augment(&im, &mut stream(7, &[]), &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dims(), &[4, 12, 12]);
    }

    #[test]
    fn jitter_only_scales_each_channel() {
        let im = image(3, 8);
        let p = AugmentPolicy {
            jitter_p: 1.0,
            jitter: 0.2,
            ..AugmentPolicy::identity(8)
        };
        let draw = sample_draw(&im, &p, &mut stream(5, &[])).unwrap();
        let f = draw.jitter.clone().unwrap();
        assert!(f.iter().all(|f| (0.8..1.2).contains(f)));
        let out = augment(&im, &mut stream(5, &[]), &p).unwrap();
        for ch in 0..3 {
            for i in 0..64 {
                assert_eq!(out.data()[ch * 64 + i], f[ch] * im.data()[ch * 64 + i]);
            }
        }
    }

    #[test]
    fn flips_grey_and_blur() {
        let im = image(2, 4);
        let base = AugmentDraw {
            top: 0,
            left: 0,
            side: 4,
            hflip: true,
            vflip: false,
            jitter: None,
            grey: false,
            blur: false,
        };
        let h = apply_draw(&im, &base, 4).unwrap();
        assert_eq!(h.data()[0], im.data()[3]);
        let v = apply_draw(&im, &AugmentDraw { hflip: false, vflip: true, ..base.clone() }, 4).unwrap();
        assert_eq!(v.data()[0], im.data()[12]);
        let g = apply_draw(&im, &AugmentDraw { hflip: false, grey: true, ..base.clone() }, 4).unwrap();
        assert_eq!(g.data()[5], 0.5 * (im.data()[5] + im.data()[21]));
        assert_eq!(g.data()[5], g.data()[21]);
        let flat = Tensor::filled(&[1, 4, 4], 2.5);
        let b = apply_draw(&flat, &AugmentDraw { hflip: false, blur: true, ..base }, 4).unwrap();
        assert!(b.data().iter().all(|&x| (x - 2.5).abs() < 1e-15));
    }

    #[test]
    fn crop_resizes_to_target() {
        let im = image(1, 8);
        let draw = AugmentDraw {
            top: 2,
            left: 2,
            side: 4,
            hflip: false,
            vflip: false,
            jitter: None,
            grey: false,
            blur: false,
        };
        let up = apply_draw(&im, &draw, 8).unwrap();
        assert_eq!(up.dims(), &[1, 8, 8]);
        // Corner output pixels clamp onto the crop's corner pixels.
        assert_eq!(up.data()[0], im.data()[2 * 8 + 2]);
        assert_eq!(up.data()[63], im.data()[5 * 8 + 5]);
    }

    #[test]
    fn oversized_crop_is_an_error() {
        let im = image(1, 8);
        assert!(augment(&im, &mut stream(0, &[]), &AugmentPolicy::standard(9)).is_err());
    }
}
