//! Scene-level multi-hot labels aggregated from pixel class maps, and the
//! cross-scene label-similarity matrix used as the soft contrastive target.

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Number of land-cover classes in the default taxonomy.
pub const DEFAULT_CLASSES: usize = 9;

/// Default per-scene pixel-fraction threshold for label inclusion.
pub const DEFAULT_MIN_FRACTION: f64 = 0.01;

/// Per-pixel class ids of one scene, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMap {
    height: usize,
    width: usize,
    classes: Vec<u8>,
}

impl PixelMap {
    pub fn new(height: usize, width: usize, classes: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Invalid("pixel map must be nonempty".into()));
        }
        if classes.len() != height * width {
            return Err(Error::shape(
                "pixel map",
                format!("{height}x{width} needs {} ids, got {}", height * width, classes.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            classes,
        })
    }

    pub fn uniform(height: usize, width: usize, class: u8) -> Result<Self> {
        Self::new(height, width, vec![class; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.classes[row * self.width + col]
    }

    /// Pixel count per class id `0..num_classes`.
    pub fn histogram(&self, num_classes: usize) -> Result<Vec<usize>> {
        let mut counts = vec![0usize; num_classes];
        for &c in &self.classes {
            let slot = counts
                .get_mut(c as usize)
                .ok_or_else(|| Error::Invalid(format!("class id {c} ≥ class count {num_classes}")))?;
            *slot += 1;
        }
        Ok(counts)
    }

    /// Class covering the most pixels; ties go to the lowest id.
    pub fn modal_class(&self, num_classes: usize) -> Result<usize> {
        let counts = self.histogram(num_classes)?;
        let mut best = 0;
        for (c, &n) in counts.iter().enumerate() {
            if n > counts[best] {
                best = c;
            }
        }
        Ok(best)
    }
}

/// Presence vector over the class taxonomy.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MultiHot {
    bits: Vec<bool>,
}

impl MultiHot {
    pub fn empty(num_classes: usize) -> Self {
        Self {
            bits: vec![false; num_classes],
        }
    }

    pub fn from_indices(num_classes: usize, indices: &[usize]) -> Result<Self> {
        let mut m = Self::empty(num_classes);
        for &i in indices {
            if i >= num_classes {
                return Err(Error::Invalid(format!("class {i} ≥ class count {num_classes}")));
            }
            m.bits[i] = true;
        }
        Ok(m)
    }

    pub fn from_bitmask(num_classes: usize, mask: u16) -> Result<Self> {
        if num_classes > 16 || (num_classes < 16 && mask >> num_classes != 0) {
            return Err(Error::Invalid(format!(
                "bitmask {mask:#06x} does not fit {num_classes} classes"
            )));
        }
        Ok(Self {
            bits: (0..num_classes).map(|c| mask & (1 << c) != 0).collect(),
        })
    }

    pub fn bitmask(&self) -> u16 {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .fold(0u16, |m, (c, _)| m | (1 << c))
    }

    pub fn num_classes(&self) -> usize {
        self.bits.len()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn contains(&self, class: usize) -> bool {
        self.bits.get(class).copied().unwrap_or(false)
    }

    pub fn set(&mut self, class: usize) {
        self.bits[class] = true;
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&c| self.bits[c]).collect()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Unit-L2 nonnegative label vector.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedLabel(Vec<f64>);

impl NormalizedLabel {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// `Y_ij = y_i · y'_j` over normalized labels; entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSimilarityMatrix(Tensor);

impl LabelSimilarityMatrix {
    /// Wraps an arbitrary target matrix after checking entries lie in `[0, 1]`.
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        t.shape2()?;
        if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("label similarity {v} outside [0, 1]")));
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

/// Sets bit `c` when class `c` covers more than `min_fraction` of the pixels.
/// If thresholding leaves nothing, the modal class is kept.
pub fn aggregate_scene_labels(map: &PixelMap, num_classes: usize, min_fraction: f64) -> Result<MultiHot> {
    if num_classes == 0 {
        return Err(Error::Invalid("class count must be positive".into()));
    }
    if !(0.0..1.0).contains(&min_fraction) {
        return Err(Error::Invalid(format!("min_fraction {min_fraction} outside [0, 1)")));
    }
    let counts = map.histogram(num_classes)?;
    let total = (map.height * map.width) as f64;
    let mut label = MultiHot::empty(num_classes);
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 && n as f64 / total > min_fraction {
            label.set(c);
        }
    }
    if label.is_empty() {
        label.set(map.modal_class(num_classes)?);
    }
    Ok(label)
}

pub fn normalize_label(m: &MultiHot) -> Result<NormalizedLabel> {
    let k = m.count();
    if k == 0 {
        return Err(Error::Invalid("cannot normalize an empty multi-hot label".into()));
    }
    let w = 1.0 / (k as f64).sqrt();
    Ok(NormalizedLabel(
        m.bits.iter().map(|&b| if b { w } else { 0.0 }).collect(),
    ))
}

pub fn label_similarity(a: &[NormalizedLabel], b: &[NormalizedLabel]) -> Result<LabelSimilarityMatrix> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(
            "label_similarity",
            format!("batch sizes {} and {}", a.len(), b.len()),
        ));
    }
    let c = a[0].0.len();
    if a.iter().chain(b).any(|l| l.0.len() != c) {
        return Err(Error::shape("label_similarity", "class dimensions differ"));
    }
    let n = a.len();
    let mut y = Vec::with_capacity(n * n);
    for ai in a {
        for bj in b {
            let dot: f64 = ai.0.iter().zip(&bj.0).map(|(x, y)| x * y).sum();
            // identical sets must score exactly 1; distinct sets over ≤16
            // classes stay far below 1 - 1e-12
            y.push(if (dot - 1.0).abs() < 1e-12 { 1.0 } else { dot.clamp(0.0, 1.0) });
        }
    }
    Ok(LabelSimilarityMatrix(Tensor::from_parts(vec![n, n], y)))
}

/// Convenience: normalize a batch of multi-hot labels and compare it with
/// itself.
pub fn batch_label_similarity(labels: &[MultiHot]) -> Result<LabelSimilarityMatrix> {
    let normalized = labels.iter().map(normalize_label).collect::<Result<Vec<_>>>()?;
    label_similarity(&normalized, &normalized)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_map_is_one_hot() {
        let map = PixelMap::uniform(8, 8, 3).unwrap();
        let label = aggregate_scene_labels(&map, 9, DEFAULT_MIN_FRACTION).unwrap();
        assert_eq!(label.indices(), vec![3]);
    }

    #[test]
    fn sixty_forty_split_gives_two_labels() {
        let mut ids = vec![0u8; 64 * 64];
        // last 40% of pixels (1638.4 → 1638) belong to class 5
        let start = 64 * 64 - 1638;
        ids[start..].iter_mut().for_each(|c| *c = 5);
        let map = PixelMap::new(64, 64, ids).unwrap();
        let label = aggregate_scene_labels(&map, 9, 0.01).unwrap();
        assert_eq!(label.indices(), vec![0, 5]);
    }

    #[test]
    fn threshold_drops_sparse_class_and_falls_back_to_mode() {
        let mut ids = vec![2u8; 100];
        ids[0] = 7;
        let map = PixelMap::new(10, 10, ids).unwrap();
        assert_eq!(aggregate_scene_labels(&map, 9, 0.01).unwrap().indices(), vec![2]);
        assert_eq!(aggregate_scene_labels(&map, 9, 0.0).unwrap().indices(), vec![2, 7]);
        // every class below threshold: the modal class survives
        let ids: Vec<u8> = (0..100).map(|i| (i % 4) as u8).collect();
        let map = PixelMap::new(10, 10, ids).unwrap();
        assert_eq!(aggregate_scene_labels(&map, 4, 0.3).unwrap().indices(), vec![0]);
    }

    #[test]
    fn aggregation_errors() {
        let map = PixelMap::uniform(2, 2, 3).unwrap();
        assert!(aggregate_scene_labels(&map, 0, 0.0).is_err());
        assert!(aggregate_scene_labels(&map, 3, 0.0).is_err());
        assert!(PixelMap::new(0, 4, vec![]).is_err());
    }

    #[test]
    fn normalization_examples() {
        let one = normalize_label(&MultiHot::from_indices(9, &[4]).unwrap()).unwrap();
        assert_eq!(one.values()[4], 1.0);
        let two = normalize_label(&MultiHot::from_indices(9, &[1, 2]).unwrap()).unwrap();
        assert!((two.values()[1] - 0.707107).abs() < 1e-6);
        let all = normalize_label(&MultiHot::from_indices(9, &(0..9).collect::<Vec<_>>()).unwrap()).unwrap();
        assert!(all.values().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!(normalize_label(&MultiHot::empty(9)).is_err());
    }

    #[test]
    fn similarity_examples() {
        let water = MultiHot::from_indices(9, &[0]).unwrap();
        let water_trees = MultiHot::from_indices(9, &[0, 1]).unwrap();
        let crops = MultiHot::from_indices(9, &[4]).unwrap();
        let y = batch_label_similarity(&[water, water_trees, crops]).unwrap();
        let t = y.tensor();
        assert_eq!(t.at2(0, 0), 1.0);
        assert_eq!(t.at2(1, 1), 1.0);
        assert_eq!(t.at2(0, 2), 0.0);
        assert!((t.at2(0, 1) - 0.707107).abs() < 1e-6);
        assert!(label_similarity(&[], &[]).is_err());
    }

    #[test]
    fn bitmask_round_trip() {
        let m = MultiHot::from_indices(9, &[0, 3, 8]).unwrap();
        assert_eq!(m.bitmask(), 0b1_0000_1001);
        assert_eq!(MultiHot::from_bitmask(9, m.bitmask()).unwrap(), m);
        assert!(MultiHot::from_bitmask(9, 1 << 9).is_err());
    }

    fn labels_cosine(y: &LabelSimilarityMatrix, i: usize, j: usize) -> f64 {
        y.tensor().at2(i, j)
    }

    fn set_cosine(a: u16, b: u16) -> f64 {
        let shared = (a & b).count_ones() as f64;
        shared / ((a.count_ones() * b.count_ones()) as f64).sqrt()
    }

    #[test]
    fn all_subset_pairs_match_set_cosine_and_monotonicity() {
        let sets: Vec<u16> = (1u16..16).collect();
        let labels: Vec<MultiHot> = sets.iter().map(|&s| MultiHot::from_bitmask(4, s).unwrap()).collect();
        let y = batch_label_similarity(&labels).unwrap();
        for (i, &a) in sets.iter().enumerate() {
            for (j, &b) in sets.iter().enumerate() {
                let v = y.tensor().at2(i, j);
                assert!((v - set_cosine(a, b)).abs() < 1e-12);
                assert_eq!(v == 1.0, a == b);
                assert_eq!(v, y.tensor().at2(j, i));
                for c in 0..4u16 {
                    let bit = 1 << c;
                    if b & bit != 0 {
                        continue;
                    }
                    let before = labels_cosine(&y, i, j);
                    let after = {
                        let grown = MultiHot::from_bitmask(4, b | bit).unwrap();
                        let pair = batch_label_similarity(&[labels[i].clone(), grown]).unwrap();
                        pair.tensor().at2(0, 1)
                    };
                    assert!((after - set_cosine(a, b | bit)).abs() < 1e-12);
                    if a & bit != 0 {
                        assert!(after >= before - 1e-12, "shared class decreased {a:b} {b:b}");
                    } else {
                        assert!(after <= before + 1e-12, "foreign class increased {a:b} {b:b}");
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn single_label_similarity_is_binary(classes in prop::collection::vec(0usize..9, 1..20)) {
            let labels: Vec<MultiHot> = classes.iter().map(|&c| MultiHot::from_indices(9, &[c]).unwrap()).collect();
            let y = batch_label_similarity(&labels).unwrap();
            prop_assert!(y.tensor().data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }
}
