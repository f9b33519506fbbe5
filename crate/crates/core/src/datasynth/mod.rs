//! Synthetic multi-label scene generator.
//!
//! Each scene is a square multi-channel image over a 3×3 grid: the first
//! drawn class covers the background and every further class paints one
//! axis-aligned rectangle inside its own grid cell. Pixels take their class
//! spectrum, and every season rescales the base image by a global factor and
//! adds Gaussian noise. Labels are the threshold-0 aggregation of the pixel
//! map, so stored labels and pixel maps can never disagree.

mod io;

pub use io::{
    decode_dataset, encode_dataset, manifest_csv, read_dataset, write_dataset, write_manifest,
    DATASET_MAGIC,
};

use rand::seq::index;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::labelsim::{aggregate_scene_labels, MultiHot, PixelMap};
use crate::numcore::Tensor;
use crate::rng::{normal, purpose, splitmix64, stream, Rng};

/// Fraction of scenes with k = 1..=9 labels.
pub const DEFAULT_LABEL_COUNTS: [f64; 9] = [0.17, 0.06, 0.07, 0.16, 0.18, 0.15, 0.11, 0.07, 0.03];
/// Fraction of scenes with 1..=4 seasons.
pub const DEFAULT_SEASON_COUNTS: [f64; 4] = [0.04, 0.16, 0.35, 0.45];
pub const MAX_SEASONS: usize = 4;
const GRID: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub num_scenes: usize,
    pub channels: usize,
    pub size: usize,
    pub num_classes: usize,
    pub label_counts: Vec<f64>,
    pub season_counts: Vec<f64>,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_scenes: 2000,
            channels: 4,
            size: 32,
            num_classes: 9,
            label_counts: DEFAULT_LABEL_COUNTS.to_vec(),
            season_counts: DEFAULT_SEASON_COUNTS.to_vec(),
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.channels == 0 || self.num_classes == 0 {
            return bad("channels and classes must be positive".into());
        }
        if self.num_classes > 16 {
            return bad(format!("{} classes exceed the 16-bit label", self.num_classes));
        }
        if self.size < GRID {
            return bad(format!("image size {} below {GRID}", self.size));
        }
        if self.label_counts.len() > self.num_classes.min(GRID * GRID) {
            return bad(format!(
                "label-count distribution covers {} labels, at most {} possible",
                self.label_counts.len(),
                self.num_classes.min(GRID * GRID)
            ));
        }
        if self.season_counts.is_empty() || self.season_counts.len() > MAX_SEASONS {
            return bad("season distribution must cover 1 to 4 seasons".into());
        }
        for (name, d) in [("label-count", &self.label_counts), ("season", &self.season_counts)] {
            let sum: f64 = d.iter().sum();
            if d.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (sum - 1.0).abs() > 1e-9 {
                return bad(format!("{name} distribution must be probabilities summing to 1"));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise std {} invalid", self.noise_std));
        }
        Ok(())
    }

    /// Mean spectrum of every class, `num_classes × channels`. Depends only on
    /// the seed and the channel count, so all scenes of a domain share it.
    pub fn class_spectra(&self) -> Vec<Vec<f64>> {
        let mut rng = stream(self.seed, &[purpose::SPECTRA, self.channels as u64]);
        (0..self.num_classes)
            .map(|_| (0..self.channels).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    /// 80/20 assignment from a hash of the scene id.
    pub fn of(id: u32) -> Self {
        if splitmix64(u64::from(id) ^ 0x5CE1_1D5E) % 5 == 0 {
            Split::Test
        } else {
            Split::Train
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: u32,
    /// `C × H × W` images, one per season.
    pub seasons: Vec<Tensor>,
    pub pixel_map: PixelMap,
    pub label: MultiHot,
}

impl Scene {
    pub fn split(&self) -> Split {
        Split::of(self.id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub size: usize,
    pub num_classes: usize,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Scene> {
        self.scenes.iter().filter(|s| s.split() == split).collect()
    }
}

fn categorical(rng: &mut Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn cell_bounds(size: usize, i: usize) -> (usize, usize) {
    (i * size / GRID, (i + 1) * size / GRID)
}

/// One scene with `k` labels drawn from the configured distribution.
pub fn generate_scene(rng: &mut Rng, cfg: &GenConfig) -> Result<(Vec<Tensor>, PixelMap, MultiHot)> {
    cfg.validate()?;
    let k = categorical(rng, &cfg.label_counts) + 1;
    generate_scene_with(rng, cfg, &cfg.class_spectra(), k)
}

/// Scene with exactly `k` labels.
pub fn generate_scene_with(
    rng: &mut Rng,
    cfg: &GenConfig,
    spectra: &[Vec<f64>],
    k: usize,
) -> Result<(Vec<Tensor>, PixelMap, MultiHot)> {
    if k == 0 || k > cfg.num_classes || k > GRID * GRID {
        return Err(Error::Invalid(format!(
            "{k} labels requested with {} classes",
            cfg.num_classes
        )));
    }
    let (n, c) = (cfg.size, cfg.channels);
    let classes = index::sample(rng, cfg.num_classes, k).into_vec();
    let mut map = vec![classes[0] as u8; n * n];
    let cells = index::sample(rng, GRID * GRID, k - 1).into_vec();
    for (&class, &cell) in classes[1..].iter().zip(&cells) {
        let (r0, r1) = cell_bounds(n, cell / GRID);
        let (c0, c1) = cell_bounds(n, cell % GRID);
        let (ch, cw) = (r1 - r0, c1 - c0);
        let h = rng.random_range(ch.div_ceil(2)..=ch);
        let w = rng.random_range(cw.div_ceil(2)..=cw);
        let top = r0 + rng.random_range(0..=ch - h);
        let left = c0 + rng.random_range(0..=cw - w);
        for row in top..top + h {
            map[row * n + left..row * n + left + w].fill(class as u8);
        }
    }
    let map = PixelMap::new(n, n, map)?;
    let label = aggregate_scene_labels(&map, cfg.num_classes, 0.0)?;
    debug_assert_eq!(label.count(), k);

    let seasons = categorical(rng, &cfg.season_counts) + 1;
    let mut images = Vec::with_capacity(seasons);
    for _ in 0..seasons {
        let factor = rng.random_range(0.7..1.3);
        let mut data = Vec::with_capacity(c * n * n);
        for ch in 0..c {
            for &class in map.classes() {
                let v = spectra[class as usize][ch] * factor + cfg.noise_std * normal(rng);
                // Stored precision, so in-memory and on-disk scenes agree.
                data.push(v as f32 as f64);
            }
        }
        images.push(Tensor::new(&[c, n, n], data)?);
    }
    Ok((images, map, label))
}

/// All scenes of `cfg`, each from its own seeded stream.
pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    if cfg.num_scenes > u32::MAX as usize {
        return Err(Error::Invalid("too many scenes".into()));
    }
    let spectra = cfg.class_spectra();
    let scenes = (0..cfg.num_scenes as u32)
        .map(|id| {
            let mut rng = stream(cfg.seed, &[purpose::GENERATE, u64::from(id)]);
            let k = categorical(&mut rng, &cfg.label_counts) + 1;
            let (seasons, pixel_map, label) = generate_scene_with(&mut rng, cfg, &spectra, k)?;
            Ok(Scene {
                id,
                seasons,
                pixel_map,
                label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        channels: cfg.channels,
        size: cfg.size,
        num_classes: cfg.num_classes,
        scenes,
    })
}

/// Generates and writes the dataset file plus its manifest CSV.
pub fn generate_dataset(
    cfg: &GenConfig,
    data_path: &std::path::Path,
    manifest_path: &std::path::Path,
) -> Result<Dataset> {
    let ds = generate(cfg)?;
    write_dataset(&ds, data_path)?;
    write_manifest(&ds, manifest_path)?;
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub num_scenes: usize,
    /// Fraction of scenes with k labels, index k-1.
    pub label_counts: Vec<f64>,
    /// Fraction of scenes containing each class.
    pub class_frequency: Vec<f64>,
    /// Fraction of scenes with s seasons, index s-1.
    pub season_counts: Vec<f64>,
    pub train: usize,
    pub test: usize,
}

impl DatasetStats {
    pub fn at_least_labels(&self, k: usize) -> f64 {
        self.label_counts.iter().skip(k.saturating_sub(1)).sum()
    }

    pub fn at_least_seasons(&self, s: usize) -> f64 {
        self.season_counts.iter().skip(s.saturating_sub(1)).sum()
    }
}

pub fn dataset_stats(ds: &Dataset) -> Result<DatasetStats> {
    let n = ds.scenes.len();
    if n == 0 {
        return Err(Error::Invalid("empty dataset".into()));
    }
    let c = ds.num_classes;
    let mut labels = vec![0usize; c];
    let mut classes = vec![0usize; c];
    let mut seasons = vec![0usize; MAX_SEASONS];
    let mut train = 0;
    for s in &ds.scenes {
        labels[s.label.count().clamp(1, c) - 1] += 1;
        for i in s.label.indices() {
            classes[i] += 1;
        }
        seasons[s.seasons.len().clamp(1, MAX_SEASONS) - 1] += 1;
        train += usize::from(s.split() == Split::Train);
    }
    let frac = |v: Vec<usize>| v.into_iter().map(|x| x as f64 / n as f64).collect();
    Ok(DatasetStats {
        num_scenes: n,
        label_counts: frac(labels),
        class_frequency: frac(classes),
        season_counts: frac(seasons),
        train,
        test: n - train,
    })
}
