//! Synthetic datasets, IDX files and mini-batching.

mod idx;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use idx::{decode_idx_images, decode_idx_labels, encode_idx_images, encode_idx_labels, load_idx, save_idx};

use crate::error::{Error, Result};
use crate::linalg::{pxb, Matrix, SplitMix64};

/// Image stored height-major with channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(Error::usage(format!(
                "{height}x{width}x{channels} image needs {} pixels, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }
}

/// Feature columns with one class label per column.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFeatures {
    /// d x m.
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledFeatures {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != features.cols() {
            return Err(Error::usage(format!(
                "{} labels for {} feature columns",
                labels.len(),
                features.cols()
            )));
        }
        Ok(LabeledFeatures { features, labels })
    }

    /// One more than the largest label.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&c| c + 1)
    }

    /// Column indices carrying `class`.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&j| self.labels[j] == class).collect()
    }

    /// The columns of one class as rows of an `n_c x d` point matrix.
    pub fn class_points(&self, class: usize) -> Matrix {
        let idx = self.class_indices(class);
        let d = self.features.rows();
        Matrix::from_fn(idx.len(), d, |i, r| self.features[(r, idx[i])])
    }

    /// Writes the features as PXB1 and the labels as a JSON array.
    pub fn save(&self, features_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
        pxb::write_matrix(features_path, &self.features)?;
        fs::write(labels_path, serde_json::to_string(&self.labels)?)?;
        Ok(())
    }

    pub fn load(features_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Self> {
        let features = pxb::read_matrix(features_path)?;
        let labels: Vec<usize> = serde_json::from_str(&fs::read_to_string(labels_path)?)?;
        LabeledFeatures::new(features, labels)
    }
}

/// Union-of-subspaces generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubspaceSpec {
    pub dim: usize,
    pub subspace_dim: usize,
    pub classes: usize,
    pub samples_per_class: usize,
    pub noise: f64,
    pub seed: u64,
}

/// Samples plus the orthonormal basis (`d x r`) of every class.
#[derive(Clone, Debug)]
pub struct SubspaceSample {
    pub data: LabeledFeatures,
    pub bases: Vec<Matrix>,
}

fn orthonormal_basis(rng: &mut SplitMix64, d: usize, r: usize) -> Matrix {
    // Modified Gram-Schmidt with one reorthogonalization pass.
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(r);
    while cols.len() < r {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for _ in 0..2 {
            for q in &cols {
                let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            cols.push(v);
        }
    }
    Matrix::from_fn(d, r, |i, j| cols[j][i])
}

/// Draws `B_c α + noise` per sample, with `α` uniform on the unit sphere of `R^r`.
/// Columns are grouped by class.
pub fn gen_subspaces(spec: &SubspaceSpec) -> Result<SubspaceSample> {
    let (d, r) = (spec.dim, spec.subspace_dim);
    if r == 0 || r >= d {
        return Err(Error::usage(format!("subspace dimension {r} must be in 1..{d}")));
    }
    if spec.classes == 0 || spec.samples_per_class == 0 {
        return Err(Error::usage("need at least one class and one sample per class"));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::usage(format!("noise must be a finite nonnegative value, got {}", spec.noise)));
    }
    let mut rng = SplitMix64::new(spec.seed);
    let bases: Vec<Matrix> = (0..spec.classes).map(|_| orthonormal_basis(&mut rng, d, r)).collect();
    let m = spec.classes * spec.samples_per_class;
    let mut features = Matrix::zeros(d, m);
    let mut labels = Vec::with_capacity(m);
    for (c, b) in bases.iter().enumerate() {
        for s in 0..spec.samples_per_class {
            let j = c * spec.samples_per_class + s;
            let mut alpha: Vec<f64> = (0..r).map(|_| rng.normal()).collect();
            let norm = alpha.iter().map(|a| a * a).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            alpha.iter_mut().for_each(|a| *a /= norm);
            for i in 0..d {
                let clean: f64 = (0..r).map(|k| b[(i, k)] * alpha[k]).sum();
                features[(i, j)] = clean + spec.noise * rng.normal();
            }
            labels.push(c);
        }
    }
    Ok(SubspaceSample {
        data: LabeledFeatures { features, labels },
        bases,
    })
}

/// Samples with class labels and a disjoint train/test partition.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit<S = Image> {
    pub samples: Vec<S>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl<S> DatasetSplit<S> {
    /// Stratified seeded split: each class contributes `round(fraction · n_c)` samples
    /// to the test side, at least one when it has two or more samples.
    pub fn stratified(samples: Vec<S>, labels: Vec<usize>, test_fraction: f64, seed: u64) -> Result<Self> {
        if samples.len() != labels.len() {
            return Err(Error::usage(format!("{} samples but {} labels", samples.len(), labels.len())));
        }
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::usage(format!("test fraction {test_fraction} outside [0, 1)")));
        }
        let num_classes = labels.iter().max().map_or(0, |&c| c + 1);
        let mut rng = SplitMix64::new(seed);
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for c in 0..num_classes {
            let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            rng.shuffle(&mut idx);
            let mut n_test = (test_fraction * idx.len() as f64).round() as usize;
            if test_fraction > 0.0 && idx.len() >= 2 {
                n_test = n_test.clamp(1, idx.len() - 1);
            }
            test.extend_from_slice(&idx[..n_test]);
            train.extend_from_slice(&idx[n_test..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok(DatasetSplit {
            samples,
            labels,
            num_classes,
            train,
            test,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn gather<'a>(&'a self, indices: &[usize]) -> (Vec<&'a S>, Vec<usize>) {
        (indices.iter().map(|&i| &self.samples[i]).collect(), indices.iter().map(|&i| self.labels[i]).collect())
    }
}

/// Pattern families for the synthetic image task, in class order.
pub const PATTERNS: [&str; 8] = [
    "horizontal-bars",
    "vertical-bars",
    "cross",
    "blob",
    "diagonal",
    "ring",
    "anti-diagonal",
    "checker",
];

fn default_test_fraction() -> f64 {
    0.2
}

/// Synthetic image classification task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticImageSpec {
    /// Images are `size x size`, one channel.
    pub size: usize,
    pub classes: usize,
    pub samples_per_class: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    /// Maximum pattern displacement in pixels along each axis.
    #[serde(default)]
    pub jitter: usize,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    pub seed: u64,
}

impl SyntheticImageSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > PATTERNS.len() {
            return Err(Error::usage(format!("classes must be in 1..={}", PATTERNS.len())));
        }
        if self.size < 4 {
            return Err(Error::usage("images must be at least 4x4"));
        }
        if self.samples_per_class < 2 {
            return Err(Error::usage("need at least two samples per class for a train/test split"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::usage(format!("noise must be a finite nonnegative value, got {}", self.noise)));
        }
        Ok(())
    }
}

/// Noise-free intensity of `class` at pixel `(y, x)` with the pattern centre shifted by `(oy, ox)`.
pub fn pattern_value(class: usize, size: usize, y: usize, x: usize, oy: f64, ox: f64) -> f64 {
    let s = size as f64;
    let c = (s - 1.0) / 2.0;
    let dy = y as f64 - c - oy;
    let dx = x as f64 - c - ox;
    let on = |b: bool| if b { 1.0 } else { 0.0 };
    match class {
        0 => on((dy.abs() - s / 4.0).abs() <= 1.0),
        1 => on((dx.abs() - s / 4.0).abs() <= 1.0),
        2 => on(dy.abs() <= 1.0 || dx.abs() <= 1.0),
        3 => {
            let sigma = s / 6.0;
            (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
        }
        4 => on((dx - dy).abs() <= 1.0),
        5 => on(((dx * dx + dy * dy).sqrt() - s / 3.0).abs() <= 1.0),
        6 => on((dx + dy).abs() <= 1.0),
        7 => {
            let cell = (s / 4.0).max(1.0);
            on(((dy / cell).floor() + (dx / cell).floor()).rem_euclid(2.0) == 0.0)
        }
        _ => panic!("no pattern for class {class}"),
    }
}

/// Renders every class pattern with random displacement and pixel noise, then splits
/// the samples stratified by class.
pub fn gen_images(spec: &SyntheticImageSpec) -> Result<DatasetSplit> {
    spec.validate()?;
    let mut rng = SplitMix64::new(spec.seed);
    let n = spec.size;
    let mut samples = Vec::with_capacity(spec.classes * spec.samples_per_class);
    let mut labels = Vec::with_capacity(samples.capacity());
    for _ in 0..spec.samples_per_class {
        for c in 0..spec.classes {
            let j = spec.jitter as isize;
            let mut shift = || (rng.below(2 * spec.jitter + 1) as isize - j) as f64;
            let (oy, ox) = (shift(), shift());
            let mut pixels = Vec::with_capacity(n * n);
            for y in 0..n {
                for x in 0..n {
                    pixels.push(pattern_value(c, n, y, x, oy, ox) + spec.noise * rng.normal());
                }
            }
            samples.push(Image::new(n, n, 1, pixels)?);
            labels.push(c);
        }
    }
    DatasetSplit::stratified(samples, labels, spec.test_fraction, spec.seed ^ 0x5711_7000)
}

/// Shuffles `indices` with `rng` and cuts them into batches of `batch_size`. With
/// `merge_small`, a final batch of one sample joins the previous batch.
pub fn batches(indices: &[usize], batch_size: usize, rng: &mut SplitMix64, merge_small: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::usage("batch size must be ≥ 1"));
    }
    let mut order = indices.to_vec();
    rng.shuffle(&mut order);
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if merge_small && out.len() >= 2 && out.last().is_some_and(|b| b.len() < 2) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    Ok(out)
}
