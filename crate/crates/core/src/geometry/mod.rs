//! Class-wise Wasserstein distances, compactness statistics and t-SNE.

mod ot;
mod tsne;

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use ot::{euclidean_cost, transport, wasserstein1, wasserstein1_weighted, TransportPlan};
pub use tsne::{
    joint_probabilities, kl_divergence, low_dim_affinities, tsne_embed, Affinities, TsneConfig, TsneResult,
    MAX_POINTS, PERPLEXITY_TOL,
};

use crate::data::LabeledFeatures;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Symmetric class-by-class W1 matrix with a zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub values: Matrix,
}

impl DistanceMatrix {
    pub fn num_classes(&self) -> usize {
        self.values.rows()
    }

    /// Mean over the off-diagonal entries.
    pub fn mean_off_diagonal(&self) -> f64 {
        let c = self.num_classes();
        if c < 2 {
            return 0.0;
        }
        self.values.sum() / (c * (c - 1)) as f64
    }

    /// One row per class, comma separated, no header.
    pub fn to_csv(&self) -> String {
        matrix_csv(&self.values)
    }
}

/// Plain CSV of a matrix with full round-trip precision.
pub fn matrix_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for r in 0..m.rows() {
        let line: Vec<String> = m.row(r).iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(out, "{}", line.join(","));
    }
    out
}

/// Embedding coordinates with their labels: header `x,y,label`.
pub fn embedding_csv(embedding: &Matrix, labels: &[usize]) -> Result<String> {
    if embedding.cols() != 2 || embedding.rows() != labels.len() {
        return Err(Error::usage(format!(
            "{:?} embedding with {} labels",
            embedding.shape(),
            labels.len()
        )));
    }
    let mut out = String::from("x,y,label\n");
    for (i, l) in labels.iter().enumerate() {
        let _ = writeln!(out, "{:?},{:?},{l}", embedding[(i, 0)], embedding[(i, 1)]);
    }
    Ok(out)
}

fn check_classes(lf: &LabeledFeatures) -> Result<usize> {
    let c = lf.num_classes();
    if c < 2 {
        return Err(Error::usage(format!("class distances need at least 2 classes, got {c}")));
    }
    let mut counts = vec![0usize; c];
    for &l in &lf.labels {
        counts[l] += 1;
    }
    if let Some(empty) = counts.iter().position(|&n| n == 0) {
        return Err(Error::usage(format!("class {empty} has no samples")));
    }
    Ok(c)
}

/// W1 between the uniform empirical distributions of every pair of classes.
pub fn class_distance_matrix(lf: &LabeledFeatures) -> Result<DistanceMatrix> {
    let c = check_classes(lf)?;
    let points: Vec<Matrix> = (0..c).map(|k| lf.class_points(k)).collect();
    let pairs: Vec<(usize, usize)> = (0..c).flat_map(|i| (i + 1..c).map(move |j| (i, j))).collect();
    let costs = pairs
        .par_iter()
        .map(|&(i, j)| wasserstein1(&points[i], &points[j]).map(|t| t.cost))
        .collect::<Result<Vec<f64>>>()?;
    let mut values = Matrix::zeros(c, c);
    for (&(i, j), w) in pairs.iter().zip(costs) {
        values[(i, j)] = w;
        values[(j, i)] = w;
    }
    Ok(DistanceMatrix { values })
}

/// Mean Euclidean distance over unordered pairs of one class; zero for a single sample.
pub fn mean_pairwise_distance(points: &Matrix) -> f64 {
    let n = points.rows();
    if n < 2 {
        return 0.0;
    }
    let d = euclidean_cost(points, points).expect("same width");
    d.sum() / (n * (n - 1)) as f64
}

/// Compactness and separation of one feature set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryStats {
    /// Mean pairwise intra-class distance per class.
    pub intra_class: Vec<f64>,
    pub mean_intra_class: f64,
    /// Mean off-diagonal class W1.
    pub mean_inter_class: f64,
    pub distance_matrix: Vec<Vec<f64>>,
}

impl GeometryStats {
    pub fn compute(lf: &LabeledFeatures) -> Result<Self> {
        let dm = class_distance_matrix(lf)?;
        let c = dm.num_classes();
        let intra_class: Vec<f64> = (0..c).map(|k| mean_pairwise_distance(&lf.class_points(k))).collect();
        Ok(GeometryStats {
            mean_intra_class: intra_class.iter().sum::<f64>() / c as f64,
            intra_class,
            mean_inter_class: dm.mean_off_diagonal(),
            distance_matrix: (0..c).map(|i| dm.values.row(i).to_vec()).collect(),
        })
    }
}

/// Statistics before and after a feature transform, with post minus pre deltas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityReport {
    pub pre: GeometryStats,
    pub post: GeometryStats,
    pub delta_intra_class: Vec<f64>,
    pub delta_mean_intra_class: f64,
    pub delta_mean_inter_class: f64,
}

pub fn separability_report(pre: &LabeledFeatures, post: &LabeledFeatures) -> Result<SeparabilityReport> {
    if pre.labels != post.labels {
        return Err(Error::usage("pre and post features carry different labels"));
    }
    let pre = GeometryStats::compute(pre)?;
    let post = GeometryStats::compute(post)?;
    Ok(SeparabilityReport {
        delta_intra_class: post.intra_class.iter().zip(&pre.intra_class).map(|(b, a)| b - a).collect(),
        delta_mean_intra_class: post.mean_intra_class - pre.mean_intra_class,
        delta_mean_inter_class: post.mean_inter_class - pre.mean_inter_class,
        pre,
        post,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SplitMix64;

    fn gaussian_classes(per_class: usize, seed: u64) -> LabeledFeatures {
        let mut rng = SplitMix64::new(seed);
        let m = 3 * per_class;
        let labels: Vec<usize> = (0..m).map(|j| j % 3).collect();
        let features = Matrix::from_fn(4, m, |r, j| if r == labels[j] { 3.0 } else { 0.0 } + rng.normal());
        LabeledFeatures::new(features, labels).unwrap()
    }

    #[test]
    fn coincident_classes_have_zero_distance() {
        let f = Matrix::from_rows(&[[0.0, 1.0, 0.0, 1.0], [2.0, 5.0, 2.0, 5.0]]);
        let lf = LabeledFeatures::new(f, vec![0, 0, 1, 1]).unwrap();
        let dm = class_distance_matrix(&lf).unwrap();
        assert!(dm.values[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn translation_bound_and_equality() {
        let mut rng = SplitMix64::new(6);
        let base = rng.normal_matrix(3, 5, 1.0);
        let shift = [0.3, -1.2, 0.7];
        let norm = shift.iter().map(|v| v * v).sum::<f64>().sqrt();
        let moved = Matrix::from_fn(3, 5, |r, c| base[(r, c)] + shift[r]);
        let lf = LabeledFeatures::new(Matrix::concat_cols(&[&base, &moved]).unwrap(), [vec![0; 5], vec![1; 5]].concat())
            .unwrap();
        let a = class_distance_matrix(&lf).unwrap().values[(0, 1)];
        assert!((a - norm).abs() < 1e-12, "{a} vs {norm}");

        let other = rng.normal_matrix(3, 5, 1.0);
        let moved_other = Matrix::from_fn(3, 5, |r, c| other[(r, c)] + shift[r]);
        let before = LabeledFeatures::new(Matrix::concat_cols(&[&base, &other]).unwrap(), [vec![0; 5], vec![1; 5]].concat())
            .unwrap();
        let after =
            LabeledFeatures::new(Matrix::concat_cols(&[&base, &moved_other]).unwrap(), [vec![0; 5], vec![1; 5]].concat())
                .unwrap();
        let d0 = class_distance_matrix(&before).unwrap().values[(0, 1)];
        let d1 = class_distance_matrix(&after).unwrap().values[(0, 1)];
        assert!(d1 <= d0 + norm + 1e-12);
    }

    #[test]
    fn distance_matrix_shape() {
        let lf = gaussian_classes(6, 1);
        let dm = class_distance_matrix(&lf).unwrap();
        for i in 0..3 {
            assert_eq!(dm.values[(i, i)], 0.0);
            for j in 0..3 {
                assert_eq!(dm.values[(i, j)], dm.values[(j, i)]);
                assert!(dm.values[(i, j)] >= 0.0);
            }
        }
        assert_eq!(dm.to_csv().lines().count(), 3);
    }

    #[test]
    fn distance_matrix_errors() {
        let one = LabeledFeatures::new(Matrix::zeros(2, 3), vec![0, 0, 0]).unwrap();
        assert!(matches!(class_distance_matrix(&one), Err(Error::Usage(_))));
        let gap = LabeledFeatures::new(Matrix::zeros(2, 3), vec![0, 2, 2]).unwrap();
        assert!(matches!(class_distance_matrix(&gap), Err(Error::Usage(_))));
    }

    #[test]
    fn identical_report_has_zero_deltas() {
        let lf = gaussian_classes(5, 2);
        let r = separability_report(&lf, &lf).unwrap();
        assert_eq!(r.delta_mean_inter_class, 0.0);
        assert_eq!(r.delta_mean_intra_class, 0.0);
        assert!(r.delta_intra_class.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn contraction_halves_intra_distance() {
        let lf = gaussian_classes(5, 3);
        let mut post = lf.clone();
        for k in 0..3 {
            let idx = lf.class_indices(k);
            for r in 0..4 {
                let mean = idx.iter().map(|&j| lf.features[(r, j)]).sum::<f64>() / idx.len() as f64;
                for &j in &idx {
                    post.features[(r, j)] = mean + 0.5 * (lf.features[(r, j)] - mean);
                }
            }
        }
        let r = separability_report(&lf, &post).unwrap();
        for k in 0..3 {
            assert!((r.post.intra_class[k] - 0.5 * r.pre.intra_class[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_labels_rejected() {
        let a = gaussian_classes(4, 1);
        let mut b = a.clone();
        b.labels.swap(0, 1);
        assert!(matches!(separability_report(&a, &b), Err(Error::Usage(_))));
    }

    #[test]
    fn embedding_csv_layout() {
        let e = Matrix::from_rows(&[[0.5, -1.0], [2.0, 0.25]]);
        assert_eq!(embedding_csv(&e, &[1, 0]).unwrap(), "x,y,label\n0.5,-1.0,1\n2.0,0.25,0\n");
        assert!(embedding_csv(&e, &[1]).is_err());
    }
}
