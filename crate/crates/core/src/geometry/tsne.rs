//! Exact O(m²) t-SNE.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, SplitMix64};

/// Tolerance on the achieved perplexity of each conditional distribution.
pub const PERPLEXITY_TOL: f64 = 1e-5;
const SEARCH_STEPS: usize = 200;
pub const MAX_POINTS: usize = 2000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub momentum_initial: f64,
    pub momentum_final: f64,
    pub momentum_switch: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 15.0,
            iterations: 500,
            learning_rate: 5.0,
            exaggeration: 4.0,
            exaggeration_iters: 50,
            momentum_initial: 0.5,
            momentum_final: 0.8,
            momentum_switch: 100,
            init_std: 1e-4,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self, m: usize) -> Result<()> {
        if m < 2 || m > MAX_POINTS {
            return Err(Error::usage(format!("t-SNE needs 2..={MAX_POINTS} points, got {m}")));
        }
        if !(self.perplexity > 0.0) || self.perplexity >= (m - 1) as f64 {
            return Err(Error::usage(format!(
                "perplexity {} must be positive and below m - 1 = {}",
                self.perplexity,
                m - 1
            )));
        }
        if !(self.learning_rate > 0.0) || !(self.exaggeration > 0.0) || !(self.init_std > 0.0) {
            return Err(Error::usage("t-SNE learning rate, exaggeration and init scale must be positive"));
        }
        Ok(())
    }
}

/// Symmetrized input affinities.
#[derive(Clone, Debug, PartialEq)]
pub struct Affinities {
    /// m x m joint probabilities, zero diagonal.
    pub p: Matrix,
    /// Achieved perplexity of each conditional row.
    pub perplexities: Vec<f64>,
    /// Points whose search missed the target by more than the tolerance.
    pub unconverged: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsneResult {
    /// m x 2.
    pub embedding: Matrix,
    /// KL(P || Q) against the unexaggerated P after every iteration.
    pub kl_trace: Vec<f64>,
    pub unconverged: Vec<usize>,
}

fn squared_distances(points: &[&[f64]]) -> Matrix {
    let m = points.len();
    let mut d = Matrix::zeros(m, m);
    for i in 0..m {
        for j in i + 1..m {
            let s: f64 = points[i].iter().zip(points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[(i, j)] = s;
            d[(j, i)] = s;
        }
    }
    d
}

/// Conditional row `p_{.|i}` at precision `beta = 1 / (2 σ_i²)`; returns the row and its entropy in nats.
fn conditional_row(d: &Matrix, i: usize, beta: f64, out: &mut [f64]) -> f64 {
    let m = d.rows();
    let dmin = (0..m).filter(|&j| j != i).map(|j| d[(i, j)]).fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    let mut weighted = 0.0;
    for j in 0..m {
        if j == i {
            out[j] = 0.0;
            continue;
        }
        let shifted = d[(i, j)] - dmin;
        let e = (-beta * shifted).exp();
        out[j] = e;
        sum += e;
        weighted += shifted * e;
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
    sum.ln() + beta * weighted / sum
}

/// Joint affinities of the columns of `features` at the given perplexity.
pub fn joint_probabilities(features: &Matrix, perplexity: f64) -> Result<Affinities> {
    let m = features.cols();
    if m < 2 {
        return Err(Error::usage(format!("t-SNE needs at least 2 points, got {m}")));
    }
    let t = features.transpose();
    let rows: Vec<&[f64]> = (0..m).map(|i| t.row(i)).collect();
    let d = squared_distances(&rows);
    let target = perplexity.ln();
    let mut cond = Matrix::zeros(m, m);
    let mut perplexities = Vec::with_capacity(m);
    let mut unconverged = Vec::new();
    for i in 0..m {
        let (mut lo, mut hi) = (0.0_f64, f64::INFINITY);
        let mut beta = 1.0;
        let mut best = (f64::INFINITY, 1.0);
        for _ in 0..SEARCH_STEPS {
            let h = conditional_row(&d, i, beta, cond.row_mut(i));
            let achieved = h.exp();
            let miss = (achieved - perplexity).abs();
            if miss < best.0 {
                best = (miss, beta);
            }
            if miss <= PERPLEXITY_TOL {
                break;
            }
            // Entropy falls as beta grows.
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = 0.5 * (beta + lo);
            }
        }
        let h = conditional_row(&d, i, best.1, cond.row_mut(i));
        perplexities.push(h.exp());
        if best.0 > PERPLEXITY_TOL {
            unconverged.push(i);
        }
    }
    let scale = 1.0 / (2.0 * m as f64);
    let p = Matrix::from_fn(m, m, |i, j| (cond[(i, j)] + cond[(j, i)]) * scale);
    Ok(Affinities {
        p,
        perplexities,
        unconverged,
    })
}

/// Student-t affinities of the embedding rows and their unnormalized kernels.
pub fn low_dim_affinities(y: &Matrix) -> (Matrix, Matrix) {
    let m = y.rows();
    let rows: Vec<&[f64]> = (0..m).map(|i| y.row(i)).collect();
    let d = squared_distances(&rows);
    let mut num = Matrix::zeros(m, m);
    let mut z = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                let k = 1.0 / (1.0 + d[(i, j)]);
                num[(i, j)] = k;
                z += k;
            }
        }
    }
    (num.scale(1.0 / z), num)
}

/// KL(P || Q) over the off-diagonal pairs with positive `p`.
pub fn kl_divergence(p: &Matrix, q: &Matrix) -> f64 {
    p.as_slice()
        .iter()
        .zip(q.as_slice())
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &qv)| pv * (pv / qv).ln())
        .sum()
}

/// Embeds the columns of `features` (d x m) in two dimensions.
pub fn tsne_embed(features: &Matrix, cfg: &TsneConfig) -> Result<TsneResult> {
    let m = features.cols();
    cfg.validate(m)?;
    let aff = joint_probabilities(features, cfg.perplexity)?;
    let p = aff.p;
    let mut rng = SplitMix64::derived(cfg.seed, 0x75AE);
    let mut y = rng.normal_matrix(m, 2, cfg.init_std);
    let mut velocity = Matrix::zeros(m, 2);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let ex = if it < cfg.exaggeration_iters { cfg.exaggeration } else { 1.0 };
        let momentum = if it < cfg.momentum_switch {
            cfg.momentum_initial
        } else {
            cfg.momentum_final
        };
        let (q, num) = low_dim_affinities(&y);
        let mut grad = Matrix::zeros(m, 2);
        for i in 0..m {
            for j in 0..m {
                if i == j {
                    continue;
                }
                let w = 4.0 * (ex * p[(i, j)] - q[(i, j)]) * num[(i, j)];
                for k in 0..2 {
                    grad[(i, k)] += w * (y[(i, k)] - y[(j, k)]);
                }
            }
        }
        for ((v, g), yv) in velocity
            .as_mut_slice()
            .iter_mut()
            .zip(grad.as_slice())
            .zip(y.as_mut_slice())
        {
            *v = momentum * *v - cfg.learning_rate * g;
            *yv += *v;
        }
        for k in 0..2 {
            let mean = (0..m).map(|i| y[(i, k)]).sum::<f64>() / m as f64;
            for i in 0..m {
                y[(i, k)] -= mean;
            }
        }
        trace.push(kl_divergence(&p, &low_dim_affinities(&y).0));
    }
    Ok(TsneResult {
        embedding: y,
        kl_trace: trace,
        unconverged: aff.unconverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clusters(m: usize, seed: u64) -> Matrix {
        let mut rng = SplitMix64::new(seed);
        Matrix::from_fn(5, m, |r, c| if r == c % 3 { 4.0 } else { 0.0 } + rng.normal())
    }

    #[test]
    fn joint_probabilities_normalized_and_symmetric() {
        let x = clusters(40, 2);
        let a = joint_probabilities(&x, 10.0).unwrap();
        assert!(a.unconverged.is_empty());
        assert!((a.p.sum() - 1.0).abs() < 1e-12);
        for i in 0..40 {
            assert_eq!(a.p[(i, i)], 0.0);
            assert!((a.perplexities[i] - 10.0).abs() <= PERPLEXITY_TOL);
            for j in 0..40 {
                assert_eq!(a.p[(i, j)], a.p[(j, i)]);
                assert!(a.p[(i, j)] >= 0.0);
            }
        }
    }

    #[test]
    fn two_points_split_evenly() {
        let x = Matrix::from_rows(&[[0.0, 3.0]]);
        let a = joint_probabilities(&x, 1.0).unwrap();
        assert_eq!(a.p[(0, 1)], 0.5);
        assert_eq!(a.p[(1, 0)], 0.5);
    }

    #[test]
    fn q_sums_to_one() {
        let mut rng = SplitMix64::new(5);
        let y = rng.normal_matrix(17, 2, 3.0);
        let (q, _) = low_dim_affinities(&y);
        assert!((q.sum() - 1.0).abs() < 1e-12);
        assert!((0..17).all(|i| q[(i, i)] == 0.0));
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let x = clusters(12, 8);
        let p = joint_probabilities(&x, 4.0).unwrap().p;
        let mut rng = SplitMix64::new(3);
        let y = rng.normal_matrix(12, 2, 1.0);
        let (q, num) = low_dim_affinities(&y);
        let h = 1e-6;
        for i in [0, 5, 11] {
            for k in 0..2 {
                let analytic: f64 = (0..12)
                    .filter(|&j| j != i)
                    .map(|j| 4.0 * (p[(i, j)] - q[(i, j)]) * num[(i, j)] * (y[(i, k)] - y[(j, k)]))
                    .sum();
                let mut yp = y.clone();
                yp[(i, k)] += h;
                let mut ym = y.clone();
                ym[(i, k)] -= h;
                let fd = (kl_divergence(&p, &low_dim_affinities(&yp).0) - kl_divergence(&p, &low_dim_affinities(&ym).0))
                    / (2.0 * h);
                assert!((analytic - fd).abs() < 1e-7, "{analytic} vs {fd}");
            }
        }
    }

    #[test]
    fn embedding_is_seeded_and_finite() {
        let x = clusters(30, 1);
        let cfg = TsneConfig {
            perplexity: 8.0,
            iterations: 120,
            ..TsneConfig::default()
        };
        let a = tsne_embed(&x, &cfg).unwrap();
        let b = tsne_embed(&x, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.embedding.shape(), (30, 2));
        assert!(a.embedding.is_finite());
        assert!(a.kl_trace.iter().all(|&k| k >= 0.0));
    }

    #[test]
    fn rejects_large_perplexity() {
        let x = clusters(10, 1);
        let cfg = TsneConfig {
            perplexity: 9.0,
            ..TsneConfig::default()
        };
        assert!(matches!(tsne_embed(&x, &cfg), Err(Error::Usage(_))));
        assert!(tsne_embed(&Matrix::zeros(3, 1), &TsneConfig::default()).is_err());
    }
}
