use super::{Matrix, SplitMix64};

/// Power-iteration estimate of `σ_max(a)²`, the largest eigenvalue of `aᵀa`.
///
/// Starts from the normalized all-ones vector. Stops once the Rayleigh quotient
/// changes by less than `tol` relative between sweeps, or after `iters` sweeps.
/// A zero matrix yields 0.
pub fn spectral_norm_sq(a: &Matrix, iters: usize, tol: f64) -> f64 {
    spectral_norm_sq_with_vector(a, iters, tol).0
}

/// As [`spectral_norm_sq`], also returning the unit vector the estimate was
/// taken at (an approximate top right singular vector; zeros for a zero matrix).
pub fn spectral_norm_sq_with_vector(a: &Matrix, iters: usize, tol: f64) -> (f64, Vec<f64>) {
    let n = a.cols();
    if n == 0 || a.max_abs() == 0.0 {
        return (0.0, vec![0.0; n]);
    }
    let start = vec![1.0 / (n as f64).sqrt(); n];
    let est = power_iterate(a, start, iters, tol);
    if est.0 > 0.0 {
        return est;
    }
    // The all-ones start lies in the null space of `a`; retry from a fixed pseudo-random vector.
    let mut rng = SplitMix64::new(0x5eed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    normalize(&mut v);
    power_iterate(a, v, iters, tol)
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

fn apply(a: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..a.rows())
        .map(|i| a.row(i).iter().zip(v).map(|(x, y)| x * y).sum())
        .collect()
}

fn apply_t(a: &Matrix, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.cols()];
    for (i, &ui) in u.iter().enumerate() {
        for (o, x) in out.iter_mut().zip(a.row(i)) {
            *o += x * ui;
        }
    }
    out
}

fn power_iterate(a: &Matrix, mut v: Vec<f64>, iters: usize, tol: f64) -> (f64, Vec<f64>) {
    let mut estimate = 0.0;
    for _ in 0..iters.max(1) {
        let av = apply(a, &v);
        // Rayleigh quotient of aᵀa at unit v is ‖a v‖².
        let rq: f64 = av.iter().map(|x| x * x).sum();
        let mut next = apply_t(a, &av);
        if normalize(&mut next) == 0.0 {
            return (0.0, v);
        }
        v = next;
        let done = (rq - estimate).abs() <= tol * rq;
        estimate = rq;
        if done {
            break;
        }
    }
    // One more quotient at the final vector, which is at least as accurate.
    let av = apply(a, &v);
    (estimate.max(av.iter().map(|x| x * x).sum()), v)
}
