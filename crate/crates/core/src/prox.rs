//! Unrolled proximal-gradient self-expression.
//!
//! Given class tokens `Z` (d x m, one column per sample) the layer looks for a
//! nonnegative sparse `W` (m x m) with `Z ≈ ZW` by running a fixed number of
//! forward-backward steps on
//!
//! ```text
//! F(W) = ½‖Z − ZW‖²_F + λ‖W‖₁   subject to W ≥ 0
//! ```
//!
//! Each step takes a gradient step on the smooth part, optionally reshaped by a
//! preconditioner `R_k`, and then applies soft-thresholding followed by a ReLU:
//!
//! ```text
//! U_k     = W_k − γ_k · Zᵀ(ZW_k − Z) · R_k
//! W_{k+1} = max(0, sgn(U_k) · max(|U_k| − γ_k λ, 0))
//! ```
//!
//! The fixed variant uses `R_k = I` and a shared step `γ = 1/σ_max(Z)²`; the
//! learnable variant treats every `γ_k` and `R_k` as trainable parameters.
//! The layer output is the refined self-representation `Ẑ = Z W_{k_max}`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::tape::shrink_relu_scalar;
use crate::linalg::{spectral_norm_sq, Matrix, Tape, Var};

pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_LEARNABLE_GAMMA: f64 = 0.1;
pub const GAMMA_MIN: f64 = 1e-6;
pub const GAMMA_MAX: f64 = 10.0;

const POWER_ITERS: usize = 10_000;
const POWER_TOL: f64 = 1e-15;

/// Batch of class tokens, `d x m` with `m ≥ 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix(Matrix);

impl FeatureMatrix {
    pub fn new(z: Matrix) -> Result<Self> {
        if z.cols() < 2 {
            return Err(Error::usage(format!(
                "self-expression needs at least 2 samples, got {}",
                z.cols()
            )));
        }
        if !z.is_finite() {
            return Err(Error::usage("feature matrix has non-finite entries"));
        }
        Ok(FeatureMatrix(z))
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    /// Token dimension d.
    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    /// Batch size m.
    pub fn batch(&self) -> usize {
        self.0.cols()
    }
}

/// Self-expression weights, `m x m`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientMatrix(Matrix);

impl CoefficientMatrix {
    pub fn new(w: Matrix) -> Result<Self> {
        if w.rows() != w.cols() {
            return Err(Error::Dimension {
                op: "coefficient matrix",
                lhs: w.shape(),
                rhs: (w.cols(), w.rows()),
            });
        }
        Ok(CoefficientMatrix(w))
    }

    pub fn zeros(m: usize) -> Self {
        CoefficientMatrix(Matrix::zeros(m, m))
    }

    pub fn identity(m: usize) -> Self {
        CoefficientMatrix(Matrix::identity(m))
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn size(&self) -> usize {
        self.0.rows()
    }

    pub fn count_zeros(&self) -> usize {
        self.0.as_slice().iter().filter(|&&v| v == 0.0).count()
    }
}

/// Per-iteration parameters of an unroll.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxSchedule {
    pub lambda: f64,
    pub gammas: Vec<f64>,
    /// `None` for the fixed variant (every `R_k` is the identity).
    pub preconditioners: Option<Vec<Matrix>>,
    pub zero_diagonal: bool,
}

impl ProxSchedule {
    /// Fixed variant: one shared step for all `k_max` iterations.
    pub fn fixed(gamma: f64, k_max: usize, lambda: f64) -> Self {
        ProxSchedule {
            lambda,
            gammas: vec![gamma; k_max],
            preconditioners: None,
            zero_diagonal: false,
        }
    }

    /// Learnable variant at its initial point: every `γ_k` at 0.1 and every `R_k = I`.
    pub fn learnable_init(m: usize, k_max: usize, lambda: f64) -> Self {
        ProxSchedule {
            lambda,
            gammas: vec![DEFAULT_LEARNABLE_GAMMA; k_max],
            preconditioners: Some(vec![Matrix::identity(m); k_max]),
            zero_diagonal: false,
        }
    }

    pub fn with_zero_diagonal(mut self, on: bool) -> Self {
        self.zero_diagonal = on;
        self
    }

    pub fn k_max(&self) -> usize {
        self.gammas.len()
    }

    pub fn is_learnable(&self) -> bool {
        self.preconditioners.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::usage(format!("lambda must be finite and ≥ 0, got {}", self.lambda)));
        }
        if let Some(g) = self.gammas.iter().find(|g| !(**g > 0.0) || !g.is_finite()) {
            return Err(Error::usage(format!("step sizes must be finite and > 0, got {g}")));
        }
        if let Some(rs) = &self.preconditioners {
            if rs.len() != self.gammas.len() {
                return Err(Error::usage(format!(
                    "{} preconditioners for {} iterations",
                    rs.len(),
                    self.gammas.len()
                )));
            }
            if let Some(r) = rs.iter().find(|r| r.rows() != r.cols()) {
                return Err(Error::Dimension {
                    op: "preconditioner",
                    lhs: r.shape(),
                    rhs: (r.cols(), r.rows()),
                });
            }
        }
        Ok(())
    }

    /// Preconditioners adapted to batch size `m`: the leading block is kept and
    /// missing rows and columns are taken from the identity.
    pub fn for_batch(&self, m: usize) -> ProxSchedule {
        let mut s = self.clone();
        if let Some(rs) = &mut s.preconditioners {
            for r in rs.iter_mut() {
                if r.rows() != m {
                    *r = r.resize_square(m);
                }
            }
        }
        s
    }
}

/// Output of an unroll.
#[derive(Clone, Debug)]
pub struct SelfRepresentation {
    /// `Ẑ = Z · w_final`.
    pub z_hat: Matrix,
    pub w_final: CoefficientMatrix,
    /// `F(W_k)` for `k = 0..=k_max`.
    pub objective_trace: Vec<f64>,
}

/// `Zᵀ(ZW − Z)`, the gradient of `½‖Z − ZW‖²_F`.
pub fn reconstruction_gradient(z: &FeatureMatrix, w: &CoefficientMatrix) -> Result<Matrix> {
    let z = z.as_matrix();
    let residual = z.matmul(w.as_matrix())?.sub(z)?;
    z.t_matmul(&residual)
}

/// Soft-threshold followed by ReLU, elementwise. Equal to `max(0, u − t)`.
pub fn shrink_relu(u: &Matrix, threshold: f64) -> Result<Matrix> {
    if !(threshold >= 0.0) {
        return Err(Error::usage(format!("threshold must be ≥ 0, got {threshold}")));
    }
    Ok(u.map(|x| shrink_relu_scalar(x, threshold)))
}

fn zero_diagonal(mut w: Matrix) -> Matrix {
    for i in 0..w.rows() {
        w[(i, i)] = 0.0;
    }
    w
}

fn check_step(z: &FeatureMatrix, w: &CoefficientMatrix, gamma: f64) -> Result<()> {
    if !(gamma > 0.0) {
        return Err(Error::usage(format!("step size must be > 0, got {gamma}")));
    }
    if w.size() != z.batch() {
        return Err(Error::Dimension {
            op: "prox step",
            lhs: z.as_matrix().shape(),
            rhs: w.as_matrix().shape(),
        });
    }
    Ok(())
}

fn finish_step(u: Matrix, gamma: f64, lambda: f64, zero_diag: bool) -> Result<CoefficientMatrix> {
    let w = shrink_relu(&u, gamma * lambda)?;
    CoefficientMatrix::new(if zero_diag { zero_diagonal(w) } else { w })
}

/// One proximal-gradient step with identity preconditioner.
pub fn prox_step_fixed(
    z: &FeatureMatrix,
    w: &CoefficientMatrix,
    gamma: f64,
    lambda: f64,
    zero_diag: bool,
) -> Result<CoefficientMatrix> {
    check_step(z, w, gamma)?;
    let g = reconstruction_gradient(z, w)?;
    let u = w.as_matrix().sub(&g.scale(gamma))?;
    finish_step(u, gamma, lambda, zero_diag)
}

/// One proximal-gradient step with the gradient right-multiplied by `r`.
pub fn prox_step_learnable(
    z: &FeatureMatrix,
    w: &CoefficientMatrix,
    gamma: f64,
    lambda: f64,
    r: &Matrix,
    zero_diag: bool,
) -> Result<CoefficientMatrix> {
    check_step(z, w, gamma)?;
    if r.shape() != w.as_matrix().shape() {
        return Err(Error::Dimension {
            op: "preconditioner",
            lhs: w.as_matrix().shape(),
            rhs: r.shape(),
        });
    }
    let g = reconstruction_gradient(z, w)?.matmul(r)?;
    let u = w.as_matrix().sub(&g.scale(gamma))?;
    finish_step(u, gamma, lambda, zero_diag)
}

/// `½‖Z − ZW‖²_F + λ‖W‖₁`.
pub fn objective(z: &FeatureMatrix, w: &CoefficientMatrix, lambda: f64) -> Result<f64> {
    let zm = z.as_matrix();
    let residual = zm.sub(&zm.matmul(w.as_matrix())?)?;
    Ok(0.5 * residual.frobenius_norm_sq() + lambda * w.as_matrix().l1_norm())
}

/// `1 / σ_max(Z)²`, the reciprocal Lipschitz constant of the reconstruction gradient.
pub fn default_step(z: &FeatureMatrix) -> Result<f64> {
    let l = lipschitz(z.as_matrix());
    if l == 0.0 {
        return Err(Error::usage("default step undefined for a zero feature matrix"));
    }
    Ok(1.0 / l)
}

/// [`default_step`] recorded on a tape, differentiable with respect to `z`.
pub fn default_step_recorded(tape: &mut Tape, z: Var) -> Result<Var> {
    tape.inv_spectral_sq(z, POWER_ITERS, POWER_TOL)
}

pub(crate) fn lipschitz(z: &Matrix) -> f64 {
    spectral_norm_sq(z, POWER_ITERS, POWER_TOL)
}

/// Runs `schedule.k_max()` steps from `w0`.
pub fn unroll(
    z: &FeatureMatrix,
    schedule: &ProxSchedule,
    w0: &CoefficientMatrix,
) -> Result<SelfRepresentation> {
    schedule.validate()?;
    if w0.size() != z.batch() {
        return Err(Error::Dimension {
            op: "unroll",
            lhs: z.as_matrix().shape(),
            rhs: w0.as_matrix().shape(),
        });
    }
    let mut w = w0.clone();
    let mut trace = Vec::with_capacity(schedule.k_max() + 1);
    trace.push(objective(z, &w, schedule.lambda)?);
    for k in 0..schedule.k_max() {
        let gamma = schedule.gammas[k];
        w = match &schedule.preconditioners {
            Some(rs) => prox_step_learnable(z, &w, gamma, schedule.lambda, &rs[k], schedule.zero_diagonal)?,
            None => prox_step_fixed(z, &w, gamma, schedule.lambda, schedule.zero_diagonal)?,
        };
        trace.push(objective(z, &w, schedule.lambda)?);
    }
    let z_hat = z.as_matrix().matmul(w.as_matrix())?;
    Ok(SelfRepresentation {
        z_hat,
        w_final: w,
        objective_trace: trace,
    })
}

/// Step sizes and preconditioners bound to tape nodes.
#[derive(Clone, Debug)]
pub struct RecordedSchedule {
    pub lambda: f64,
    /// 1x1 nodes.
    pub gammas: Vec<Var>,
    /// m x m nodes, or `None` for the identity.
    pub preconditioners: Option<Vec<Var>>,
    pub zero_diagonal: bool,
}

/// Result of an unroll recorded on a tape.
#[derive(Clone, Debug)]
pub struct RecordedUnroll {
    pub z_hat: Var,
    pub w_final: Var,
    pub objective_trace: Vec<f64>,
}

/// Records the unroll on `tape`, using the same arithmetic as [`unroll`] so
/// both produce bit-identical values. Preconditioners whose size differs from
/// the batch are adapted as in [`ProxSchedule::for_batch`].
pub fn unroll_recorded(
    tape: &mut Tape,
    z: Var,
    schedule: &RecordedSchedule,
    w0: Var,
) -> Result<RecordedUnroll> {
    let (_, m) = tape.shape(z);
    if m < 2 {
        return Err(Error::config(format!(
            "self-expression needs at least 2 samples per batch, got {m}"
        )));
    }
    if tape.shape(w0) != (m, m) {
        return Err(Error::Dimension {
            op: "unroll",
            lhs: tape.shape(z),
            rhs: tape.shape(w0),
        });
    }
    let lambda = schedule.lambda;
    let fm = FeatureMatrix::new(tape.value(z).clone())?;
    let trace_of = |tape: &Tape, w: Var| -> Result<f64> {
        objective(&fm, &CoefficientMatrix::new(tape.value(w).clone())?, lambda)
    };

    let zt = tape.transpose(z);
    let mut w = w0;
    let mut trace = vec![trace_of(tape, w)?];
    for (k, &gamma) in schedule.gammas.iter().enumerate() {
        let zw = tape.matmul(z, w)?;
        let residual = tape.sub(zw, z)?;
        let mut g = tape.matmul(zt, residual)?;
        if let Some(rs) = &schedule.preconditioners {
            let mut r = rs[k];
            if tape.shape(r) != (m, m) {
                r = tape.resize_square(r, m);
            }
            g = tape.matmul(g, r)?;
        }
        let step = tape.scale_by(g, gamma)?;
        let u = tape.sub(w, step)?;
        let threshold = tape.scale(gamma, lambda);
        w = tape.shrink_relu(u, threshold)?;
        if schedule.zero_diagonal {
            w = tape.zero_diagonal(w);
        }
        trace.push(trace_of(tape, w)?);
    }
    let z_hat = tape.matmul(z, w)?;
    Ok(RecordedUnroll {
        z_hat,
        w_final: w,
        objective_trace: trace,
    })
}

/// Fractions of `Σ|W_ij|` falling on same-label pairs and on cross-label pairs.
pub fn block_mass_fractions(w: &Matrix, labels: &[usize]) -> (f64, f64) {
    assert_eq!(w.rows(), labels.len());
    let mut within = 0.0;
    let mut cross = 0.0;
    for i in 0..w.rows() {
        for j in 0..w.cols() {
            let v = w[(i, j)].abs();
            if labels[i] == labels[j] {
                within += v;
            } else {
                cross += v;
            }
        }
    }
    let total = within + cross;
    if total == 0.0 {
        return (0.0, 0.0);
    }
    (within / total, cross / total)
}
