//! Exact discrete optimal transport by the transportation simplex.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Consecutive degenerate pivots before switching to the smallest-index rule.
const DEGENERATE_LIMIT: usize = 50;

/// Optimal coupling between two discrete distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    /// P x Q flows.
    pub plan: Matrix,
    pub cost: f64,
}

/// Pairwise Euclidean distances between the rows of `x` and the rows of `y`.
pub fn euclidean_cost(x: &Matrix, y: &Matrix) -> Result<Matrix> {
    if x.cols() != y.cols() {
        return Err(Error::Dimension {
            op: "euclidean_cost",
            lhs: x.shape(),
            rhs: y.shape(),
        });
    }
    Ok(Matrix::from_fn(x.rows(), y.rows(), |i, j| {
        x.row(i)
            .iter()
            .zip(y.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }))
}

/// W1 between uniform empirical distributions on the rows of `x` and `y`.
pub fn wasserstein1(x: &Matrix, y: &Matrix) -> Result<TransportPlan> {
    if x.rows() == 0 || y.rows() == 0 {
        return Err(Error::usage("wasserstein1 needs non-empty point sets"));
    }
    let a = vec![1.0 / x.rows() as f64; x.rows()];
    let b = vec![1.0 / y.rows() as f64; y.rows()];
    wasserstein1_weighted(x, y, &a, &b)
}

/// W1 between weighted point sets given as rows, with Euclidean ground cost.
pub fn wasserstein1_weighted(x: &Matrix, y: &Matrix, a: &[f64], b: &[f64]) -> Result<TransportPlan> {
    if x.rows() == 0 || y.rows() == 0 {
        return Err(Error::usage("wasserstein1 needs non-empty point sets"));
    }
    if a.len() != x.rows() || b.len() != y.rows() {
        return Err(Error::usage(format!(
            "{} and {} weights for {} and {} points",
            a.len(),
            b.len(),
            x.rows(),
            y.rows()
        )));
    }
    transport(&euclidean_cost(x, y)?, a, b)
}

/// Minimum-cost transport for an arbitrary P x Q cost matrix.
///
/// The weights must be non-negative with equal totals.
pub fn transport(cost: &Matrix, a: &[f64], b: &[f64]) -> Result<TransportPlan> {
    let (p, q) = cost.shape();
    if p == 0 || q == 0 {
        return Err(Error::usage("transport needs non-empty marginals"));
    }
    if a.len() != p || b.len() != q {
        return Err(Error::usage(format!("marginals {}x{} for a {p}x{q} cost", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::usage("transport weights must be finite and non-negative"));
    }
    if !cost.is_finite() {
        return Err(Error::usage("transport cost must be finite"));
    }
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    if (sa - sb).abs() > 1e-9 * sa.max(sb).max(1.0) {
        return Err(Error::usage(format!("marginal totals differ: {sa} vs {sb}")));
    }
    let mut s = Simplex::northwest(cost, a, b);
    s.solve()?;
    let mut plan = Matrix::zeros(p, q);
    for &(i, j) in &s.basis {
        plan[(i, j)] = s.flow[i * q + j].max(0.0);
    }
    let cost_value = plan.as_slice().iter().zip(cost.as_slice()).map(|(g, c)| g * c).sum();
    Ok(TransportPlan { plan, cost: cost_value })
}

struct Simplex<'a> {
    cost: &'a Matrix,
    p: usize,
    q: usize,
    flow: Vec<f64>,
    basis: Vec<(usize, usize)>,
    in_basis: Vec<bool>,
}

impl<'a> Simplex<'a> {
    /// Northwest-corner start; keeps exactly P + Q - 1 basic cells so the basis is a spanning tree.
    fn northwest(cost: &'a Matrix, a: &[f64], b: &[f64]) -> Self {
        let (p, q) = cost.shape();
        let mut ra = a.to_vec();
        let mut rb = b.to_vec();
        let mut flow = vec![0.0; p * q];
        let mut in_basis = vec![false; p * q];
        let mut basis = Vec::with_capacity(p + q - 1);
        let (mut i, mut j) = (0, 0);
        loop {
            let x = ra[i].min(rb[j]);
            flow[i * q + j] = x;
            in_basis[i * q + j] = true;
            basis.push((i, j));
            ra[i] -= x;
            rb[j] -= x;
            if i == p - 1 && j == q - 1 {
                break;
            }
            if i == p - 1 {
                j += 1;
            } else if j == q - 1 || ra[i] <= rb[j] {
                ra[i] = 0.0;
                i += 1;
            } else {
                rb[j] = 0.0;
                j += 1;
            }
        }
        Simplex {
            cost,
            p,
            q,
            flow,
            basis,
            in_basis,
        }
    }

    /// Tree adjacency over nodes `0..p` (rows) and `p..p+q` (columns); entries are basis positions.
    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.p + self.q];
        for (k, &(i, j)) in self.basis.iter().enumerate() {
            adj[i].push(k);
            adj[self.p + j].push(k);
        }
        adj
    }

    fn other_end(&self, k: usize, node: usize) -> usize {
        let (i, j) = self.basis[k];
        if node == i {
            self.p + j
        } else {
            i
        }
    }

    /// Dual potentials with `u_0 = 0` and `u_i + v_j = c_ij` on the basis.
    fn potentials(&self, adj: &[Vec<usize>]) -> Vec<f64> {
        let n = self.p + self.q;
        let mut pot = vec![f64::NAN; n];
        pot[0] = 0.0;
        let mut stack = vec![0];
        while let Some(node) = stack.pop() {
            for &k in &adj[node] {
                let other = self.other_end(k, node);
                if pot[other].is_nan() {
                    let (i, j) = self.basis[k];
                    pot[other] = self.cost[(i, j)] - pot[node];
                    stack.push(other);
                }
            }
        }
        pot
    }

    /// Basis positions on the tree path from `from` to `to`, in order.
    fn path(&self, adj: &[Vec<usize>], from: usize, to: usize) -> Vec<usize> {
        let n = self.p + self.q;
        let mut via = vec![usize::MAX; n];
        let mut seen = vec![false; n];
        seen[from] = true;
        let mut stack = vec![from];
        while let Some(node) = stack.pop() {
            if node == to {
                break;
            }
            for &k in &adj[node] {
                let other = self.other_end(k, node);
                if !seen[other] {
                    seen[other] = true;
                    via[other] = k;
                    stack.push(other);
                }
            }
        }
        let mut out = Vec::new();
        let mut node = to;
        while node != from {
            let k = via[node];
            out.push(k);
            node = self.other_end(k, node);
        }
        out
    }

    fn solve(&mut self) -> Result<()> {
        let (p, q) = (self.p, self.q);
        let scale = self.cost.max_abs().max(1.0);
        let tol = 1e-12 * scale;
        let max_pivots = 1000 + 50 * p * q;
        let mut degenerate = 0;
        for _ in 0..max_pivots {
            let adj = self.adjacency();
            let pot = self.potentials(&adj);
            let bland = degenerate >= DEGENERATE_LIMIT;
            let mut entering = None;
            let mut best = -tol;
            'scan: for i in 0..p {
                for j in 0..q {
                    if self.in_basis[i * q + j] {
                        continue;
                    }
                    let r = self.cost[(i, j)] - pot[i] - pot[p + j];
                    if r < best {
                        entering = Some((i, j));
                        if bland {
                            break 'scan;
                        }
                        best = r;
                    }
                }
            }
            let Some((ei, ej)) = entering else {
                return Ok(());
            };
            // The path runs column ej -> row ei; its edges alternate -, +, -, ...
            let cycle = self.path(&adj, p + ej, ei);
            let mut leave = None;
            let mut theta = f64::INFINITY;
            for (pos, &k) in cycle.iter().enumerate().step_by(2) {
                let (i, j) = self.basis[k];
                let f = self.flow[i * q + j];
                let better = match leave {
                    None => true,
                    Some((_, lk)) => {
                        let (li, lj) = self.basis[lk];
                        f < theta || (f == theta && i * q + j < li * q + lj)
                    }
                };
                if better {
                    theta = f;
                    leave = Some((pos, k));
                }
            }
            let (_, lk) = leave.expect("cycle has a decreasing edge");
            let theta = theta.max(0.0);
            degenerate = if theta == 0.0 { degenerate + 1 } else { 0 };
            for (pos, &k) in cycle.iter().enumerate() {
                let (i, j) = self.basis[k];
                if pos % 2 == 0 {
                    self.flow[i * q + j] -= theta;
                } else {
                    self.flow[i * q + j] += theta;
                }
            }
            let (li, lj) = self.basis[lk];
            self.flow[li * q + lj] = 0.0;
            self.in_basis[li * q + lj] = false;
            self.flow[ei * q + ej] = theta;
            self.in_basis[ei * q + ej] = true;
            self.basis[lk] = (ei, ej);
        }
        Err(Error::usage(format!("transport simplex did not converge in {max_pivots} pivots")))
    }
}
