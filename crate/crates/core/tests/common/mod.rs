//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use minilp::{ComparisonOp, OptimizationDirection, Problem};

pub type Dense = Vec<Vec<f64>>;

pub fn dense(m: &proxbundle::Matrix) -> Dense {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(a: &Dense) -> Vec<f64> {
    let n = a.len();
    let mut a = a.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

pub fn gram(z: &Dense) -> Dense {
    let (d, m) = (z.len(), z[0].len());
    (0..m)
        .map(|i| (0..m).map(|j| (0..d).map(|r| z[r][i] * z[r][j]).sum()).collect())
        .collect()
}

/// Largest squared singular value of `z`.
pub fn sigma_max_sq(z: &Dense) -> f64 {
    jacobi_eigenvalues(&gram(z)).into_iter().fold(0.0, f64::max)
}

/// Rank of `z` (rows x cols) by Gaussian elimination with partial pivoting.
pub fn rank(z: &Dense, tol: f64) -> usize {
    let mut a = z.clone();
    let (rows, cols) = (a.len(), a[0].len());
    let mut r = 0;
    for c in 0..cols {
        let Some(piv) = (r..rows).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())) else {
            break;
        };
        if a[piv][c].abs() <= tol {
            continue;
        }
        a.swap(r, piv);
        for i in r + 1..rows {
            let f = a[i][c] / a[r][c];
            for k in c..cols {
                a[i][k] -= f * a[r][k];
            }
        }
        r += 1;
        if r == rows {
            break;
        }
    }
    r
}

/// Plain-loop ISTA on `½‖Z − ZW‖² + λ‖W‖₁` with a nonnegativity constraint.
pub fn reference_ista(z: &Dense, lambda: f64, gamma: f64, iters: usize, zero_diagonal: bool) -> Dense {
    let m = z[0].len();
    let g = gram(z);
    let mut w = vec![vec![0.0; m]; m];
    for _ in 0..iters {
        // Zᵀ(ZW − Z) = G W − G.
        let mut next = vec![vec![0.0; m]; m];
        for i in 0..m {
            for j in 0..m {
                let gw: f64 = (0..m).map(|k| g[i][k] * w[k][j]).sum();
                let u = w[i][j] - gamma * (gw - g[i][j]);
                next[i][j] = if zero_diagonal && i == j { 0.0 } else { (u - gamma * lambda).max(0.0) };
            }
        }
        w = next;
    }
    w
}

pub fn mass_fractions(w: &Dense, labels: &[usize]) -> (f64, f64) {
    let mut within = 0.0;
    let mut cross = 0.0;
    for (i, row) in w.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if labels[i] == labels[j] {
                within += v.abs();
            } else {
                cross += v.abs();
            }
        }
    }
    (within / (within + cross), cross / (within + cross))
}

/// Transport optimum by enumerating every basic feasible solution.
///
/// Each basis of the transportation polytope is a spanning tree of the
/// complete bipartite graph on rows and columns; flows on a tree are fixed by
/// peeling leaves.
pub fn transport_by_vertices(cost: &Dense, a: &[f64], b: &[f64]) -> f64 {
    let (p, q) = (a.len(), b.len());
    let cells: Vec<(usize, usize)> = (0..p).flat_map(|i| (0..q).map(move |j| (i, j))).collect();
    let need = p + q - 1;
    let mut best = f64::INFINITY;
    let mut chosen = Vec::with_capacity(need);
    let mut parent: Vec<usize> = (0..p + q).collect();
    fn find(parent: &[usize], mut x: usize) -> usize {
        while parent[x] != x {
            x = parent[x];
        }
        x
    }
    #[allow(clippy::too_many_arguments)]
    fn rec(
        start: usize,
        cells: &[(usize, usize)],
        need: usize,
        chosen: &mut Vec<usize>,
        parent: &mut Vec<usize>,
        cost: &Dense,
        a: &[f64],
        b: &[f64],
        best: &mut f64,
    ) {
        if chosen.len() == need {
            if let Some(c) = tree_cost(chosen, cells, cost, a, b) {
                *best = best.min(c);
            }
            return;
        }
        if cells.len() - start < need - chosen.len() {
            return;
        }
        for k in start..cells.len() {
            let (i, j) = cells[k];
            let (ri, rj) = (find(parent, i), find(parent, a.len() + j));
            if ri == rj {
                continue;
            }
            let saved = parent.clone();
            parent[ri] = rj;
            chosen.push(k);
            rec(k + 1, cells, need, chosen, parent, cost, a, b, best);
            chosen.pop();
            *parent = saved;
        }
    }
    rec(0, &cells, need, &mut chosen, &mut parent, cost, a, b, &mut best);
    best
}

fn tree_cost(chosen: &[usize], cells: &[(usize, usize)], cost: &Dense, a: &[f64], b: &[f64]) -> Option<f64> {
    let p = a.len();
    let mut supply: Vec<f64> = a.iter().chain(b).copied().collect();
    let mut alive: Vec<bool> = vec![true; chosen.len()];
    let mut degree = vec![0usize; supply.len()];
    let ends = |k: usize| (cells[chosen[k]].0, p + cells[chosen[k]].1);
    for k in 0..chosen.len() {
        let (u, v) = ends(k);
        degree[u] += 1;
        degree[v] += 1;
    }
    let mut total = 0.0;
    for _ in 0..chosen.len() {
        let k = (0..chosen.len()).find(|&k| {
            let (u, v) = ends(k);
            alive[k] && (degree[u] == 1 || degree[v] == 1)
        })?;
        let (u, v) = ends(k);
        let (leaf, other) = if degree[u] == 1 { (u, v) } else { (v, u) };
        let f = supply[leaf];
        if f < -1e-12 {
            return None;
        }
        supply[other] -= f;
        supply[leaf] = 0.0;
        degree[u] -= 1;
        degree[v] -= 1;
        alive[k] = false;
        let (i, j) = cells[chosen[k]];
        total += f * cost[i][j];
    }
    Some(total)
}

/// Transport optimum from a general-purpose LP solver.
pub fn transport_by_lp(cost: &Dense, a: &[f64], b: &[f64]) -> f64 {
    let (p, q) = (a.len(), b.len());
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<Vec<_>> = (0..p)
        .map(|i| (0..q).map(|j| lp.add_var(cost[i][j], (0.0, f64::INFINITY))).collect())
        .collect();
    for (i, row) in vars.iter().enumerate() {
        let expr: Vec<_> = row.iter().map(|&v| (v, 1.0)).collect();
        lp.add_constraint(&expr[..], ComparisonOp::Eq, a[i]);
    }
    for (j, &bj) in b.iter().enumerate() {
        let expr: Vec<_> = vars.iter().map(|row| (row[j], 1.0)).collect();
        lp.add_constraint(&expr[..], ComparisonOp::Eq, bj);
    }
    lp.solve().expect("transport LP is feasible").objective()
}

pub fn euclidean_cost(x: &Dense, y: &Dense) -> Dense {
    x.iter()
        .map(|xi| {
            y.iter()
                .map(|yj| xi.iter().zip(yj).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt())
                .collect()
        })
        .collect()
}
