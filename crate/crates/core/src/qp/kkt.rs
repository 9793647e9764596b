//! Dense active-set enumeration oracle for small QPs.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::{Duals, QuadraticProgram, Residuals, SolveStatus, SolverResult};
use crate::error::{Error, Result};

pub const MAX_VARS: usize = 200;
pub const MAX_INEQUALITIES: usize = 20;

/// Solves `qp` by enumerating active sets of the inequality rows (finite
/// bounds included) in order of increasing size. The first active set whose
/// KKT system is consistent, primal feasible and dual feasible is returned;
/// for a convex QP any such point is optimal.
///
/// If no active set qualifies the problem is infeasible or unbounded and the
/// result carries `NumericalError` with an empty `y`.
pub fn kkt_oracle(qp: &QuadraticProgram) -> Result<SolverResult> {
    let start = Instant::now();
    let n = qp.n;
    if n > MAX_VARS {
        return Err(Error::SizeLimit(format!("kkt_oracle: {n} variables > {MAX_VARS}")));
    }
    // Dense inequality rows G y <= h.
    let mut g: Vec<Vec<f64>> = Vec::new();
    let mut h: Vec<f64> = Vec::new();
    let a_in = qp.a_in.to_dense();
    for i in 0..qp.b_in.len() {
        g.push(a_in.row(i).iter().copied().collect());
        h.push(qp.b_in[i]);
    }
    let mut bound_rows = Vec::new(); // (row, var, is_upper)
    for j in 0..n {
        if qp.ub[j].is_finite() {
            let mut r = vec![0.0; n];
            r[j] = 1.0;
            bound_rows.push((g.len(), j, true));
            g.push(r);
            h.push(qp.ub[j]);
        }
        if qp.lb[j].is_finite() {
            let mut r = vec![0.0; n];
            r[j] = -1.0;
            bound_rows.push((g.len(), j, false));
            g.push(r);
            h.push(-qp.lb[j]);
        }
    }
    let m = g.len();
    if m > MAX_INEQUALITIES {
        return Err(Error::SizeLimit(format!(
            "kkt_oracle: {m} inequalities > {MAX_INEQUALITIES}"
        )));
    }
    let mut p = qp.p.to_dense();
    for j in 0..n {
        for i in 0..j {
            p[(j, i)] = p[(i, j)];
        }
    }
    let a_eq = qp.a_eq.to_dense();
    let m_eq = qp.b_eq.len();
    let scale = 1.0
        + p.amax()
            .max(a_eq.amax())
            .max(qp.c.iter().chain(&qp.b_eq).chain(&h).fold(0.0f64, |a, v| a.max(v.abs())));
    let tol = 1e-9 * scale;

    let mut iterations = 0;
    for size in 0..=m.min(n) {
        for active in Combinations::new(m, size) {
            iterations += 1;
            let k = n + m_eq + size;
            let mut kkt = DMatrix::zeros(k, k);
            let mut rhs = DVector::zeros(k);
            kkt.view_mut((0, 0), (n, n)).copy_from(&p);
            for i in 0..m_eq {
                for j in 0..n {
                    kkt[(n + i, j)] = a_eq[(i, j)];
                    kkt[(j, n + i)] = a_eq[(i, j)];
                }
                rhs[n + i] = qp.b_eq[i];
            }
            for (s, &r) in active.iter().enumerate() {
                for j in 0..n {
                    kkt[(n + m_eq + s, j)] = g[r][j];
                    kkt[(j, n + m_eq + s)] = g[r][j];
                }
                rhs[n + m_eq + s] = h[r];
            }
            for j in 0..n {
                rhs[j] = -qp.c[j];
            }
            let Some(sol) = solve_consistent(&kkt, &rhs, tol) else {
                continue;
            };
            let y: Vec<f64> = sol.rows(0, n).iter().copied().collect();
            let mu: Vec<f64> = sol.rows(n + m_eq, size).iter().copied().collect();
            if mu.iter().any(|&v| v < -tol) {
                continue;
            }
            let feasible = (0..m).all(|r| dot(&g[r], &y) <= h[r] + tol);
            if !feasible {
                continue;
            }
            let mut full = vec![0.0; m];
            for (s, &r) in active.iter().enumerate() {
                full[r] = mu[s].max(0.0);
            }
            let mut duals = Duals {
                eq: sol.rows(n, m_eq).iter().copied().collect(),
                ineq: full[..qp.b_in.len()].to_vec(),
                lower: vec![0.0; n],
                upper: vec![0.0; n],
            };
            for &(r, j, upper) in &bound_rows {
                if upper {
                    duals.upper[j] = full[r];
                } else {
                    duals.lower[j] = full[r];
                }
            }
            let objective = qp.objective(&y);
            return Ok(SolverResult {
                status: SolveStatus::Optimal,
                residuals: Residuals {
                    primal: qp.max_violation(&y).max(0.0),
                    dual: 0.0,
                    gap: 0.0,
                },
                y,
                objective,
                duals,
                iterations,
                certificate: Vec::new(),
                solve_time: start.elapsed(),
            });
        }
    }
    Ok(SolverResult {
        status: SolveStatus::NumericalError,
        y: Vec::new(),
        objective: f64::NAN,
        duals: Duals::default(),
        residuals: Residuals::default(),
        iterations,
        certificate: Vec::new(),
        solve_time: start.elapsed(),
    })
}

/// LU solve, falling back to an SVD least-squares solution; `None` when the
/// system is inconsistent.
fn solve_consistent(k: &DMatrix<f64>, rhs: &DVector<f64>, tol: f64) -> Option<DVector<f64>> {
    if let Some(x) = k.clone().lu().solve(rhs) {
        if x.iter().all(|v| v.is_finite()) && (k * &x - rhs).amax() <= tol {
            return Some(x);
        }
    }
    let svd = k.clone().svd(true, true);
    let x = svd.solve(rhs, 1e-12 * svd.singular_values.max().max(1.0)).ok()?;
    ((k * &x - rhs).amax() <= tol).then_some(x)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Lexicographic k-subsets of 0..n.
struct Combinations {
    n: usize,
    idx: Vec<usize>,
    first: bool,
}

impl Combinations {
    fn new(n: usize, k: usize) -> Self {
        Combinations {
            n,
            idx: (0..k).collect(),
            first: true,
        }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;
    fn next(&mut self) -> Option<Vec<usize>> {
        let k = self.idx.len();
        if self.first {
            self.first = false;
            return (k <= self.n).then(|| self.idx.clone());
        }
        let mut i = k;
        while i > 0 {
            i -= 1;
            if self.idx[i] < self.n - k + i {
                self.idx[i] += 1;
                for j in i + 1..k {
                    self.idx[j] = self.idx[j - 1] + 1;
                }
                return Some(self.idx.clone());
            }
        }
        None
    }
}
