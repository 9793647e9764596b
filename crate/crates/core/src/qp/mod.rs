//! Convex quadratic programs and their solvers.
//!
//! ```text
//!     minimize    ½ yᵀ P y + cᵀ y + offset
//!     subject to  A_eq y  = b_eq
//!                 A_in y <= b_in
//!                 lb <= y <= ub
//! ```
//!
//! [`solve`] is a homogeneous self-dual interior-point method on a sparse
//! quasi-definite KKT factorization. [`kkt_oracle`] is an independent dense
//! active-set enumeration used to certify it on small problems.

mod builder;
pub mod dump;
mod ipm;
mod kkt;
pub(crate) mod ldl;

use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use builder::{LinExpr, QpBuilder};
pub use ipm::solve;
pub use kkt::kkt_oracle;

use crate::error::{Error, Result};
use crate::sparse::{dot, norm_inf, CscMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticProgram {
    pub n: usize,
    /// Upper triangle (including diagonal) of the symmetric Hessian.
    pub p: CscMatrix,
    pub c: Vec<f64>,
    pub offset: f64,
    pub a_eq: CscMatrix,
    pub b_eq: Vec<f64>,
    pub a_in: CscMatrix,
    pub b_in: Vec<f64>,
    pub lb: Vec<f64>,
    pub ub: Vec<f64>,
}

impl QuadraticProgram {
    /// Validates dimensions, finiteness and positive semidefiniteness of `p`.
    /// `p` may be given as a full symmetric matrix or as its upper triangle.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        p: CscMatrix,
        c: Vec<f64>,
        offset: f64,
        a_eq: CscMatrix,
        b_eq: Vec<f64>,
        a_in: CscMatrix,
        b_in: Vec<f64>,
        lb: Vec<f64>,
        ub: Vec<f64>,
    ) -> Result<Self> {
        let n = c.len();
        if p.nrows != n || p.ncols != n {
            return Err(Error::dim("QP Hessian", n, p.nrows.max(p.ncols)));
        }
        if a_eq.ncols != n || a_eq.nrows != b_eq.len() {
            return Err(Error::dim("QP equality block", b_eq.len(), a_eq.nrows));
        }
        if a_in.ncols != n || a_in.nrows != b_in.len() {
            return Err(Error::dim("QP inequality block", b_in.len(), a_in.nrows));
        }
        if lb.len() != n || ub.len() != n {
            return Err(Error::dim("QP bounds", n, lb.len().min(ub.len())));
        }
        let p = upper_triangle_of(&p)?;
        let finite = p.is_finite()
            && a_eq.is_finite()
            && a_in.is_finite()
            && c.iter().chain(&b_eq).chain(&b_in).all(|v| v.is_finite())
            && offset.is_finite();
        if !finite {
            return Err(Error::Validation("QP data contains non-finite entries".into()));
        }
        if lb.iter().any(|v| v.is_nan() || *v == f64::INFINITY)
            || ub.iter().any(|v| v.is_nan() || *v == f64::NEG_INFINITY)
        {
            return Err(Error::Validation("QP bounds must be finite or outward infinite".into()));
        }
        check_psd(&p)?;
        Ok(QuadraticProgram {
            n,
            p,
            c,
            offset,
            a_eq,
            b_eq,
            a_in,
            b_in,
            lb,
            ub,
        })
    }

    pub fn objective(&self, y: &[f64]) -> f64 {
        let mut py = vec![0.0; self.n];
        self.p.symv_upper(1.0, y, &mut py);
        0.5 * dot(y, &py) + dot(&self.c, y) + self.offset
    }

    /// Largest violation of any constraint or bound at `y`.
    pub fn max_violation(&self, y: &[f64]) -> f64 {
        let mut r = self.b_eq.iter().map(|b| -b).collect::<Vec<_>>();
        self.a_eq.gemv(1.0, y, &mut r);
        let mut worst = norm_inf(&r);
        let mut g = self.b_in.iter().map(|b| -b).collect::<Vec<_>>();
        self.a_in.gemv(1.0, y, &mut g);
        worst = g.iter().fold(worst, |w, v| w.max(*v));
        for j in 0..self.n {
            worst = worst.max(self.lb[j] - y[j]).max(y[j] - self.ub[j]);
        }
        worst
    }

    /// Returns the same problem with (P, c, offset) multiplied by `t`.
    pub fn scaled_objective(&self, t: f64) -> QuadraticProgram {
        let mut q = self.clone();
        q.p.nzval.iter_mut().for_each(|v| *v *= t);
        q.c.iter_mut().for_each(|v| *v *= t);
        q.offset *= t;
        q
    }
}

fn upper_triangle_of(p: &CscMatrix) -> Result<CscMatrix> {
    let has_lower = p.triplets().any(|(i, j, v)| i > j && v != 0.0);
    if !has_lower {
        let t: Vec<_> = p.triplets().filter(|(i, j, _)| i <= j).collect();
        return Ok(CscMatrix::from_triplets(p.nrows, p.ncols, &t));
    }
    // Full storage: require symmetry, keep the upper half.
    let d = p.to_dense();
    let scale = d.amax().max(1.0);
    if (&d - d.transpose()).amax() > 1e-12 * scale {
        return Err(Error::Validation("QP Hessian is not symmetric".into()));
    }
    let t: Vec<_> = p.triplets().filter(|(i, j, _)| i <= j).collect();
    Ok(CscMatrix::from_triplets(p.nrows, p.ncols, &t))
}

/// PSD test: Cholesky-style LDLᵀ of `P + δI` restricted to the coordinates
/// where `P` is structurally nonzero. Any nonpositive pivot means an
/// eigenvalue below −δ.
fn check_psd(p: &CscMatrix) -> Result<()> {
    let mut used = vec![false; p.ncols];
    for (i, j, v) in p.triplets() {
        if v != 0.0 {
            used[i] = true;
            used[j] = true;
        }
    }
    let idx: Vec<usize> = (0..p.ncols).filter(|&j| used[j]).collect();
    if idx.is_empty() {
        return Ok(());
    }
    let mut pos = vec![usize::MAX; p.ncols];
    for (k, &j) in idx.iter().enumerate() {
        pos[j] = k;
    }
    let delta = 1e-10 * p.max_abs().max(1.0);
    let mut t: Vec<_> = p
        .triplets()
        .filter(|&(_, _, v)| v != 0.0)
        .map(|(i, j, v)| (pos[i], pos[j], v))
        .collect();
    t.extend((0..idx.len()).map(|k| (k, k, delta)));
    let sub = CscMatrix::from_triplets(idx.len(), idx.len(), &t);
    let sym = ldl::Symbolic::analyze(&sub);
    let mut f = ldl::LdlFactor::new(sym, &vec![1.0; idx.len()]);
    f.factor(&sub.nzval);
    if f.regularized_pivots > 0 {
        return Err(Error::Validation("QP Hessian is not positive semidefinite".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    /// Stalled at reduced accuracy (residuals within the square root of the
    /// requested tolerances).
    AlmostOptimal,
    PrimalInfeasible,
    DualInfeasible,
    MaxIterations,
    NumericalError,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Settings {
    pub tol_feas: f64,
    pub tol_gap_abs: f64,
    pub tol_gap_rel: f64,
    pub tol_infeas: f64,
    pub max_iter: usize,
    pub static_reg: f64,
    pub refine_iters: usize,
    pub ruiz_iters: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            tol_feas: 1e-8,
            tol_gap_abs: 1e-8,
            tol_gap_rel: 1e-8,
            tol_infeas: 1e-8,
            max_iter: 200,
            static_reg: 1e-8,
            refine_iters: 10,
            ruiz_iters: 15,
        }
    }
}

impl Settings {
    pub fn with_tolerance(tol: f64) -> Self {
        Settings {
            tol_feas: tol,
            tol_gap_abs: tol,
            tol_gap_rel: tol,
            ..Settings::default()
        }
    }
}

/// Multipliers in the convention `L = f(y) + ν'(A_eq y − b_eq) + μ'(A_in y − b_in)
/// + u'(y − ub) + l'(lb − y)`, so inequality and bound multipliers are ≥ 0.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Duals {
    pub eq: Vec<f64>,
    pub ineq: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverResult {
    pub status: SolveStatus,
    pub y: Vec<f64>,
    pub objective: f64,
    pub duals: Duals,
    pub residuals: Residuals,
    pub iterations: usize,
    /// Certificate for infeasible (dual ray) or unbounded (primal ray) problems.
    pub certificate: Vec<f64>,
    pub solve_time: Duration,
}

impl SolverResult {
    pub fn is_optimal(&self) -> bool {
        matches!(self.status, SolveStatus::Optimal | SolveStatus::AlmostOptimal)
    }

    /// Converts non-optimal outcomes into [`Error::Solver`].
    pub fn into_optimal(self) -> Result<SolverResult> {
        if self.is_optimal() {
            Ok(self)
        } else {
            let certificate = if self.certificate.is_empty() {
                self.y.clone()
            } else {
                self.certificate.clone()
            };
            Err(Error::Solver {
                status: self.status,
                certificate,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_qp() -> QuadraticProgram {
        // min ½y² s.t. y >= 1
        QuadraticProgram::new(
            CscMatrix::identity(1),
            vec![0.0],
            0.0,
            CscMatrix::zeros(0, 1),
            vec![],
            CscMatrix::zeros(0, 1),
            vec![],
            vec![1.0],
            vec![f64::INFINITY],
        )
        .unwrap()
    }

    #[test]
    fn scalar_bound_kkt() {
        let r = solve(&scalar_qp(), &Settings::default());
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!((r.y[0] - 1.0).abs() < 1e-7);
        assert!((r.duals.lower[0] - 1.0).abs() < 1e-6);
        assert!((r.objective - 0.5).abs() < 1e-7);
    }

    #[test]
    fn indefinite_hessian_rejected() {
        let p = CscMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (1, 1, -1.0)]);
        let err = QuadraticProgram::new(
            p,
            vec![0.0; 2],
            0.0,
            CscMatrix::zeros(0, 2),
            vec![],
            CscMatrix::zeros(0, 2),
            vec![],
            vec![f64::NEG_INFINITY; 2],
            vec![f64::INFINITY; 2],
        );
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn asymmetric_full_hessian_rejected() {
        let p = CscMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (1, 0, 0.5), (1, 1, 1.0)]);
        let err = QuadraticProgram::new(
            p,
            vec![0.0; 2],
            0.0,
            CscMatrix::zeros(0, 2),
            vec![],
            CscMatrix::zeros(0, 2),
            vec![],
            vec![f64::NEG_INFINITY; 2],
            vec![f64::INFINITY; 2],
        );
        assert!(err.is_err());
    }

    #[test]
    fn contradictory_equalities_are_infeasible() {
        let a = CscMatrix::from_triplets(2, 1, &[(0, 0, 1.0), (1, 0, 1.0)]);
        let qp = QuadraticProgram::new(
            CscMatrix::identity(1),
            vec![0.0],
            0.0,
            a,
            vec![0.0, 1.0],
            CscMatrix::zeros(0, 1),
            vec![],
            vec![f64::NEG_INFINITY],
            vec![f64::INFINITY],
        )
        .unwrap();
        let r = solve(&qp, &Settings::default());
        assert_eq!(r.status, SolveStatus::PrimalInfeasible);
        assert!(r.into_optimal().unwrap_err().is_infeasible());
    }

    #[test]
    fn unbounded_lp_detected() {
        // min -y s.t. y >= 0
        let qp = QuadraticProgram::new(
            CscMatrix::zeros(1, 1),
            vec![-1.0],
            0.0,
            CscMatrix::zeros(0, 1),
            vec![],
            CscMatrix::zeros(0, 1),
            vec![],
            vec![0.0],
            vec![f64::INFINITY],
        )
        .unwrap();
        let r = solve(&qp, &Settings::default());
        assert_eq!(r.status, SolveStatus::DualInfeasible);
    }
}
