//! Wasserstein ambiguity sets, CVaR encodings and the dual reformulation of
//! worst-case expectations of max-of-affine losses.
//!
//! For a loss `ℓ(ξ) = max_k ⟨a_k(y), ξ⟩ + b_k(y)`, support `{ξ : Hξ <= d}`,
//! samples `ξ̂_1..ξ̂_N` and radius ε under the ℓ1 ground metric,
//!
//! ```text
//! sup_{Q : W(Q, P̂) <= ε} E_Q[ρ ℓ(ξ)] = min λε + (1/N) Σ_i s_i
//!     s.t. ρ(b_k + ⟨a_k, ξ̂_i⟩ + ⟨ς_ik, d − Hξ̂_i⟩) <= s_i
//!          ‖Hᵀς_ik − ρ a_k‖_∞ <= λ,   ς_ik >= 0.
//! ```

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};

use crate::affine::BiAffine;
use crate::error::{Error, Result};
use crate::qp::{self, LinExpr, QpBuilder, QuadraticProgram, Settings, SolveStatus};
use crate::sparse::CscMatrix;

/// Tolerance for samples lying inside the support.
pub const SUPPORT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct PolytopicSupport {
    pub h: DMatrix<f64>,
    pub d: DVector<f64>,
    /// Per-coordinate bounds implied by `Hξ <= d`.
    lo: Vec<f64>,
    hi: Vec<f64>,
    is_box: bool,
}

impl PolytopicSupport {
    /// Validates nonemptiness and boundedness with support LPs.
    pub fn new(h: DMatrix<f64>, d: DVector<f64>) -> Result<Self> {
        if h.nrows() != d.len() {
            return Err(Error::dim("support rows", h.nrows(), d.len()));
        }
        let n = h.ncols();
        if n == 0 {
            return Err(Error::Validation("support must have at least one dimension".into()));
        }
        let settings = Settings::default();
        let a = CscMatrix::from_dense(&h);
        let lp = |c: Vec<f64>| -> Result<qp::SolverResult> {
            let p = QuadraticProgram::new(
                CscMatrix::zeros(n, n),
                c,
                0.0,
                CscMatrix::zeros(0, n),
                vec![],
                a.clone(),
                d.as_slice().to_vec(),
                vec![f64::NEG_INFINITY; n],
                vec![f64::INFINITY; n],
            )?;
            Ok(qp::solve(&p, &settings))
        };
        let feas = lp(vec![0.0; n])?;
        if feas.status == SolveStatus::PrimalInfeasible {
            return Err(Error::Validation("support polytope is empty".into()));
        }
        let mut lo = vec![0.0; n];
        let mut hi = vec![0.0; n];
        for p in 0..n {
            for (sign, out) in [(1.0, &mut lo), (-1.0, &mut hi)] {
                let mut c = vec![0.0; n];
                c[p] = sign;
                let r = lp(c)?;
                match r.status {
                    SolveStatus::Optimal | SolveStatus::AlmostOptimal => out[p] = r.y[p],
                    SolveStatus::PrimalInfeasible => {
                        return Err(Error::Validation("support polytope is empty".into()))
                    }
                    SolveStatus::DualInfeasible => {
                        return Err(Error::Validation(format!("support polytope is unbounded along coordinate {p}")))
                    }
                    s => return Err(Error::Solver { status: s, certificate: r.y }),
                }
            }
        }
        Ok(PolytopicSupport {
            h,
            d,
            lo,
            hi,
            is_box: false,
        })
    }

    /// The box `lo <= ξ <= hi`.
    pub fn boxed(lo: &[f64], hi: &[f64]) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::dim("box support", lo.len(), hi.len()));
        }
        for (p, (l, u)) in lo.iter().zip(hi).enumerate() {
            if !(l <= u) || !l.is_finite() || !u.is_finite() {
                return Err(Error::Validation(format!("box support coordinate {p}: [{l}, {u}] is empty or unbounded")));
            }
        }
        let n = lo.len();
        let mut h = DMatrix::zeros(2 * n, n);
        let mut d = DVector::zeros(2 * n);
        for p in 0..n {
            h[(2 * p, p)] = 1.0;
            d[2 * p] = hi[p];
            h[(2 * p + 1, p)] = -1.0;
            d[2 * p + 1] = -lo[p];
        }
        Ok(PolytopicSupport {
            h,
            d,
            lo: lo.to_vec(),
            hi: hi.to_vec(),
            is_box: true,
        })
    }

    /// Per-coordinate box `[min − m·range, max + m·range]` around the samples.
    pub fn from_samples(samples: &DMatrix<f64>, margin: f64) -> Result<Self> {
        if samples.nrows() == 0 {
            return Err(Error::Validation("cannot build a support from zero samples".into()));
        }
        let n = samples.ncols();
        let mut lo = vec![0.0; n];
        let mut hi = vec![0.0; n];
        for p in 0..n {
            let col = samples.column(p);
            let (mn, mx) = (col.min(), col.max());
            let r = mx - mn;
            lo[p] = mn - margin * r;
            hi[p] = mx + margin * r;
        }
        Self::boxed(&lo, &hi)
    }

    /// Cartesian product of supports.
    pub fn product(parts: &[&PolytopicSupport]) -> PolytopicSupport {
        let rows: usize = parts.iter().map(|p| p.h.nrows()).sum();
        let cols: usize = parts.iter().map(|p| p.h.ncols()).sum();
        let mut h = DMatrix::zeros(rows, cols);
        let mut d = DVector::zeros(rows);
        let (mut r, mut c) = (0, 0);
        let mut lo = Vec::with_capacity(cols);
        let mut hi = Vec::with_capacity(cols);
        for p in parts {
            h.view_mut((r, c), (p.h.nrows(), p.h.ncols())).copy_from(&p.h);
            d.rows_mut(r, p.d.len()).copy_from(&p.d);
            r += p.h.nrows();
            c += p.h.ncols();
            lo.extend_from_slice(&p.lo);
            hi.extend_from_slice(&p.hi);
        }
        PolytopicSupport {
            h,
            d,
            lo,
            hi,
            is_box: parts.iter().all(|p| p.is_box),
        }
    }

    pub fn dim(&self) -> usize {
        self.h.ncols()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lo
    }

    pub fn upper(&self) -> &[f64] {
        &self.hi
    }

    pub fn is_box(&self) -> bool {
        self.is_box
    }

    /// Largest violation of `Hξ <= d` (nonpositive inside).
    pub fn violation(&self, xi: &[f64]) -> f64 {
        let x = DVector::from_column_slice(xi);
        (&self.h * x - &self.d).max()
    }

    pub fn contains(&self, xi: &[f64], tol: f64) -> bool {
        self.violation(xi) <= tol
    }

    /// Restriction to a subset of coordinates; exact for products of
    /// per-coordinate constraints (rows touching only the kept coordinates).
    pub fn restrict(&self, coords: &[usize]) -> Result<PolytopicSupport> {
        let keep: BTreeSet<usize> = coords.iter().copied().collect();
        let mut rows = Vec::new();
        for r in 0..self.h.nrows() {
            let touches_other = (0..self.dim()).any(|c| self.h[(r, c)] != 0.0 && !keep.contains(&c));
            let touches_kept = coords.iter().any(|&c| self.h[(r, c)] != 0.0);
            if touches_other && touches_kept {
                return Err(Error::Validation("support does not factor over the requested coordinates".into()));
            }
            if touches_kept {
                rows.push(r);
            }
        }
        let h = DMatrix::from_fn(rows.len(), coords.len(), |i, j| self.h[(rows[i], coords[j])]);
        let d = DVector::from_fn(rows.len(), |i, _| self.d[rows[i]]);
        Ok(PolytopicSupport {
            h,
            d,
            lo: coords.iter().map(|&c| self.lo[c]).collect(),
            hi: coords.iter().map(|&c| self.hi[c]).collect(),
            is_box: self.is_box,
        })
    }

    /// Vertices by enumeration of `dim`-subsets of active rows (small
    /// dimensions only).
    pub fn vertices(&self) -> Vec<DVector<f64>> {
        let n = self.dim();
        let r = self.h.nrows();
        let mut out: Vec<DVector<f64>> = Vec::new();
        let mut idx: Vec<usize> = (0..n).collect();
        if n > r {
            return out;
        }
        loop {
            let a = DMatrix::from_fn(n, n, |i, j| self.h[(idx[i], j)]);
            let b = DVector::from_fn(n, |i, _| self.d[idx[i]]);
            if let Some(v) = a.lu().solve(&b) {
                if v.iter().all(|x| x.is_finite())
                    && self.contains(v.as_slice(), 1e-9)
                    && !out.iter().any(|w| (w - &v).amax() < 1e-9)
                {
                    out.push(v);
                }
            }
            // next combination
            let mut i = n;
            loop {
                if i == 0 {
                    return out;
                }
                i -= 1;
                if idx[i] < r - n + i {
                    idx[i] += 1;
                    for j in i + 1..n {
                        idx[j] = idx[j - 1] + 1;
                    }
                    break;
                }
            }
        }
    }
}

/// Uniform empirical distribution; one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalDistribution {
    pub samples: DMatrix<f64>,
}

impl EmpiricalDistribution {
    pub fn new(samples: DMatrix<f64>) -> Result<Self> {
        if samples.nrows() == 0 {
            return Err(Error::Validation("empirical distribution needs at least one sample".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("samples must be finite".into()));
        }
        Ok(EmpiricalDistribution { samples })
    }

    pub fn n_samples(&self) -> usize {
        self.samples.nrows()
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn sample(&self, i: usize) -> Vec<f64> {
        self.samples.row(i).iter().copied().collect()
    }

    /// Fails with the indices of samples outside `support`.
    pub fn check_support(&self, support: &PolytopicSupport) -> Result<()> {
        if support.dim() != self.dim() {
            return Err(Error::dim("support dimension", self.dim(), support.dim()));
        }
        let bad: Vec<usize> = (0..self.n_samples())
            .filter(|&i| !support.contains(&self.sample(i), SUPPORT_TOL))
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(format!("samples outside the declared support: {bad:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmbiguitySet {
    pub center: EmpiricalDistribution,
    pub radius: f64,
    pub support: PolytopicSupport,
}

impl AmbiguitySet {
    pub fn new(center: EmpiricalDistribution, radius: f64, support: PolytopicSupport) -> Result<Self> {
        if !(radius >= 0.0) || !radius.is_finite() {
            return Err(Error::Validation(format!("Wasserstein radius must be finite and >= 0, got {radius}")));
        }
        center.check_support(&support)?;
        Ok(AmbiguitySet {
            center,
            radius,
            support,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskConfig {
    pub beta: f64,
    pub rho: f64,
}

impl RiskConfig {
    pub fn new(beta: f64, rho: f64) -> Result<Self> {
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::Validation(format!("beta must lie in (0, 1], got {beta}")));
        }
        if !(rho >= 0.0) || !rho.is_finite() {
            return Err(Error::Validation(format!("rho must be finite and >= 0, got {rho}")));
        }
        Ok(RiskConfig { beta, rho })
    }
}

/// `max(piece_0, piece_1)` with pieces affine in ξ (local indices
/// `0..dim`) and coefficients affine in y.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseAffineLoss {
    pub pieces: [BiAffine; 2],
    pub dim: usize,
}

/// A loss with its decision dependence evaluated away.
#[derive(Debug, Clone, PartialEq)]
pub struct NumericLoss {
    pub a: [DVector<f64>; 2],
    pub b: [f64; 2],
}

impl NumericLoss {
    pub fn eval(&self, xi: &[f64]) -> f64 {
        (0..2)
            .map(|k| self.a[k].iter().zip(xi).map(|(a, x)| a * x).sum::<f64>() + self.b[k])
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

impl PiecewiseAffineLoss {
    pub fn eval(&self, y: &[f64], xi: &[f64]) -> f64 {
        self.pieces[0].eval(y, xi).max(self.pieces[1].eval(y, xi))
    }

    pub fn at(&self, y: &[f64]) -> NumericLoss {
        let piece = |k: usize| {
            let mut a = DVector::zeros(self.dim);
            for (j, e) in &self.pieces[k].a {
                a[*j] = e.eval(y);
            }
            (a, self.pieces[k].b.eval(y))
        };
        let (a0, b0) = piece(0);
        let (a1, b1) = piece(1);
        NumericLoss { a: [a0, a1], b: [b0, b1] }
    }
}

/// CVaR integrand `(C + κ)_+ − κβ` as the maximum of `C + κ − κβ` and `−κβ`.
/// `row` must use local ξ indices below `dim`; `aux` is the coordinate of κ.
pub fn cvar_pieces(row: &BiAffine, beta: f64, aux: usize, dim: usize) -> PiecewiseAffineLoss {
    debug_assert!(row.max_xi().is_none_or(|k| k < dim));
    let mut p1 = row.clone();
    p1.b.add_term(aux, 1.0 - beta);
    p1.compact();
    let p2 = BiAffine::from_expr(LinExpr::term(aux, -beta));
    PiecewiseAffineLoss {
        pieces: [p1, p2],
        dim,
    }
}

/// `min_κ (1/N) Σ (v_i + κ)_+ − κβ`. The objective is piecewise linear in κ
/// with breakpoints at `κ = −v_i`, so the minimum is attained at one of them;
/// with the values sorted in decreasing order every breakpoint costs O(1).
pub fn empirical_cvar(values: &[f64], beta: f64) -> f64 {
    assert!(!values.is_empty(), "empirical_cvar needs at least one value");
    assert!(beta > 0.0 && beta <= 1.0, "beta must lie in (0, 1]");
    let mut v = values.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    let n = v.len() as f64;
    let mut best = f64::INFINITY;
    let mut head = 0.0;
    for (k, &x) in v.iter().enumerate() {
        // Σ_{i<k} (v_i − x)_+ with v sorted descending
        let f = (head - k as f64 * x) / n + x * beta;
        best = best.min(f);
        head += x;
    }
    best
}

/// Auxiliary variables introduced by [`dro_epigraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DroVar {
    Lambda,
    Epi(usize),
    /// ς for sample `i`, piece `k`, support row `r`.
    Dual(usize, usize, usize),
}

/// Indices of the variables of one epigraph block and its objective term.
#[derive(Debug, Clone, PartialEq)]
pub struct DroBlock {
    pub lambda: usize,
    pub s: Vec<usize>,
    pub varsigma: Vec<[Vec<usize>; 2]>,
    /// `λε + (1/N) Σ s_i`
    pub objective: LinExpr,
    /// Inequality rows added, in builder order.
    pub rows: std::ops::Range<usize>,
}

/// Emits the dual reformulation of `sup_Q E_Q[ρ ℓ]` into `b`. The objective
/// term is returned, not added.
pub fn dro_epigraph<K: Ord + Clone + std::fmt::Debug>(
    b: &mut QpBuilder<K>,
    mut key: impl FnMut(DroVar) -> K,
    loss: &PiecewiseAffineLoss,
    amb: &AmbiguitySet,
    rho: f64,
) -> Result<DroBlock> {
    let dim = amb.support.dim();
    if loss.dim != dim || amb.center.dim() != dim {
        return Err(Error::dim("dro_epigraph ξ dimension", dim, loss.dim));
    }
    let n = amb.center.n_samples();
    let r = amb.support.h.nrows();
    let h = &amb.support.h;
    let lambda = b.add_var(key(DroVar::Lambda), 0.0, f64::INFINITY);
    let s: Vec<usize> = (0..n).map(|i| b.free_var(key(DroVar::Epi(i)))).collect();
    let first_row = b.num_le();
    let mut varsigma = Vec::with_capacity(n);
    for i in 0..n {
        let xi = amb.center.sample(i);
        let slack = &amb.support.d - &amb.support.h * DVector::from_column_slice(&xi);
        let mut vs: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        for (k, piece) in loss.pieces.iter().enumerate() {
            let sig: Vec<usize> = (0..r)
                .map(|row| b.add_var(key(DroVar::Dual(i, k, row)), 0.0, f64::INFINITY))
                .collect();
            // ρ(b_k + ⟨a_k, ξ̂_i⟩ + ⟨ς, d − Hξ̂_i⟩) − s_i <= 0
            let mut e = piece.b.scaled(rho);
            for (j, a) in &piece.a {
                e.add_scaled(a, rho * xi[*j]);
            }
            for (row, &v) in sig.iter().enumerate() {
                e.add_term(v, rho * slack[row].max(0.0));
            }
            e.add_term(s[i], -1.0);
            e.compact();
            b.add_le(e);
            // ±(Hᵀς − ρ a_k)_p − λ <= 0
            for p in 0..dim {
                let mut g = LinExpr::zero();
                for (row, &v) in sig.iter().enumerate() {
                    g.add_term(v, h[(row, p)]);
                }
                if let Some(a) = piece.a.get(&p) {
                    g.add_scaled(a, -rho);
                }
                for sign in [1.0, -1.0] {
                    let mut row = g.scaled(sign);
                    row.add_term(lambda, -1.0);
                    row.compact();
                    b.add_le(row);
                }
            }
            vs[k] = sig;
        }
        varsigma.push(vs);
    }
    let mut objective = LinExpr::term(lambda, amb.radius);
    for &si in &s {
        objective.add_term(si, 1.0 / n as f64);
    }
    Ok(DroBlock {
        lambda,
        s,
        varsigma,
        objective,
        rows: first_row..b.num_le(),
    })
}

/// Result of the transport oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleValue {
    pub value: f64,
    /// Value on the doubled grid.
    pub refined: f64,
    /// Set when refining moved the value by more than the tolerance.
    pub coarse: bool,
}

/// Worst-case expectation of a fixed loss over the Wasserstein ball, by the
/// primal transport LP on a finite grid of support points:
/// `max Σ π_ig ℓ(ξ_g)` s.t. `Σ_g π_ig = 1/N`, `Σ π_ig ‖ξ_g − ξ̂_i‖₁ <= ε`.
///
/// The LP has a single coupling constraint, so it is solved exactly through
/// its one-dimensional Lagrangian dual
/// `min_{γ>=0} γε + (1/N) Σ_i max_g (ℓ(ξ_g) − γ‖ξ_g − ξ̂_i‖₁)`.
pub fn worst_case_expectation_oracle(
    loss: &NumericLoss,
    amb: &AmbiguitySet,
    resolution: usize,
    tol: f64,
) -> Result<OracleValue> {
    let dim = amb.support.dim();
    if dim > 3 {
        return Err(Error::SizeLimit(format!("transport oracle supports at most 3 dimensions, got {dim}")));
    }
    let value = transport_value(loss, amb, &support_grid(amb, resolution));
    let refined = transport_value(loss, amb, &support_grid(amb, 2 * resolution));
    Ok(OracleValue {
        value,
        refined,
        coarse: (refined - value).abs() > tol,
    })
}

/// Tensor grid over the support's bounding box (uniform points, sample
/// coordinates and bounds per axis) filtered to the support, plus vertices
/// and samples.
pub fn support_grid(amb: &AmbiguitySet, resolution: usize) -> Vec<Vec<f64>> {
    let sup = &amb.support;
    let dim = sup.dim();
    let axes: Vec<Vec<f64>> = (0..dim)
        .map(|p| {
            let (lo, hi) = (sup.lower()[p], sup.upper()[p]);
            let mut ax: Vec<f64> = (0..=resolution)
                .map(|k| lo + (hi - lo) * k as f64 / resolution.max(1) as f64)
                .collect();
            ax.extend(amb.center.samples.column(p).iter().copied());
            ax.push(lo);
            ax.push(hi);
            ax.sort_by(f64::total_cmp);
            ax.dedup();
            ax
        })
        .collect();
    let mut pts = Vec::new();
    let mut idx = vec![0usize; dim];
    'outer: loop {
        let pt: Vec<f64> = (0..dim).map(|p| axes[p][idx[p]]).collect();
        if sup.contains(&pt, SUPPORT_TOL) {
            pts.push(pt);
        }
        for p in 0..dim {
            idx[p] += 1;
            if idx[p] < axes[p].len() {
                continue 'outer;
            }
            idx[p] = 0;
        }
        break;
    }
    if !sup.is_box() {
        pts.extend(sup.vertices().into_iter().map(|v| v.as_slice().to_vec()));
    }
    pts.extend((0..amb.center.n_samples()).map(|i| amb.center.sample(i)));
    pts
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn transport_value(loss: &NumericLoss, amb: &AmbiguitySet, grid: &[Vec<f64>]) -> f64 {
    let n = amb.center.n_samples();
    let vals: Vec<f64> = grid.iter().map(|g| loss.eval(g)).collect();
    let costs: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let s = amb.center.sample(i);
            grid.iter().map(|g| l1(g, &s)).collect()
        })
        .collect();
    let eps = amb.radius;
    // φ(γ) = γε + mean_i max_g (ℓ_g − γ c_ig), convex piecewise linear.
    let phi = |gamma: f64| -> (f64, f64) {
        let mut total = 0.0;
        let mut moved = 0.0;
        for c in &costs {
            let mut best = f64::NEG_INFINITY;
            let mut best_c = 0.0;
            for (g, &v) in vals.iter().enumerate() {
                let t = v - gamma * c[g];
                if t > best || (t == best && c[g] < best_c) {
                    best = t;
                    best_c = c[g];
                }
            }
            total += best;
            moved += best_c;
        }
        (gamma * eps + total / n as f64, eps - moved / n as f64)
    };
    let spread = vals.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) - vals.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let min_cost = costs
        .iter()
        .flatten()
        .copied()
        .filter(|&c| c > 0.0)
        .fold(f64::INFINITY, f64::min);
    // Beyond γ_max staying at the sample is optimal for every i.
    let gamma_max = if min_cost.is_finite() { spread / min_cost + 1.0 } else { 0.0 };
    if phi(0.0).1 >= 0.0 {
        return phi(0.0).0;
    }
    let (mut lo, mut hi) = (0.0, gamma_max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if phi(mid).1 >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-15 * gamma_max.max(1.0) {
            break;
        }
    }
    phi(lo).0.min(phi(hi).0)
}

/// ℓ1 Wasserstein distance between uniform empirical distributions, exact via
/// an assignment problem on atoms replicated to a common count.
pub fn wasserstein_distance(p: &EmpiricalDistribution, q: &EmpiricalDistribution) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::dim("wasserstein_distance", p.dim(), q.dim()));
    }
    let (np, nq) = (p.n_samples(), q.n_samples());
    let l = lcm(np, nq);
    if l > 2000 {
        return Err(Error::SizeLimit(format!("transport problem with {l} replicated atoms")));
    }
    let (rp, rq) = (l / np, l / nq);
    let cost = DMatrix::from_fn(l, l, |i, j| l1(&p.sample(i / rp), &q.sample(j / rq)));
    let assignment = hungarian(&cost);
    Ok(assignment.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum::<f64>() / l as f64)
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

/// Minimum-cost perfect assignment (shortest augmenting path, O(n³)).
/// Returns `col[row]`.
fn hungarian(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1]; // p[col] = row (1-based), 0 = free
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            col[p[j] - 1] = j - 1;
        }
    }
    col
}

/// `n` points from `lo` to `hi` evenly spaced in log scale.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi >= lo && n >= 1);
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cvar_hand_examples() {
        assert_eq!(empirical_cvar(&[0.0, 0.0, 0.0], 0.3), 0.0);
        assert!((empirical_cvar(&[1.0, -1.0], 0.5) - 0.5).abs() < 1e-15);
        assert!((empirical_cvar(&[2.0, -4.0], 1.0) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn hungarian_small() {
        let c = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0]);
        let a = hungarian(&c);
        let total: f64 = a.iter().enumerate().map(|(i, &j)| c[(i, j)]).sum();
        assert_eq!(total, 5.0);
    }

    #[test]
    fn unit_transport_arc() {
        let p = EmpiricalDistribution::new(DMatrix::from_row_slice(1, 2, &[0.0, 0.0])).unwrap();
        let q = EmpiricalDistribution::new(DMatrix::from_row_slice(1, 2, &[1.0, 1.0])).unwrap();
        assert_eq!(wasserstein_distance(&p, &q).unwrap(), 2.0);
        assert_eq!(wasserstein_distance(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn support_lps_detect_empty_and_unbounded() {
        let h = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        assert!(PolytopicSupport::new(h.clone(), DVector::from_row_slice(&[-1.0, -1.0])).is_err());
        let h1 = DMatrix::from_row_slice(1, 1, &[1.0]);
        let e = PolytopicSupport::new(h1, DVector::from_row_slice(&[1.0])).unwrap_err();
        assert!(e.to_string().contains("unbounded"), "{e}");
        let ok = PolytopicSupport::new(h, DVector::from_row_slice(&[2.0, 1.0])).unwrap();
        assert!((ok.lower()[0] + 1.0).abs() < 1e-7 && (ok.upper()[0] - 2.0).abs() < 1e-7);
    }

    #[test]
    fn triangle_vertices() {
        // ξ >= 0, ξ0 + ξ1 <= 1
        let h = DMatrix::from_row_slice(3, 2, &[-1.0, 0.0, 0.0, -1.0, 1.0, 1.0]);
        let s = PolytopicSupport::new(h, DVector::from_row_slice(&[0.0, 0.0, 1.0])).unwrap();
        assert_eq!(s.vertices().len(), 3);
    }

    #[test]
    fn samples_outside_support_listed() {
        let s = PolytopicSupport::boxed(&[-1.0], &[1.0]).unwrap();
        let e = EmpiricalDistribution::new(DMatrix::from_row_slice(3, 1, &[0.0, 2.0, -3.0])).unwrap();
        let err = e.check_support(&s).unwrap_err();
        assert!(err.to_string().contains("[1, 2]"), "{err}");
    }
}
