//! Homogeneous self-dual interior-point method for convex QPs.
//!
//! The problem is brought to the conic form `min ½x'Px + q'x s.t. Ax + s = b,
//! s ∈ {0}^{m_eq} × R_+^{m_c}` (bounds become rows), Ruiz-equilibrated, and
//! solved with Mehrotra predictor-corrector steps on the homogeneous embedding
//!
//! ```text
//!     Px + A'z + qτ = 0,   Ax + s − bτ = 0,   q'x + b'z + x'Px/τ + κ = 0.
//! ```
//!
//! Each Newton step factors one quasi-definite matrix `[P A'; A −W]` and
//! solves it twice; the τ component is recovered by a scalar Schur complement.

use std::time::Instant;

use super::ldl::{LdlFactor, Symbolic};
use super::{Duals, QuadraticProgram, Residuals, Settings, SolveStatus, SolverResult};
use crate::sparse::{dot, norm_inf, CscMatrix};

/// Problem in conic form, before or after scaling.
struct Conic {
    n: usize,
    m_eq: usize,
    p: CscMatrix, // upper triangle
    q: Vec<f64>,
    a: CscMatrix,
    b: Vec<f64>,
}

/// Where each conic row came from.
enum RowOrigin {
    Eq(usize),
    Ineq(usize),
    Upper(usize),
    Lower(usize),
}

fn to_conic(qp: &QuadraticProgram) -> (Conic, Vec<RowOrigin>) {
    let n = qp.n;
    let mut t: Vec<(usize, usize, f64)> = Vec::new();
    let mut b = Vec::new();
    let mut origin = Vec::new();
    let mut row = 0;
    for (i, j, v) in qp.a_eq.triplets() {
        t.push((i, j, v));
    }
    for (i, &bi) in qp.b_eq.iter().enumerate() {
        b.push(bi);
        origin.push(RowOrigin::Eq(i));
    }
    row += qp.b_eq.len();
    for (i, j, v) in qp.a_in.triplets() {
        t.push((row + i, j, v));
    }
    for (i, &bi) in qp.b_in.iter().enumerate() {
        b.push(bi);
        origin.push(RowOrigin::Ineq(i));
    }
    row += qp.b_in.len();
    for j in 0..n {
        if qp.ub[j].is_finite() {
            t.push((row, j, 1.0));
            b.push(qp.ub[j]);
            origin.push(RowOrigin::Upper(j));
            row += 1;
        }
        if qp.lb[j].is_finite() {
            t.push((row, j, -1.0));
            b.push(-qp.lb[j]);
            origin.push(RowOrigin::Lower(j));
            row += 1;
        }
    }
    let a = CscMatrix::from_triplets(row, n, &t);
    (
        Conic {
            n,
            m_eq: qp.b_eq.len(),
            p: qp.p.clone(),
            q: qp.c.clone(),
            a,
            b,
        },
        origin,
    )
}

struct Scaling {
    d: Vec<f64>,
    e: Vec<f64>,
    cost: f64,
}

fn clamp_scale(v: f64) -> f64 {
    if v < 1e-4 {
        1.0
    } else {
        (1.0 / v.sqrt()).clamp(1e-4, 1e4)
    }
}

/// Ruiz equilibration of the KKT matrix `[P A'; A 0]`, then cost scaling.
fn equilibrate(c: &mut Conic, iters: usize) -> Scaling {
    let (n, m) = (c.n, c.b.len());
    let mut d = vec![1.0; n];
    let mut e = vec![1.0; m];
    for _ in 0..iters {
        let mut col = vec![0.0f64; n];
        let mut row = vec![0.0f64; m];
        for (i, j, v) in c.p.triplets() {
            col[i] = col[i].max(v.abs());
            col[j] = col[j].max(v.abs());
        }
        for (i, j, v) in c.a.triplets() {
            col[j] = col[j].max(v.abs());
            row[i] = row[i].max(v.abs());
        }
        let dd: Vec<f64> = col.iter().map(|&v| clamp_scale(v)).collect();
        let ee: Vec<f64> = row.iter().map(|&v| clamp_scale(v)).collect();
        scale_in_place(c, &dd, &ee);
        d.iter_mut().zip(&dd).for_each(|(a, b)| *a *= b);
        e.iter_mut().zip(&ee).for_each(|(a, b)| *a *= b);
    }
    let mut pcol = vec![0.0f64; n];
    for (i, j, v) in c.p.triplets() {
        pcol[i] = pcol[i].max(v.abs());
        pcol[j] = pcol[j].max(v.abs());
    }
    let mean_p = if n > 0 { pcol.iter().sum::<f64>() / n as f64 } else { 0.0 };
    let denom = mean_p.max(norm_inf(&c.q));
    let cost = if denom < 1e-6 { 1.0 } else { (1.0 / denom).clamp(1e-4, 1e4) };
    c.p.nzval.iter_mut().for_each(|v| *v *= cost);
    c.q.iter_mut().for_each(|v| *v *= cost);
    Scaling { d, e, cost }
}

fn scale_in_place(c: &mut Conic, d: &[f64], e: &[f64]) {
    for j in 0..c.n {
        for p in c.p.colptr[j]..c.p.colptr[j + 1] {
            c.p.nzval[p] *= d[c.p.rowval[p]] * d[j];
        }
        for p in c.a.colptr[j]..c.a.colptr[j + 1] {
            c.a.nzval[p] *= e[c.a.rowval[p]] * d[j];
        }
        c.q[j] *= d[j];
    }
    for (bi, ei) in c.b.iter_mut().zip(e) {
        *bi *= ei;
    }
}

/// The quasi-definite KKT system `[P + δI, A'; A, −(W + δI)]`.
struct Kkt {
    n: usize,
    m: usize,
    upper: CscMatrix,
    /// Positions of diagonal entries in `upper.nzval`.
    diag: Vec<usize>,
    /// Unregularized diagonal of the P block.
    p_diag: Vec<f64>,
    reg: f64,
    factor: LdlFactor,
    /// A in row-major order (= A' in CSC), used for refinement products.
    at: CscMatrix,
}

impl Kkt {
    fn new(c: &Conic, reg: f64) -> Kkt {
        let (n, m) = (c.n, c.b.len());
        let at = c.a.transpose();
        let mut t: Vec<(usize, usize, f64)> = Vec::with_capacity(c.p.nnz() + c.a.nnz() + n + m);
        let mut p_diag = vec![0.0; n];
        for (i, j, v) in c.p.triplets() {
            if i == j {
                p_diag[i] += v;
            } else {
                t.push((i, j, v));
            }
        }
        for i in 0..m {
            for p in at.colptr[i]..at.colptr[i + 1] {
                t.push((at.rowval[p], n + i, at.nzval[p]));
            }
        }
        for k in 0..n + m {
            t.push((k, k, 0.0));
        }
        let upper = CscMatrix::from_triplets(n + m, n + m, &t);
        let diag = (0..n + m)
            .map(|k| {
                let col = upper.colptr[k]..upper.colptr[k + 1];
                col.clone()
                    .find(|&p| upper.rowval[p] == k)
                    .expect("diagonal present")
            })
            .collect();
        let sym = Symbolic::analyze(&upper);
        let signs: Vec<f64> = (0..n + m).map(|k| if k < n { 1.0 } else { -1.0 }).collect();
        let factor = LdlFactor::new(sym, &signs);
        Kkt {
            n,
            m,
            upper,
            diag,
            p_diag,
            reg,
            factor,
            at,
        }
    }

    fn update(&mut self, w: &[f64]) {
        for j in 0..self.n {
            self.upper.nzval[self.diag[j]] = self.p_diag[j] + self.reg;
        }
        for i in 0..self.m {
            self.upper.nzval[self.diag[self.n + i]] = -(w[i] + self.reg);
        }
        self.factor.factor(&self.upper.nzval);
    }

    /// Unregularized product `[P A'; A −W] v`.
    fn apply(&self, c: &Conic, w: &[f64], v: &[f64], out: &mut [f64]) {
        let (n, m) = (self.n, self.m);
        out.iter_mut().for_each(|o| *o = 0.0);
        let (vx, vz) = v.split_at(n);
        let (ox, oz) = out.split_at_mut(n);
        c.p.symv_upper(1.0, vx, ox);
        self.at.gemv(1.0, vz, ox);
        c.a.gemv(1.0, vx, oz);
        for i in 0..m {
            oz[i] -= w[i] * vz[i];
        }
    }

    /// Solves with iterative refinement against the unregularized matrix.
    fn solve(&mut self, c: &Conic, w: &[f64], rhs: &[f64], iters: usize) -> Vec<f64> {
        let mut x = rhs.to_vec();
        self.factor.solve(&mut x);
        let bnorm = norm_inf(rhs).max(1.0);
        let mut r = vec![0.0; rhs.len()];
        let mut last = f64::INFINITY;
        for _ in 0..iters {
            self.apply(c, w, &x, &mut r);
            r.iter_mut().zip(rhs).for_each(|(ri, bi)| *ri = bi - *ri);
            let rn = norm_inf(&r);
            if rn <= 1e-14 * bnorm || rn >= last * 0.9 {
                break;
            }
            last = rn;
            self.factor.solve(&mut r);
            x.iter_mut().zip(&r).for_each(|(xi, di)| *xi += di);
        }
        x
    }
}

/// Largest step in [0, 1] keeping `v + α dv` nonnegative on the cone rows.
fn max_step(v: &[f64], dv: &[f64]) -> f64 {
    v.iter().zip(dv).fold(1.0f64, |a, (&vi, &di)| if di < 0.0 { a.min(-vi / di) } else { a })
}

struct Direction {
    dx: Vec<f64>,
    dz: Vec<f64>,
    ds: Vec<f64>,
    dtau: f64,
    dkappa: f64,
}

pub fn solve(qp: &QuadraticProgram, settings: &Settings) -> SolverResult {
    let start = Instant::now();
    let (orig, origin) = to_conic(qp);
    let mut c = Conic {
        n: orig.n,
        m_eq: orig.m_eq,
        p: orig.p.clone(),
        q: orig.q.clone(),
        a: orig.a.clone(),
        b: orig.b.clone(),
    };
    let scaling = equilibrate(&mut c, settings.ruiz_iters);
    let (n, m, m_eq) = (c.n, c.b.len(), c.m_eq);
    let m_cone = m - m_eq;
    let is_cone = |i: usize| i >= m_eq;

    let mut kkt = Kkt::new(&c, settings.static_reg);

    // Initial point: solve with W = I on the cone rows and push into the cone.
    let mut w: Vec<f64> = (0..m).map(|i| if is_cone(i) { 1.0 } else { 0.0 }).collect();
    kkt.update(&w);
    let mut rhs: Vec<f64> = c.q.iter().map(|v| -v).chain(c.b.iter().copied()).collect();
    let sol = kkt.solve(&c, &w, &rhs, settings.refine_iters);
    let mut x = sol[..n].to_vec();
    let mut z = sol[n..].to_vec();
    let mut s: Vec<f64> = (0..m).map(|i| if is_cone(i) { -z[i] } else { 0.0 }).collect();
    shift_into_cone(&mut s[m_eq..]);
    shift_into_cone(&mut z[m_eq..]);
    let mut tau: f64 = 1.0;
    let mut kappa: f64 = 1.0;

    let mut status = SolveStatus::MaxIterations;
    let mut certificate = Vec::new();
    let mut iterations = 0;
    let mut residuals = Residuals::default();
    let mut best = (f64::INFINITY, x.clone(), z.clone(), tau);
    let mut small_steps = 0;

    let mut rx = vec![0.0; n];
    let mut rz = vec![0.0; m];
    let mut px = vec![0.0; n];
    for iter in 0..=settings.max_iter {
        iterations = iter;
        if x.iter().chain(&z).chain(&s).any(|v| !v.is_finite()) || !tau.is_finite() {
            status = SolveStatus::NumericalError;
            break;
        }
        // Residuals of the embedding.
        px.iter_mut().for_each(|v| *v = 0.0);
        c.p.symv_upper(1.0, &x, &mut px);
        rx.copy_from_slice(&px);
        kkt.at.gemv(1.0, &z, &mut rx);
        rx.iter_mut().zip(&c.q).for_each(|(r, qi)| *r += qi * tau);
        rz.copy_from_slice(&s);
        c.a.gemv(1.0, &x, &mut rz);
        rz.iter_mut().zip(&c.b).for_each(|(r, bi)| *r -= bi * tau);
        let xpx = dot(&x, &px);
        let rtau = dot(&c.q, &x) + dot(&c.b, &z) + kappa + xpx / tau;

        // Convergence in the original units.
        let check = unscaled_check(&orig, &scaling, &x, &z, &s, tau, settings);
        residuals = check.residuals;
        let merit = check.merit;
        if merit < best.0 {
            best = (merit, x.clone(), z.clone(), tau);
        }
        if check.converged {
            status = SolveStatus::Optimal;
            break;
        }
        if kappa > tau {
            if let Some(cert) = primal_infeasibility(&orig, &scaling, &z, settings) {
                status = SolveStatus::PrimalInfeasible;
                certificate = cert;
                break;
            }
            if let Some(cert) = dual_infeasibility(&orig, &scaling, &x, &s, settings) {
                status = SolveStatus::DualInfeasible;
                certificate = cert;
                break;
            }
        }
        if iter == settings.max_iter {
            break;
        }

        log::trace!("it {iter} tau {tau:.3e} kappa {kappa:.3e} merit {merit:.3e}");
        let mu = (dot(&s[m_eq..], &z[m_eq..]) + tau * kappa) / (m_cone as f64 + 1.0);
        for i in m_eq..m {
            w[i] = s[i] / z[i];
        }
        kkt.update(&w);

        // Constant right-hand side [−q; b].
        rhs.clear();
        rhs.extend(c.q.iter().map(|v| -v));
        rhs.extend(c.b.iter().copied());
        let sol1 = kkt.solve(&c, &w, &rhs, settings.refine_iters);
        let (x1, z1) = sol1.split_at(n);
        // q + 2Px/τ
        let qhat: Vec<f64> = c.q.iter().zip(&px).map(|(qi, pi)| qi + 2.0 * pi / tau).collect();
        // Schur denominator of the τ row, evaluated with the computed (x1, z1)
        // so that it stays consistent with a regularized solve.
        let denom = dot(&qhat, x1) + dot(&c.b, z1) - kappa / tau - xpx / (tau * tau);
        let direction = |omega: f64, rs: &[f64], rkappa: f64, kkt: &mut Kkt| -> Direction {
            let mut rhs2 = Vec::with_capacity(n + m);
            rhs2.extend(rx.iter().map(|r| -omega * r));
            for i in 0..m {
                let extra = if is_cone(i) { rs[i] / z[i] } else { 0.0 };
                rhs2.push(-omega * rz[i] - extra);
            }
            let sol2 = kkt.solve(&c, &w, &rhs2, settings.refine_iters);
            let (x2, z2) = sol2.split_at(n);
            let num = -omega * rtau - dot(&qhat, x2) - dot(&c.b, z2) - rkappa / tau;
            let dtau = num / denom;
            let dx: Vec<f64> = x2.iter().zip(x1).map(|(a, b)| a + dtau * b).collect();
            let dz: Vec<f64> = z2.iter().zip(z1).map(|(a, b)| a + dtau * b).collect();
            let ds: Vec<f64> = (0..m)
                .map(|i| if is_cone(i) { (rs[i] - s[i] * dz[i]) / z[i] } else { 0.0 })
                .collect();
            let dkappa = (rkappa - kappa * dtau) / tau;
            Direction {
                dx,
                dz,
                ds,
                dtau,
                dkappa,
            }
        };
        let step_len = |d: &Direction| -> f64 {
            let mut a = max_step(&s[m_eq..], &d.ds[m_eq..]).min(max_step(&z[m_eq..], &d.dz[m_eq..]));
            if d.dtau < 0.0 {
                a = a.min(-tau / d.dtau);
            }
            if d.dkappa < 0.0 {
                a = a.min(-kappa / d.dkappa);
            }
            a.min(1.0)
        };

        // Predictor.
        let rs_aff: Vec<f64> = (0..m).map(|i| if is_cone(i) { -s[i] * z[i] } else { 0.0 }).collect();
        let aff = direction(1.0, &rs_aff, -tau * kappa, &mut kkt);
        let alpha_aff = step_len(&aff);
        let sigma = (1.0 - alpha_aff).powi(3);
        // Corrector.
        let rs: Vec<f64> = (0..m)
            .map(|i| {
                if is_cone(i) {
                    -s[i] * z[i] - aff.ds[i] * aff.dz[i] + sigma * mu
                } else {
                    0.0
                }
            })
            .collect();
        let rk = -tau * kappa - aff.dtau * aff.dkappa + sigma * mu;
        let d = direction(1.0 - sigma, &rs, rk, &mut kkt);
        let alpha = (0.99 * step_len(&d)).min(1.0);
        if alpha < 1e-8 {
            small_steps += 1;
            if small_steps >= 5 {
                status = SolveStatus::NumericalError;
                break;
            }
        } else {
            small_steps = 0;
        }
        x.iter_mut().zip(&d.dx).for_each(|(v, dv)| *v += alpha * dv);
        z.iter_mut().zip(&d.dz).for_each(|(v, dv)| *v += alpha * dv);
        s.iter_mut().zip(&d.ds).for_each(|(v, dv)| *v += alpha * dv);
        tau += alpha * d.dtau;
        kappa += alpha * d.dkappa;
    }

    if matches!(status, SolveStatus::MaxIterations | SolveStatus::NumericalError) {
        // Fall back to the best iterate seen; accept it at reduced accuracy.
        let (merit, bx, bz, btau) = best;
        x = bx;
        z = bz;
        tau = btau;
        let relaxed = Settings {
            tol_feas: settings.tol_feas.sqrt(),
            tol_gap_abs: settings.tol_gap_abs.sqrt(),
            tol_gap_rel: settings.tol_gap_rel.sqrt(),
            ..settings.clone()
        };
        let check = unscaled_check(&orig, &scaling, &x, &z, &s, tau, &relaxed);
        residuals = check.residuals;
        if check.converged && merit.is_finite() {
            status = SolveStatus::AlmostOptimal;
        }
    }

    let y: Vec<f64> = x.iter().zip(&scaling.d).map(|(v, d)| v * d / tau).collect();
    let zu: Vec<f64> = z
        .iter()
        .zip(&scaling.e)
        .map(|(v, e)| v * e / (scaling.cost * tau))
        .collect();
    let mut duals = Duals {
        eq: vec![0.0; qp.b_eq.len()],
        ineq: vec![0.0; qp.b_in.len()],
        lower: vec![0.0; qp.n],
        upper: vec![0.0; qp.n],
    };
    for (zi, o) in zu.iter().zip(&origin) {
        match *o {
            RowOrigin::Eq(i) => duals.eq[i] = *zi,
            RowOrigin::Ineq(i) => duals.ineq[i] = *zi,
            RowOrigin::Upper(j) => duals.upper[j] = *zi,
            RowOrigin::Lower(j) => duals.lower[j] = *zi,
        }
    }
    let objective = if matches!(status, SolveStatus::Optimal | SolveStatus::AlmostOptimal) {
        qp.objective(&y)
    } else {
        f64::NAN
    };
    log::debug!(
        "ipm: status {:?} after {} iterations, residuals {:?}",
        status,
        iterations,
        residuals
    );
    SolverResult {
        status,
        y,
        objective,
        duals,
        residuals,
        iterations,
        certificate,
        solve_time: start.elapsed(),
    }
}

fn shift_into_cone(v: &mut [f64]) {
    if v.is_empty() {
        return;
    }
    let min = v.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if min < 1e-8 {
        let shift = 1.0 - min.min(0.0);
        v.iter_mut().for_each(|x| *x += shift);
    }
}

struct Check {
    converged: bool,
    residuals: Residuals,
    merit: f64,
}

fn unscaled_check(
    orig: &Conic,
    sc: &Scaling,
    x: &[f64],
    z: &[f64],
    s: &[f64],
    tau: f64,
    st: &Settings,
) -> Check {
    let xb: Vec<f64> = x.iter().zip(&sc.d).map(|(v, d)| v * d / tau).collect();
    let zb: Vec<f64> = z.iter().zip(&sc.e).map(|(v, e)| v * e / (sc.cost * tau)).collect();
    let sb: Vec<f64> = s.iter().zip(&sc.e).map(|(v, e)| v / (e * tau)).collect();
    let mut ax = vec![0.0; orig.b.len()];
    orig.a.gemv(1.0, &xb, &mut ax);
    let rp: Vec<f64> = ax.iter().zip(&sb).zip(&orig.b).map(|((a, s), b)| a + s - b).collect();
    let mut px = vec![0.0; orig.n];
    orig.p.symv_upper(1.0, &xb, &mut px);
    let mut atz = vec![0.0; orig.n];
    orig.a.gemv_t(1.0, &zb, &mut atz);
    let rd: Vec<f64> = px.iter().zip(&atz).zip(&orig.q).map(|((p, a), q)| p + a + q).collect();
    let xpx = dot(&xb, &px);
    let pobj = 0.5 * xpx + dot(&orig.q, &xb);
    let dobj = -0.5 * xpx - dot(&orig.b, &zb);
    let gap = (pobj - dobj).abs();
    let primal = norm_inf(&rp);
    let dual = norm_inf(&rd);
    let pscale = 1.0 + norm_inf(&orig.b).max(norm_inf(&ax)).max(norm_inf(&sb));
    let dscale = 1.0 + norm_inf(&orig.q).max(norm_inf(&px)).max(norm_inf(&atz));
    let converged = primal <= st.tol_feas * pscale
        && dual <= st.tol_feas * dscale
        && (gap <= st.tol_gap_abs || gap <= st.tol_gap_rel * pobj.abs().min(dobj.abs()));
    let merit = (primal / pscale).max(dual / dscale).max(gap / (1.0 + pobj.abs().min(dobj.abs())));
    Check {
        converged,
        residuals: Residuals { primal, dual, gap },
        merit: if merit.is_finite() { merit } else { f64::INFINITY },
    }
}

/// A dual ray: z in the dual cone with A'z ≈ 0 and b'z < 0.
fn primal_infeasibility(orig: &Conic, sc: &Scaling, z: &[f64], st: &Settings) -> Option<Vec<f64>> {
    let zu: Vec<f64> = z.iter().zip(&sc.e).map(|(v, e)| v * e / sc.cost).collect();
    let bz = dot(&orig.b, &zu);
    if bz >= -st.tol_infeas {
        return None;
    }
    let mut atz = vec![0.0; orig.n];
    orig.a.gemv_t(1.0, &zu, &mut atz);
    if norm_inf(&atz) <= -bz * st.tol_infeas.sqrt() * 1e-2 {
        Some(zu.iter().map(|v| v / -bz).collect())
    } else {
        None
    }
}

/// A primal ray: Px ≈ 0, Ax + s ≈ 0 with s in the cone, and q'x < 0.
fn dual_infeasibility(
    orig: &Conic,
    sc: &Scaling,
    x: &[f64],
    s: &[f64],
    st: &Settings,
) -> Option<Vec<f64>> {
    let xu: Vec<f64> = x.iter().zip(&sc.d).map(|(v, d)| v * d).collect();
    let su: Vec<f64> = s.iter().zip(&sc.e).map(|(v, e)| v / e).collect();
    let qx = dot(&orig.q, &xu);
    if qx >= -st.tol_infeas {
        return None;
    }
    let tol = -qx * st.tol_infeas.sqrt() * 1e-2;
    let mut px = vec![0.0; orig.n];
    orig.p.symv_upper(1.0, &xu, &mut px);
    let mut r: Vec<f64> = su.clone();
    orig.a.gemv(1.0, &xu, &mut r);
    if norm_inf(&px) <= tol && norm_inf(&r) <= tol {
        Some(xu.iter().map(|v| v / -qx).collect())
    } else {
        None
    }
}
