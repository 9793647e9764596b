//! Grid-connected devices: linear dynamics, horizon stacking, affine
//! disturbance-feedback policies and local constraint blocks.
//!
//! Stage `j` of a horizon uses input `u_j`, produces state `x_{j+1}` (whose
//! first component is the injection at stage `j`) and sees forecast error
//! `ξ_j`. Stacked histories are `x = (x_1..x_t)`, `u = (u_0..u_{t-1})` and
//! `ξ = (ξ_0..ξ_{t-1})`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::affine::BiAffine;
use crate::error::{Error, Result};
use crate::qp::LinExpr;

/// A time series indexed by absolute time step; the last value is held past
/// the end. A scalar is a constant series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Profile {
    Constant(f64),
    Series(Vec<f64>),
}

impl Profile {
    pub fn at(&self, t: usize) -> f64 {
        match self {
            Profile::Constant(v) => *v,
            Profile::Series(v) => v[t.min(v.len() - 1)],
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        let ok = match self {
            Profile::Constant(v) => v.is_finite(),
            Profile::Series(v) => !v.is_empty() && v.iter().all(|x| x.is_finite()),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("{what}: profile must be a finite number or nonempty list")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorParams {
    pub pmin: f64,
    pub pmax: f64,
    /// Ramp limit per stage; absent means unlimited.
    #[serde(default)]
    pub ramp: Option<f64>,
    #[serde(default)]
    pub p0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StorageParams {
    /// Injection bounds (discharge positive).
    pub pmin: f64,
    pub pmax: f64,
    /// State-of-charge bounds.
    pub emin: f64,
    pub emax: f64,
    /// State-of-charge retention per stage.
    #[serde(default = "one")]
    pub eta: f64,
    /// Stage length in hours.
    #[serde(default = "one")]
    pub dt: f64,
    #[serde(default)]
    pub p0: f64,
    pub soc0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResParams {
    /// Available active power forecast.
    pub forecast: Profile,
    /// Reactive capability |q| <= qmax.
    #[serde(default)]
    pub qmax: f64,
    /// Component of the per-stage forecast error vector.
    pub xi: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadParams {
    /// Consumption forecast (positive = consumption).
    pub demand: Profile,
    #[serde(default)]
    pub q_ratio: f64,
    #[serde(default)]
    pub xi: Option<usize>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq)]
pub enum Template {
    Generator(GeneratorParams),
    Storage(StorageParams),
    CurtailableRes(ResParams),
    FixedLoad(LoadParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    Generator,
    Storage,
    CurtailableRes,
    FixedLoad,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceModel {
    pub id: usize,
    pub bus: usize,
    pub a_bar: DMatrix<f64>,
    pub b_bar: DMatrix<f64>,
    pub x0: DVector<f64>,
    pub template: Template,
}

impl DeviceModel {
    pub fn new(id: usize, bus: usize, template: Template) -> Result<Self> {
        let err = |m: String| Err(Error::Validation(format!("device {id}: {m}")));
        let (a_bar, b_bar, x0) = match &template {
            Template::Generator(g) => {
                if !(g.pmin <= g.pmax) {
                    return err("pmin must not exceed pmax".into());
                }
                if g.ramp.is_some_and(|r| !(r >= 0.0)) {
                    return err("ramp must be nonnegative".into());
                }
                (
                    DMatrix::zeros(1, 1),
                    DMatrix::from_element(1, 1, 1.0),
                    DVector::from_element(1, g.p0),
                )
            }
            Template::Storage(s) => {
                if !(s.pmin <= s.pmax) || !(s.emin <= s.emax) {
                    return err("storage bounds are inconsistent".into());
                }
                if !(s.eta > 0.0 && s.eta <= 1.0) || !(s.dt > 0.0) {
                    return err("eta must lie in (0, 1] and dt must be positive".into());
                }
                (
                    DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, s.eta]),
                    DMatrix::from_row_slice(2, 1, &[1.0, -s.dt]),
                    DVector::from_row_slice(&[s.p0, s.soc0]),
                )
            }
            Template::CurtailableRes(r) => {
                r.forecast.validate("forecast")?;
                if !(r.qmax >= 0.0) {
                    return err("qmax must be nonnegative".into());
                }
                (DMatrix::zeros(0, 0), DMatrix::zeros(0, 2), DVector::zeros(0))
            }
            Template::FixedLoad(l) => {
                l.demand.validate("demand")?;
                (DMatrix::zeros(0, 0), DMatrix::zeros(0, 0), DVector::zeros(0))
            }
        };
        Ok(DeviceModel {
            id,
            bus,
            a_bar,
            b_bar,
            x0,
            template,
        })
    }

    /// Builds a device with explicit dynamics, bypassing the templates' own
    /// matrices (for tests of the stacking algebra).
    pub fn with_dynamics(mut self, a_bar: DMatrix<f64>, b_bar: DMatrix<f64>, x0: DVector<f64>) -> Self {
        self.a_bar = a_bar;
        self.b_bar = b_bar;
        self.x0 = x0;
        self
    }

    pub fn kind(&self) -> DeviceKind {
        match self.template {
            Template::Generator(_) => DeviceKind::Generator,
            Template::Storage(_) => DeviceKind::Storage,
            Template::CurtailableRes(_) => DeviceKind::CurtailableRes,
            Template::FixedLoad(_) => DeviceKind::FixedLoad,
        }
    }

    pub fn n_state(&self) -> usize {
        self.a_bar.nrows()
    }

    pub fn n_input(&self) -> usize {
        self.b_bar.ncols()
    }

    /// Devices whose injection is a state driven by inputs.
    pub fn is_dispatchable(&self) -> bool {
        matches!(self.kind(), DeviceKind::Generator | DeviceKind::Storage)
    }

    /// ξ component this device's injection error loads on, if any.
    pub fn xi_component(&self) -> Option<usize> {
        match &self.template {
            Template::CurtailableRes(r) => Some(r.xi),
            Template::FixedLoad(l) => l.xi,
            _ => None,
        }
    }

    /// One step of the dynamics.
    pub fn advance(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a_bar * x + &self.b_bar * u
    }

    /// Local constraint block `T x + U u + Z ξ <= w` over `horizon` stages,
    /// with the initial state folded into `w`. Rows whose bound is infinite
    /// are omitted.
    pub fn constraint_block(&self, horizon: usize, n_xi: usize) -> ConstraintBlock {
        let (n, m) = (self.n_state(), self.n_input());
        let mut rows: Vec<(usize, Vec<(usize, f64)>, Vec<(usize, f64)>, f64)> = Vec::new();
        // (stage, T entries, U entries, w)
        let mut push = |stage: usize, t: Vec<(usize, f64)>, u: Vec<(usize, f64)>, w: f64| {
            if w.is_finite() {
                rows.push((stage, t, u, w));
            }
        };
        for j in 0..horizon {
            match &self.template {
                Template::Generator(g) => {
                    let x = j; // x_{j+1}, n = 1
                    push(j, vec![(x, 1.0)], vec![], g.pmax);
                    push(j, vec![(x, -1.0)], vec![], -g.pmin);
                    if let Some(r) = g.ramp {
                        if j == 0 {
                            push(j, vec![(x, 1.0)], vec![], r + self.x0[0]);
                            push(j, vec![(x, -1.0)], vec![], r - self.x0[0]);
                        } else {
                            push(j, vec![(x, 1.0), (x - 1, -1.0)], vec![], r);
                            push(j, vec![(x, -1.0), (x - 1, 1.0)], vec![], r);
                        }
                    }
                }
                Template::Storage(s) => {
                    let p = j * 2;
                    let e = j * 2 + 1;
                    push(j, vec![(p, 1.0)], vec![], s.pmax);
                    push(j, vec![(p, -1.0)], vec![], -s.pmin);
                    push(j, vec![(e, 1.0)], vec![], s.emax);
                    push(j, vec![(e, -1.0)], vec![], -s.emin);
                }
                Template::CurtailableRes(r) => {
                    let a = j * 2;
                    let q = j * 2 + 1;
                    push(j, vec![], vec![(a, 1.0)], 1.0);
                    push(j, vec![], vec![(a, -1.0)], 0.0);
                    push(j, vec![], vec![(q, 1.0)], r.qmax);
                    push(j, vec![], vec![(q, -1.0)], r.qmax);
                }
                Template::FixedLoad(_) => {}
            }
        }
        let l = rows.len();
        let mut block = ConstraintBlock {
            t: DMatrix::zeros(l, n * horizon),
            u: DMatrix::zeros(l, m * horizon),
            z: DMatrix::zeros(l, n_xi * horizon),
            w: DVector::zeros(l),
            stage: Vec::with_capacity(l),
        };
        for (r, (stage, t, u, w)) in rows.into_iter().enumerate() {
            for (c, v) in t {
                block.t[(r, c)] += v;
            }
            for (c, v) in u {
                block.u[(r, c)] += v;
            }
            block.w[r] = w;
            block.stage.push(stage);
        }
        block
    }
}

/// `T x + U u + Z ξ <= w` with the stage each row belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintBlock {
    pub t: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub w: DVector<f64>,
    pub stage: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackedDynamics {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

/// `x = A x0 + B u` with `A = [Ā; Ā²; …; Āᵗ]` and `B` block lower triangular
/// with blocks `Ā^{i−j} B̄`.
pub fn stack_dynamics(dev: &DeviceModel, horizon: usize) -> StackedDynamics {
    let (n, m) = (dev.n_state(), dev.n_input());
    let mut a = DMatrix::zeros(n * horizon, n);
    let mut b = DMatrix::zeros(n * horizon, m * horizon);
    // powers[k] = Ā^k
    let mut powers = vec![DMatrix::identity(n, n)];
    for k in 1..=horizon {
        let next = &dev.a_bar * &powers[k - 1];
        powers.push(next);
    }
    let blocks: Vec<DMatrix<f64>> = (0..horizon).map(|k| &powers[k] * &dev.b_bar).collect();
    for i in 0..horizon {
        a.view_mut((i * n, 0), (n, n)).copy_from(&powers[i + 1]);
        for j in 0..=i {
            b.view_mut((i * n, j * m), (n, m)).copy_from(&blocks[i - j]);
        }
    }
    StackedDynamics { a, b }
}

/// Numeric affine policy `u = D ξ + e`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinePolicy {
    pub d: DMatrix<f64>,
    pub e: DVector<f64>,
}

/// True iff every block of `d` strictly above the stage diagonal is zero.
pub fn check_causality(d: &DMatrix<f64>, m: usize, n_xi: usize, horizon: usize) -> bool {
    assert_eq!(d.nrows(), m * horizon, "policy rows");
    assert_eq!(d.ncols(), n_xi * horizon, "policy columns");
    for i in 0..horizon {
        for j in i + 1..horizon {
            if d.view((i * m, j * n_xi), (m, n_xi)).iter().any(|&v| v != 0.0) {
                return false;
            }
        }
    }
    true
}

/// State trajectory `A x0 + B (D ξ + e)`.
pub fn apply_policy(dev: &DeviceModel, pol: &AffinePolicy, xi: &DVector<f64>) -> Result<DVector<f64>> {
    let horizon = if dev.n_input() == 0 { 0 } else { pol.e.len() / dev.n_input() };
    if pol.d.ncols() != xi.len() {
        return Err(Error::dim("apply_policy ξ", pol.d.ncols(), xi.len()));
    }
    if pol.d.nrows() != pol.e.len() || horizon * dev.n_input() != pol.e.len() {
        return Err(Error::dim("apply_policy e", horizon * dev.n_input(), pol.e.len()));
    }
    let s = stack_dynamics(dev, horizon);
    let u = &pol.d * xi + &pol.e;
    Ok(&s.a * &dev.x0 + &s.b * u)
}

/// Policy whose entries are affine forms in the decision vector. `d` is
/// row-major, `(m·t) × (N_ξ·t)`; entries above the stage diagonal must be zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolicPolicy {
    pub d: Vec<Vec<LinExpr>>,
    pub e: Vec<LinExpr>,
}

impl SymbolicPolicy {
    pub fn zero(rows: usize, cols: usize) -> Self {
        SymbolicPolicy {
            d: vec![vec![LinExpr::zero(); cols]; rows],
            e: vec![LinExpr::zero(); rows],
        }
    }

    /// Input `i` of the stacked input vector as a bi-affine form in (y, ξ).
    pub fn input(&self, i: usize) -> BiAffine {
        let mut out = BiAffine::from_expr(self.e[i].clone());
        for (k, c) in self.d[i].iter().enumerate() {
            if !c.terms.is_empty() || c.constant != 0.0 {
                out.add_xi(k, c, 1.0);
            }
        }
        out
    }

    /// Evaluates to a numeric policy at `y`.
    pub fn evaluate(&self, y: &[f64]) -> AffinePolicy {
        let rows = self.e.len();
        let cols = self.d.first().map_or(0, |r| r.len());
        AffinePolicy {
            d: DMatrix::from_fn(rows, cols, |i, j| self.d[i][j].eval(y)),
            e: DVector::from_fn(rows, |i, _| self.e[i].eval(y)),
        }
    }
}

/// Rows of `T x + U u + Z ξ − w` as `⟨a(y), ξ⟩ + b(y)` with
/// `x = A x0 + B u`, `u = D ξ + e`.
pub fn local_constraint_rows(
    dev: &DeviceModel,
    stacked: &StackedDynamics,
    pol: &SymbolicPolicy,
    block: &ConstraintBlock,
) -> Vec<BiAffine> {
    let k = &block.t * &stacked.b + &block.u;
    let tax = &block.t * &stacked.a * &dev.x0;
    let inputs: Vec<BiAffine> = (0..pol.e.len()).map(|i| pol.input(i)).collect();
    (0..block.w.len())
        .map(|r| {
            let mut row = BiAffine::constant(tax[r] - block.w[r]);
            for (i, inp) in inputs.iter().enumerate() {
                let c = k[(r, i)];
                if c != 0.0 {
                    row.add_scaled(inp, c);
                }
            }
            for j in 0..block.z.ncols() {
                row.add_xi_const(j, block.z[(r, j)]);
            }
            row.compact();
            row
        })
        .collect()
}

/// Active and reactive injection of `dev` at horizon stage `j` as bi-affine
/// forms over the stacked ξ history (index `stage·n_xi + component`). `t0` is
/// the absolute time of stage 0, used to read forecasts.
pub fn injection(
    dev: &DeviceModel,
    stacked: &StackedDynamics,
    pol: &SymbolicPolicy,
    j: usize,
    t0: usize,
    n_xi: usize,
) -> (BiAffine, BiAffine) {
    match &dev.template {
        Template::Generator(_) | Template::Storage(_) => {
            let n = dev.n_state();
            let row = j * n;
            let mut p = BiAffine::constant((stacked.a.row(row) * &dev.x0)[0]);
            for i in 0..pol.e.len() {
                let c = stacked.b[(row, i)];
                if c != 0.0 {
                    p.add_scaled(&pol.input(i), c);
                }
            }
            p.compact();
            (p, BiAffine::zero())
        }
        Template::CurtailableRes(r) => {
            let f = r.forecast.at(t0 + j);
            let alpha = &pol.e[2 * j];
            // (1 − α)(f + ξ)
            let mut keep = LinExpr::constant(1.0);
            keep.add_scaled(alpha, -1.0);
            let mut p = BiAffine::from_expr(keep.scaled(f));
            p.add_xi(j * n_xi + r.xi, &keep, 1.0);
            p.compact();
            (p, BiAffine::from_expr(pol.e[2 * j + 1].clone()))
        }
        Template::FixedLoad(l) => {
            let mut p = BiAffine::constant(-l.demand.at(t0 + j));
            if let Some(k) = l.xi {
                p.add_xi_const(j * n_xi + k, -1.0);
            }
            let q = p.scaled(l.q_ratio);
            (p, q)
        }
    }
}

/// Realized injection after applying input `u` at absolute time `t` with
/// realized stage error `xi` and resulting state `x_next`.
pub fn realized_injection(dev: &DeviceModel, t: usize, x_next: &DVector<f64>, u: &DVector<f64>, xi: &[f64]) -> (f64, f64) {
    match &dev.template {
        Template::Generator(_) | Template::Storage(_) => (x_next[0], 0.0),
        Template::CurtailableRes(r) => ((1.0 - u[0]) * (r.forecast.at(t) + xi[r.xi]), u[1]),
        Template::FixedLoad(l) => {
            let p = -(l.demand.at(t) + l.xi.map_or(0.0, |k| xi[k]));
            (p, l.q_ratio * p)
        }
    }
}
