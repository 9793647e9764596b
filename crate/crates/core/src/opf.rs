//! Assembly of the distributionally robust OPF quadratic programs.
//!
//! Both formulations minimize the empirical expected operating cost plus,
//! for every row `C_o` of the risk set, `ρ·sup_Q E_Q[CVaR integrand]` in its
//! dual form. Rows outside the risk set are enforced at every training
//! sample. Distribution networks use the voltage magnitude model
//! `M p + N q + a` with deterministic curtailment and reactive setpoints;
//! transmission networks use DC line flows, affine reserve policies
//! `u = Dξ + e` for dispatchable devices and per-stage balance equalities.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::affine::BiAffine;
use crate::dataset::ForecastErrorDataset;
use crate::devices::{
    injection, local_constraint_rows, stack_dynamics, AffinePolicy, DeviceKind, DeviceModel, StackedDynamics,
    SymbolicPolicy,
};
use crate::dro::{cvar_pieces, dro_epigraph, AmbiguitySet, DroBlock, DroVar, RiskConfig};
use crate::error::{Error, Result};
use crate::linearization::VoltageLinearization;
use crate::network::{dc_flow_map, NetworkModel};
use crate::qp::{self, LinExpr, QpBuilder, QuadraticProgram, SolveStatus, SolverResult};

/// Eigenvalue floor for the PSD check of cost blocks.
pub const PSD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceCost {
    pub fx: DVector<f64>,
    pub hx: DMatrix<f64>,
    pub fu: DVector<f64>,
    pub hu: DMatrix<f64>,
}

fn check_psd(h: &DMatrix<f64>, what: &str) -> Result<()> {
    let scale = h.amax().max(1.0);
    if (h - h.transpose()).amax() > 1e-12 * scale {
        return Err(Error::Validation(format!("{what} is not symmetric")));
    }
    if h.nrows() > 0 {
        let min = h.clone().symmetric_eigen().eigenvalues.min();
        if min < -PSD_TOL {
            return Err(Error::Validation(format!("{what} is not positive semidefinite (eigenvalue {min:e})")));
        }
    }
    Ok(())
}

impl DeviceCost {
    pub fn zero(n: usize, m: usize) -> Self {
        DeviceCost {
            fx: DVector::zeros(n),
            hx: DMatrix::zeros(n, n),
            fu: DVector::zeros(m),
            hu: DMatrix::zeros(m, m),
        }
    }

    pub fn new(fx: DVector<f64>, hx: DMatrix<f64>, fu: DVector<f64>, hu: DMatrix<f64>) -> Result<Self> {
        let (n, m) = (fx.len(), fu.len());
        if hx.shape() != (n, n) || hu.shape() != (m, m) {
            return Err(Error::Validation("cost blocks have inconsistent dimensions".into()));
        }
        if fx.iter().chain(fu.iter()).chain(hx.iter()).chain(hu.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Validation("cost entries must be finite".into()));
        }
        check_psd(&hx, "hx")?;
        check_psd(&hu, "hu")?;
        Ok(DeviceCost { fx, hx, fu, hu })
    }

    fn is_zero(&self) -> bool {
        self.fx.iter().chain(self.fu.iter()).chain(self.hx.iter()).chain(self.hu.iter()).all(|&v| v == 0.0)
    }
}

/// Stage costs by device id; missing devices cost nothing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CostSpec {
    costs: BTreeMap<usize, DeviceCost>,
}

impl CostSpec {
    pub fn insert(&mut self, id: usize, cost: DeviceCost) -> Result<()> {
        if self.costs.insert(id, cost).is_some() {
            return Err(Error::Validation(format!("duplicate cost for device {id}")));
        }
        Ok(())
    }

    pub fn get(&self, id: usize) -> Option<&DeviceCost> {
        self.costs.get(&id)
    }
}

/// What a decision coordinate represents. Ordering is stage-major, then
/// device variables by id, then the risk auxiliaries by row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarKey {
    pub stage: usize,
    pub item: VarItem,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VarItem {
    /// Nominal input `e` of `device`, component `k`.
    Input { device: usize, k: usize },
    /// Policy gain on history coordinate `xi`.
    Gain { device: usize, k: usize, xi: usize },
    /// CVaR auxiliary κ of a risk row.
    Cvar { row: usize },
    Dro { row: usize, var: DroVar },
}

impl VarKey {
    pub fn is_decision(&self) -> bool {
        matches!(self.item, VarItem::Input { .. } | VarItem::Gain { .. })
    }
}

impl fmt::Display for VarKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = self.stage;
        match self.item {
            VarItem::Input { device, k } => write!(f, "e[t={t},dev={device},k={k}]"),
            VarItem::Gain { device, k, xi } => write!(f, "D[t={t},dev={device},k={k},xi={xi}]"),
            VarItem::Cvar { row } => write!(f, "kappa[t={t},row={row}]"),
            VarItem::Dro { row, var } => match var {
                DroVar::Lambda => write!(f, "lambda[t={t},row={row}]"),
                DroVar::Epi(i) => write!(f, "s[t={t},row={row},i={i}]"),
                DroVar::Dual(i, k, r) => write!(f, "varsigma[t={t},row={row},i={i},k={k},r={r}]"),
            },
        }
    }
}

/// Bijection between named variables and coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionLayout {
    keys: Vec<VarKey>,
    index: BTreeMap<VarKey, usize>,
}

impl DecisionLayout {
    fn new(keys: Vec<VarKey>) -> Self {
        let index = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        DecisionLayout { keys, index }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn get(&self, key: &VarKey) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn key(&self, i: usize) -> &VarKey {
        &self.keys[i]
    }

    pub fn keys(&self) -> &[VarKey] {
        &self.keys
    }
}

/// `Σ v·y_i·y_j + lin(y)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QuadForm {
    pub quad: Vec<(usize, usize, f64)>,
    pub lin: LinExpr,
}

impl QuadForm {
    pub fn eval(&self, y: &[f64]) -> f64 {
        self.lin.eval(y) + self.quad.iter().map(|&(i, j, v)| v * y[i] * y[j]).sum::<f64>()
    }

    fn add_product(&mut self, e1: &LinExpr, e2: &LinExpr, scale: f64) {
        for &(i, a) in &e1.terms {
            for &(j, b) in &e2.terms {
                self.quad.push((i, j, scale * a * b));
            }
        }
        self.lin.add_scaled(e1, scale * e2.constant);
        let mut rest = e2.clone();
        rest.constant = 0.0;
        self.lin.add_scaled(&rest, scale * e1.constant);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum RowKind {
    VoltageUpper { bus: usize },
    VoltageLower { bus: usize },
    /// Flow on `line` in its declared orientation, or the reverse one.
    LineFlow { line: usize, reverse: bool },
    Device { device: usize, row: usize },
}

impl RowKind {
    pub fn is_network(&self) -> bool {
        !matches!(self, RowKind::Device { .. })
    }
}

/// One member of the risk set and the variables of its dual block.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskRow {
    pub id: usize,
    pub stage: usize,
    pub kind: RowKind,
    /// `C_o` over the stacked ξ history.
    pub row: BiAffine,
    /// Stages whose ξ blocks the row depends on (its ambiguity set's).
    pub xi_stages: Vec<usize>,
    pub radius: f64,
    pub kappa: usize,
    pub block: DroBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formulation {
    Distribution,
    Transmission,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AssemblyOptions {
    /// Route device rows through the risk set instead of enforcing them at
    /// the samples.
    pub device_rows_in_risk_set: bool,
    /// Transmission only: no recourse (D = 0).
    pub open_loop: bool,
}

/// Inputs shared by both formulations.
#[derive(Debug, Clone, Copy)]
pub struct OpfInputs<'a> {
    pub network: &'a NetworkModel,
    pub devices: &'a [DeviceModel],
    pub costs: &'a CostSpec,
    /// Stage `j` of the dataset is stage `j` of the horizon.
    pub dataset: &'a ForecastErrorDataset,
    /// Radius per stage; a single value applies to all stages.
    pub epsilon: &'a [f64],
    pub risk: RiskConfig,
    pub horizon: usize,
    /// Absolute time of stage 0 (forecast lookup).
    pub t0: usize,
    pub options: AssemblyOptions,
}

#[derive(Debug, Clone)]
pub struct AssembledProblem {
    pub formulation: Formulation,
    pub qp: QuadraticProgram,
    pub layout: DecisionLayout,
    pub horizon: usize,
    pub t0: usize,
    pub n_xi: usize,
    pub risk: RiskConfig,
    pub risk_rows: Vec<RiskRow>,
    /// Policies of devices with inputs, by id.
    pub policies: BTreeMap<usize, SymbolicPolicy>,
    /// Expected operating cost (part of the objective, offset included).
    pub cost: QuadForm,
    /// Total injection per stage (transmission; empty otherwise).
    pub balance: Vec<BiAffine>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PolicyMode {
    Fixed,
    Deterministic,
    Recourse,
}

struct Assembler<'a> {
    inp: OpfInputs<'a>,
    b: QpBuilder<VarKey>,
    cost: QuadForm,
    n_xi: usize,
    samples: DMatrix<f64>,
    stacked: BTreeMap<usize, StackedDynamics>,
    policies: BTreeMap<usize, SymbolicPolicy>,
    risk_rows: Vec<RiskRow>,
}

/// `b + Σ a_k ξ_k` at a fixed ξ.
pub fn at_sample(row: &BiAffine, xi: &[f64]) -> LinExpr {
    let mut e = row.b.clone();
    for (k, a) in &row.a {
        e.add_scaled(a, xi[*k]);
    }
    e.compact();
    e
}

impl<'a> Assembler<'a> {
    fn new(inp: OpfInputs<'a>) -> Result<Self> {
        let ds = inp.dataset;
        if inp.horizon == 0 {
            return Err(Error::Validation("horizon must be at least 1".into()));
        }
        if ds.n_stages < inp.horizon {
            return Err(Error::Validation(format!(
                "dataset covers {} stages, horizon needs {}",
                ds.n_stages, inp.horizon
            )));
        }
        if inp.epsilon.is_empty() || (inp.epsilon.len() != 1 && inp.epsilon.len() < inp.horizon) {
            return Err(Error::Validation(format!(
                "epsilon schedule has {} entries for a horizon of {}",
                inp.epsilon.len(),
                inp.horizon
            )));
        }
        if let Some(e) = inp.epsilon.iter().find(|e| !(**e >= 0.0) || !e.is_finite()) {
            return Err(Error::Validation(format!("Wasserstein radius must be finite and >= 0, got {e}")));
        }
        for d in inp.devices {
            if d.bus >= inp.network.buses.len() {
                return Err(Error::Validation(format!("device {} sits on unknown bus {}", d.id, d.bus)));
            }
            if let Some(k) = d.xi_component() {
                if k >= ds.n_xi {
                    return Err(Error::Validation(format!(
                        "device {} uses error component {k}, dataset has {}",
                        d.id, ds.n_xi
                    )));
                }
            }
        }
        let ids: BTreeSet<usize> = inp.devices.iter().map(|d| d.id).collect();
        if ids.len() != inp.devices.len() {
            return Err(Error::Validation("duplicate device ids".into()));
        }
        let samples = ds.samples.columns(0, inp.horizon * ds.n_xi).into_owned();
        Ok(Assembler {
            inp,
            b: QpBuilder::new(),
            cost: QuadForm::default(),
            n_xi: ds.n_xi,
            samples,
            stacked: BTreeMap::new(),
            policies: BTreeMap::new(),
            risk_rows: Vec::new(),
        })
    }

    fn devices(&self) -> Vec<&'a DeviceModel> {
        let mut d: Vec<&DeviceModel> = self.inp.devices.iter().collect();
        d.sort_by_key(|d| d.id);
        d
    }

    fn epsilon(&self, stage: usize) -> f64 {
        if self.inp.epsilon.len() == 1 {
            self.inp.epsilon[0]
        } else {
            self.inp.epsilon[stage]
        }
    }

    fn sample(&self, i: usize) -> Vec<f64> {
        self.samples.row(i).iter().copied().collect()
    }

    /// Creates policy variables stage by stage.
    fn policies(&mut self, mode: impl Fn(&DeviceModel) -> PolicyMode) {
        let h = self.inp.horizon;
        let n_xi = self.n_xi;
        for dev in self.devices() {
            self.stacked.insert(dev.id, stack_dynamics(dev, h));
            let m = dev.n_input();
            if m > 0 {
                self.policies.insert(dev.id, SymbolicPolicy::zero(m * h, n_xi * h));
            }
        }
        for j in 0..h {
            for dev in self.devices() {
                let m = dev.n_input();
                let mode = mode(dev);
                if m == 0 || mode == PolicyMode::Fixed {
                    continue;
                }
                for k in 0..m {
                    let v = self.b.free_var(VarKey {
                        stage: j,
                        item: VarItem::Input { device: dev.id, k },
                    });
                    let pol = self.policies.get_mut(&dev.id).expect("policy");
                    pol.e[j * m + k] = LinExpr::var(v);
                    if mode == PolicyMode::Recourse {
                        for xi in 0..(j + 1) * n_xi {
                            let g = self.b.free_var(VarKey {
                                stage: j,
                                item: VarItem::Gain { device: dev.id, k, xi },
                            });
                            self.policies.get_mut(&dev.id).expect("policy").d[j * m + k][xi] = LinExpr::var(g);
                        }
                    }
                }
            }
        }
    }

    fn policy(&self, dev: &DeviceModel) -> SymbolicPolicy {
        self.policies
            .get(&dev.id)
            .cloned()
            .unwrap_or_else(|| SymbolicPolicy::zero(0, self.n_xi * self.inp.horizon))
    }

    /// Adds `f·z` and `½ zᵀHz` averaged over the samples.
    fn expected(&mut self, z: &[BiAffine], f: &DVector<f64>, hm: &DMatrix<f64>) {
        let n = self.samples.nrows();
        let w = 1.0 / n as f64;
        let quad = hm.iter().any(|&v| v != 0.0);
        for i in 0..n {
            let xi = self.sample(i);
            let zi: Vec<LinExpr> = z.iter().map(|r| at_sample(r, &xi)).collect();
            for (a, e) in zi.iter().enumerate() {
                if f[a] != 0.0 {
                    self.b.add_objective(e, w * f[a]);
                    self.cost.lin.add_scaled(e, w * f[a]);
                }
            }
            if quad {
                for a in 0..zi.len() {
                    for c in 0..zi.len() {
                        let v = hm[(a, c)];
                        if v != 0.0 {
                            self.b.add_product(&zi[a], &zi[c], 0.5 * w * v);
                            self.cost.add_product(&zi[a], &zi[c], 0.5 * w * v);
                        }
                    }
                }
            }
        }
    }

    fn costs(&mut self) {
        let h = self.inp.horizon;
        for dev in self.devices() {
            let Some(cost) = self.inp.costs.get(dev.id) else { continue };
            if cost.is_zero() {
                continue;
            }
            let pol = self.policy(dev);
            let st = self.stacked[&dev.id].clone();
            let (n, m) = (dev.n_state(), dev.n_input());
            let inputs: Vec<BiAffine> = (0..m * h).map(|i| pol.input(i)).collect();
            for j in 0..h {
                let x: Vec<BiAffine> = (0..n)
                    .map(|c| {
                        let r = j * n + c;
                        let mut e = BiAffine::constant((st.a.row(r) * &dev.x0)[0]);
                        for (i, inp) in inputs.iter().enumerate() {
                            let coef = st.b[(r, i)];
                            if coef != 0.0 {
                                e.add_scaled(inp, coef);
                            }
                        }
                        e.compact();
                        e
                    })
                    .collect();
                let u: Vec<BiAffine> = (0..m).map(|k| inputs[j * m + k].clone()).collect();
                self.expected(&x, &cost.fx, &cost.hx);
                self.expected(&u, &cost.fu, &cost.hu);
            }
        }
    }

    /// Active and reactive injections per bus (all buses, slack first) and stage.
    fn bus_injections(&self) -> Vec<(Vec<BiAffine>, Vec<BiAffine>)> {
        let nb = self.inp.network.buses.len();
        (0..self.inp.horizon)
            .map(|j| {
                let mut p = vec![BiAffine::zero(); nb];
                let mut q = vec![BiAffine::zero(); nb];
                for dev in self.devices() {
                    let (dp, dq) = injection(dev, &self.stacked[&dev.id], &self.policy(dev), j, self.inp.t0, self.n_xi);
                    p[dev.bus].add_scaled(&dp, 1.0);
                    q[dev.bus].add_scaled(&dq, 1.0);
                }
                for e in p.iter_mut().chain(q.iter_mut()) {
                    e.compact();
                }
                (p, q)
            })
            .collect()
    }

    fn device_rows(&mut self) -> Result<()> {
        let h = self.inp.horizon;
        for dev in self.devices() {
            let block = dev.constraint_block(h, self.n_xi);
            let rows = local_constraint_rows(dev, &self.stacked[&dev.id], &self.policy(dev), &block);
            for (r, row) in rows.into_iter().enumerate() {
                let stage = block.stage[r];
                if row.a.is_empty() && row.b.is_constant() {
                    if row.b.constant > 1e-12 {
                        return Err(Error::Validation(format!(
                            "device {} row {r} is violated ({}) and no decision can change it",
                            dev.id, row.b.constant
                        )));
                    }
                    continue;
                }
                if self.inp.options.device_rows_in_risk_set {
                    self.risk_row(stage, RowKind::Device { device: dev.id, row: r }, row)?;
                } else {
                    self.sample_rows(&row);
                }
            }
        }
        Ok(())
    }

    /// Enforces `row <= 0` at every sample (once if ξ-free).
    fn sample_rows(&mut self, row: &BiAffine) {
        if row.a.is_empty() {
            let mut e = row.b.clone();
            e.compact();
            if !e.terms.is_empty() {
                self.b.add_le(e);
            }
            return;
        }
        let mut seen: Vec<LinExpr> = Vec::new();
        for i in 0..self.samples.nrows() {
            let e = at_sample(row, &self.sample(i));
            if !seen.contains(&e) {
                self.b.add_le(e.clone());
                seen.push(e);
            }
        }
    }

    fn risk_row(&mut self, stage: usize, kind: RowKind, row: BiAffine) -> Result<()> {
        let n_xi = self.n_xi;
        let id = self.risk_rows.len();
        let mut stages: BTreeSet<usize> = row.a.keys().map(|k| k / n_xi).collect();
        if stages.is_empty() {
            stages.insert(stage);
        }
        let stages: Vec<usize> = stages.into_iter().collect();
        let pos: BTreeMap<usize, usize> = stages.iter().enumerate().map(|(p, s)| (*s, p)).collect();
        let local = row.map_xi(|g| pos[&(g / n_xi)] * n_xi + g % n_xi);
        let kappa = self.b.free_var(VarKey {
            stage,
            item: VarItem::Cvar { row: id },
        });
        let dim = stages.len() * n_xi;
        let loss = cvar_pieces(&local, self.inp.risk.beta, kappa, dim);
        let (center, support) = self.inp.dataset.restrict(&stages)?;
        // Only the horizon's columns are used; restrict() reads the same rows.
        let radius = self.epsilon(stage);
        let amb = AmbiguitySet::new(center, radius, support)?;
        let block = dro_epigraph(
            &mut self.b,
            |var| VarKey {
                stage,
                item: VarItem::Dro { row: id, var },
            },
            &loss,
            &amb,
            self.inp.risk.rho,
        )?;
        self.b.add_objective(&block.objective, 1.0);
        self.risk_rows.push(RiskRow {
            id,
            stage,
            kind,
            row,
            xi_stages: stages,
            radius,
            kappa,
            block,
        });
        Ok(())
    }

    fn finish(self, formulation: Formulation, balance: Vec<BiAffine>) -> Result<AssembledProblem> {
        let Assembler {
            inp,
            b,
            cost,
            n_xi,
            policies,
            risk_rows,
            ..
        } = self;
        let (qp, keys, perm) = b.build_sorted()?;
        let map = |e: &LinExpr| LinExpr {
            terms: e.terms.iter().map(|&(j, v)| (perm[j], v)).collect(),
            constant: e.constant,
        };
        let map_bi = |r: &BiAffine| BiAffine {
            b: map(&r.b),
            a: r.a.iter().map(|(k, e)| (*k, map(e))).collect(),
        };
        let policies = policies
            .into_iter()
            .map(|(id, p)| {
                (
                    id,
                    SymbolicPolicy {
                        d: p.d.iter().map(|r| r.iter().map(map).collect()).collect(),
                        e: p.e.iter().map(map).collect(),
                    },
                )
            })
            .collect();
        let risk_rows = risk_rows
            .into_iter()
            .map(|r| RiskRow {
                row: map_bi(&r.row),
                kappa: perm[r.kappa],
                block: DroBlock {
                    lambda: perm[r.block.lambda],
                    s: r.block.s.iter().map(|&v| perm[v]).collect(),
                    varsigma: r
                        .block
                        .varsigma
                        .iter()
                        .map(|[a, c]| [a.iter().map(|&v| perm[v]).collect(), c.iter().map(|&v| perm[v]).collect()])
                        .collect(),
                    objective: map(&r.block.objective),
                    rows: r.block.rows.clone(),
                },
                ..r
            })
            .collect();
        let cost = QuadForm {
            quad: cost.quad.iter().map(|&(i, j, v)| (perm[i], perm[j], v)).collect(),
            lin: map(&cost.lin),
        };
        Ok(AssembledProblem {
            formulation,
            qp,
            layout: DecisionLayout::new(keys),
            horizon: inp.horizon,
            t0: inp.t0,
            n_xi,
            risk: inp.risk,
            risk_rows,
            policies,
            cost,
            balance: balance.iter().map(map_bi).collect(),
        })
    }
}

/// Distribution-network problem over the voltage magnitude model.
pub fn assemble_distribution(inp: &OpfInputs, lin: &VoltageLinearization) -> Result<AssembledProblem> {
    let n = inp.network.n_pq();
    if lin.a.len() != n {
        return Err(Error::dim("linearization buses", n, lin.a.len()));
    }
    if let Some(d) = inp.devices.iter().find(|d| d.bus == 0) {
        return Err(Error::Validation(format!("device {} sits on the slack bus", d.id)));
    }
    let mut asm = Assembler::new(*inp)?;
    asm.policies(|d| match d.kind() {
        DeviceKind::FixedLoad => PolicyMode::Fixed,
        _ => PolicyMode::Deterministic,
    });
    asm.costs();
    let inj = asm.bus_injections();
    for (j, (p, q)) in inj.iter().enumerate() {
        for bus in 1..=n {
            let mut g = BiAffine::constant(lin.a[bus - 1]);
            for k in 1..=n {
                g.add_scaled(&p[k], lin.m[(bus - 1, k - 1)]);
                g.add_scaled(&q[k], lin.n[(bus - 1, k - 1)]);
            }
            g.compact();
            let b = inp.network.bus(bus);
            let mut upper = g.clone();
            upper.b.add_constant(-b.vmax);
            let mut lower = g.scaled(-1.0);
            lower.b.add_constant(b.vmin);
            asm.risk_row(j, RowKind::VoltageUpper { bus }, upper)?;
            asm.risk_row(j, RowKind::VoltageLower { bus }, lower)?;
        }
    }
    asm.device_rows()?;
    asm.finish(Formulation::Distribution, Vec::new())
}

/// Transmission problem over DC line flows with affine reserve policies.
pub fn assemble_transmission(inp: &OpfInputs) -> Result<AssembledProblem> {
    let gamma = dc_flow_map(inp.network)?;
    let nl = inp.network.lines.len();
    if gamma.nrows() != 2 * nl {
        return Err(Error::dim("flow map rows", 2 * nl, gamma.nrows()));
    }
    let open_loop = inp.options.open_loop;
    let mut asm = Assembler::new(*inp)?;
    if !inp.devices.iter().any(|d| d.is_dispatchable()) {
        return Err(Error::Validation("no controllable device to balance the system".into()));
    }
    asm.policies(|d| match d.kind() {
        DeviceKind::Generator | DeviceKind::Storage if open_loop => PolicyMode::Deterministic,
        DeviceKind::Generator | DeviceKind::Storage => PolicyMode::Recourse,
        _ => PolicyMode::Fixed,
    });
    asm.costs();
    let inj = asm.bus_injections();
    let mut balance = Vec::with_capacity(inp.horizon);
    for (j, (p, _)) in inj.iter().enumerate() {
        let mut total = BiAffine::zero();
        for e in p {
            total.add_scaled(e, 1.0);
        }
        total.compact();
        let mut parts = vec![("nominal".to_string(), total.b.clone())];
        for (k, e) in &total.a {
            parts.push((format!("xi {k}"), e.clone()));
        }
        for (what, e) in parts {
            if e.terms.is_empty() {
                if e.constant.abs() > 1e-12 {
                    return Err(Error::Validation(format!(
                        "stage {j}: power balance ({what}) cannot be met by any policy (residual {})",
                        e.constant
                    )));
                }
            } else {
                asm.b.add_eq(e);
            }
        }
        balance.push(total);
        for o in 0..2 * nl {
            let mut flow = BiAffine::constant(0.0);
            for bus in 1..inp.network.buses.len() {
                let g = gamma[(o, bus - 1)];
                if g != 0.0 {
                    flow.add_scaled(&p[bus], g);
                }
            }
            flow.b.add_constant(-inp.network.lines[o % nl].limit);
            flow.compact();
            asm.risk_row(
                j,
                RowKind::LineFlow {
                    line: o % nl,
                    reverse: o >= nl,
                },
                flow,
            )?;
        }
    }
    asm.device_rows()?;
    asm.finish(Formulation::Transmission, balance)
}

/// Contribution of one risk row to the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RiskShare {
    pub row: usize,
    pub stage: usize,
    pub kind: RowKind,
    /// `λε + (1/N) Σ s_i`: ρ times the row's worst-case CVaR.
    pub share: f64,
    pub lambda: f64,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedSolution {
    pub status: SolveStatus,
    pub y: Vec<f64>,
    pub values: BTreeMap<VarKey, f64>,
    pub policies: BTreeMap<usize, AffinePolicy>,
    /// Nominal first-stage input per device.
    pub first_inputs: BTreeMap<usize, DVector<f64>>,
    pub risk: Vec<RiskShare>,
    pub objective: f64,
    pub cost_term: f64,
    /// Sum of the shares (weighted by ρ).
    pub risk_term: f64,
}

impl DecodedSolution {
    /// Unweighted worst-case CVaR total; NaN when ρ = 0.
    pub fn risk_measure(&self, rho: f64) -> f64 {
        if rho > 0.0 {
            self.risk_term / rho
        } else {
            f64::NAN
        }
    }
}

pub fn decode_solution(result: &SolverResult, problem: &AssembledProblem) -> Result<DecodedSolution> {
    if !result.is_optimal() {
        result.clone().into_optimal()?;
    }
    let y = &result.y;
    if y.len() != problem.layout.len() {
        return Err(Error::dim("solution length", problem.layout.len(), y.len()));
    }
    let values = problem.layout.keys().iter().zip(y).map(|(k, v)| (*k, *v)).collect();
    let policies: BTreeMap<usize, AffinePolicy> = problem.policies.iter().map(|(id, p)| (*id, p.evaluate(y))).collect();
    let first_inputs = problem
        .policies
        .iter()
        .map(|(id, p)| {
            let m = p.e.len() / problem.horizon;
            (*id, DVector::from_fn(m, |k, _| p.e[k].eval(y)))
        })
        .collect();
    let risk: Vec<RiskShare> = problem
        .risk_rows
        .iter()
        .map(|r| RiskShare {
            row: r.id,
            stage: r.stage,
            kind: r.kind,
            share: r.block.objective.eval(y),
            lambda: y[r.block.lambda],
            kappa: y[r.kappa],
        })
        .collect();
    let risk_term = risk.iter().map(|r| r.share).sum();
    Ok(DecodedSolution {
        status: result.status,
        y: y.clone(),
        values,
        policies,
        first_inputs,
        risk,
        objective: problem.qp.objective(y),
        cost_term: problem.cost.eval(y),
        risk_term,
    })
}

impl AssembledProblem {
    /// The same program with every device decision pinned to `y`'s value,
    /// leaving the risk auxiliaries free.
    pub fn with_fixed_decisions(&self, y: &[f64]) -> Result<QuadraticProgram> {
        let mut qp = self.qp.clone();
        for (i, k) in self.layout.keys().iter().enumerate() {
            if k.is_decision() {
                qp.lb[i] = y[i];
                qp.ub[i] = y[i];
            }
        }
        Ok(qp)
    }

    pub fn solve(&self, settings: &qp::Settings) -> SolverResult {
        qp::solve(&self.qp, settings)
    }

    /// Writes `problem.qp` (sparse triplet text) and `layout.json`.
    pub fn write_archive(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        qp::dump::save(&self.qp, &dir.join("problem.qp"))?;
        let vars: Vec<serde_json::Value> = self
            .layout
            .keys()
            .iter()
            .enumerate()
            .map(|(i, k)| serde_json::json!({"index": i, "name": k.to_string()}))
            .collect();
        let rows: Vec<serde_json::Value> = self
            .risk_rows
            .iter()
            .map(|r| {
                serde_json::json!({
                    "id": r.id,
                    "stage": r.stage,
                    "kind": r.kind,
                    "radius": r.radius,
                    "xi_stages": r.xi_stages,
                    "lambda": r.block.lambda,
                    "kappa": r.kappa,
                    "inequality_rows": [r.block.rows.start, r.block.rows.end],
                })
            })
            .collect();
        let doc = serde_json::json!({
            "formulation": self.formulation,
            "horizon": self.horizon,
            "t0": self.t0,
            "n_xi": self.n_xi,
            "beta": self.risk.beta,
            "rho": self.risk.rho,
            "n": self.layout.len(),
            "variables": vars,
            "risk_rows": rows,
        });
        std::fs::write(dir.join("layout.json"), serde_json::to_string_pretty(&doc).map_err(std::io::Error::other)?)?;
        Ok(())
    }
}
