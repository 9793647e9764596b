//! Receding-horizon closed loop, out-of-sample evaluation and radius tuning.
//!
//! At each step the controller assembles a horizon problem from the current
//! device states, applies only the first-stage inputs (evaluated at the
//! realized error of that step), advances the devices and optionally appends
//! realized errors to its training window. Near the end of the simulation the
//! horizon is truncated so no stage extends past the last step.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::case::Case;
use crate::dataset::ForecastErrorDataset;
use crate::devices::{apply_policy, realized_injection, AffinePolicy, DeviceModel};
use crate::dro::{empirical_cvar, RiskConfig};
use crate::error::{Error, Result};
use crate::linearization::{approx_voltage_magnitude, build_sensitivities, VoltageLinearization};
use crate::network::{ac_power_flow, build_admittance, dc_flow_map, AdmittanceMatrix, Injections, AC_DEFAULT_TOL};
use crate::opf::{
    assemble_distribution, assemble_transmission, decode_solution, AssembledProblem, AssemblyOptions, DecodedSolution,
    Formulation, OpfInputs, RowKind,
};
use crate::qp::{self, SolveStatus};

/// Realized rows above this value count as violations.
pub const VIOLATION_TOL: f64 = 1e-9;

pub const DEFAULT_WINDOW_CAP: usize = 500;

/// How realized network quantities are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Accounting {
    /// Full AC power flow for voltages; DC flows for transmission.
    #[default]
    Ac,
    /// The same linear model the optimizer uses.
    Linearized,
}

/// Everything needed to build and solve one horizon problem.
#[derive(Debug, Clone)]
pub struct ControllerConfig {
    pub formulation: Formulation,
    pub horizon: usize,
    /// One radius for all stages, or one per stage.
    pub epsilon: Vec<f64>,
    pub risk: RiskConfig,
    pub options: AssemblyOptions,
    pub settings: qp::Settings,
    pub accounting: Accounting,
    /// Slack voltage.
    pub v0: Complex64,
    /// Re-solves with doubled iteration limits after `MaxIterations`.
    pub max_retries: usize,
}

impl ControllerConfig {
    pub fn new(formulation: Formulation, horizon: usize, epsilon: Vec<f64>, risk: RiskConfig) -> Self {
        ControllerConfig {
            formulation,
            horizon,
            epsilon,
            risk,
            options: AssemblyOptions::default(),
            settings: qp::Settings::default(),
            accounting: Accounting::Ac,
            v0: Complex64::new(1.0, 0.0),
            max_retries: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Validation("horizon must be at least 1".into()));
        }
        if self.epsilon.is_empty() || (self.epsilon.len() != 1 && self.epsilon.len() < self.horizon) {
            return Err(Error::Validation(format!(
                "epsilon schedule has {} entries for a horizon of {}",
                self.epsilon.len(),
                self.horizon
            )));
        }
        if self.epsilon.iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
            return Err(Error::Validation("Wasserstein radii must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// The radius schedule for a horizon of `h` stages.
    fn schedule(&self, h: usize) -> Vec<f64> {
        if self.epsilon.len() == 1 {
            self.epsilon.clone()
        } else {
            self.epsilon[..h].to_vec()
        }
    }

    pub fn with_epsilon(&self, epsilon: Vec<f64>) -> Self {
        ControllerConfig {
            epsilon,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct MpcConfig {
    pub controller: ControllerConfig,
    /// Number of closed-loop steps T.
    pub steps: usize,
    /// Absolute time of the first step (forecast index).
    pub start: usize,
    /// Append realized error trajectories to the training window.
    pub online_update: bool,
    /// Window size limit; the oldest rows are dropped first.
    pub window_cap: usize,
    /// Seed for generated scenarios and datasets.
    pub seed: u64,
}

impl MpcConfig {
    pub fn new(controller: ControllerConfig, steps: usize) -> Self {
        MpcConfig {
            controller,
            steps,
            start: 0,
            online_update: false,
            window_cap: DEFAULT_WINDOW_CAP,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        self.controller.validate()?;
        if self.steps < self.controller.horizon {
            return Err(Error::Validation(format!(
                "horizon {} exceeds the {} simulated steps",
                self.controller.horizon, self.steps
            )));
        }
        if self.window_cap == 0 {
            return Err(Error::Validation("window cap must be positive".into()));
        }
        Ok(())
    }
}

/// Precomputed network maps for realized-quantity accounting.
#[derive(Debug, Clone)]
pub struct Plant<'a> {
    pub case: &'a Case,
    pub formulation: Formulation,
    adm: Option<AdmittanceMatrix>,
    lin: Option<VoltageLinearization>,
    gamma: Option<DMatrix<f64>>,
    v0: Complex64,
}

impl<'a> Plant<'a> {
    pub fn new(case: &'a Case, formulation: Formulation, v0: Complex64) -> Result<Self> {
        let mut plant = Plant {
            case,
            formulation,
            adm: None,
            lin: None,
            gamma: None,
            v0,
        };
        match formulation {
            Formulation::Distribution => {
                let adm = build_admittance(&case.network)?;
                plant.lin = Some(build_sensitivities(&adm, v0)?);
                plant.adm = Some(adm);
            }
            Formulation::Transmission => plant.gamma = Some(dc_flow_map(&case.network)?),
        }
        Ok(plant)
    }

    pub fn linearization(&self) -> Option<&VoltageLinearization> {
        self.lin.as_ref()
    }

    /// Assembles the horizon problem for the given device states.
    pub fn assemble(
        &self,
        ctrl: &ControllerConfig,
        devices: &[DeviceModel],
        dataset: &ForecastErrorDataset,
        horizon: usize,
        t0: usize,
    ) -> Result<AssembledProblem> {
        let eps = ctrl.schedule(horizon);
        let ds = dataset.truncate(horizon)?;
        let inp = OpfInputs {
            network: &self.case.network,
            devices,
            costs: &self.case.costs,
            dataset: &ds,
            epsilon: &eps,
            risk: ctrl.risk,
            horizon,
            t0,
            options: ctrl.options,
        };
        match self.formulation {
            Formulation::Distribution => assemble_distribution(&inp, self.lin.as_ref().expect("linearization")),
            Formulation::Transmission => assemble_transmission(&inp),
        }
    }

    /// Network rows (`value <= 0` when satisfied) for realized bus injections
    /// (all buses, slack first).
    pub fn network_rows(&self, p: &[f64], q: &[f64], accounting: Accounting) -> Result<NetworkState> {
        let net = &self.case.network;
        let n = net.n_pq();
        match self.formulation {
            Formulation::Distribution => {
                let pv = DVector::from_fn(n, |i, _| p[i + 1]);
                let qv = DVector::from_fn(n, |i, _| q[i + 1]);
                let vm = match accounting {
                    Accounting::Ac => {
                        let adm = self.adm.as_ref().expect("admittance");
                        let v = ac_power_flow(net, adm, &Injections { p: pv, q: qv }, self.v0, AC_DEFAULT_TOL)?;
                        v.iter().skip(1).map(|c| c.norm()).collect::<Vec<f64>>()
                    }
                    Accounting::Linearized => {
                        approx_voltage_magnitude(self.lin.as_ref().expect("linearization"), &pv, &qv)?
                            .iter()
                            .copied()
                            .collect()
                    }
                };
                let mut rows = Vec::with_capacity(2 * n);
                for bus in 1..=n {
                    let b = net.bus(bus);
                    rows.push((RowKind::VoltageUpper { bus }, vm[bus - 1] - b.vmax));
                    rows.push((RowKind::VoltageLower { bus }, b.vmin - vm[bus - 1]));
                }
                Ok(NetworkState { values: vm, rows })
            }
            Formulation::Transmission => {
                let gamma = self.gamma.as_ref().expect("flow map");
                let nl = net.lines.len();
                let flows: Vec<f64> = (0..nl)
                    .map(|l| (1..=n).map(|bus| gamma[(l, bus - 1)] * p[bus]).sum())
                    .collect();
                let mut rows = Vec::with_capacity(2 * nl);
                for reverse in [false, true] {
                    for (l, f) in flows.iter().enumerate() {
                        let f = if reverse { -f } else { *f };
                        rows.push((RowKind::LineFlow { line: l, reverse }, f - net.lines[l].limit));
                    }
                }
                Ok(NetworkState { values: flows, rows })
            }
        }
    }

    /// Solves, retrying with a larger iteration budget on `MaxIterations`.
    pub fn solve(&self, ctrl: &ControllerConfig, problem: &AssembledProblem) -> Result<qp::SolverResult> {
        let mut settings = ctrl.settings.clone();
        let mut result = problem.solve(&settings);
        for _ in 0..ctrl.max_retries {
            if result.status != SolveStatus::MaxIterations {
                break;
            }
            settings.max_iter *= 2;
            log::warn!("solver hit the iteration limit, retrying with max_iter = {}", settings.max_iter);
            result = problem.solve(&settings);
        }
        if result.status == SolveStatus::MaxIterations {
            return result.into_optimal();
        }
        Ok(result)
    }
}

/// Realized voltage magnitudes (PQ buses) or line flows, and the network rows.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub values: Vec<f64>,
    pub rows: Vec<(RowKind, f64)>,
}

/// Cost of one stage: `fxᵀx + ½xᵀHx x + fuᵀu + ½uᵀHu u` summed over devices.
fn stage_cost(case: &Case, dev: &DeviceModel, x_next: &DVector<f64>, u: &DVector<f64>) -> f64 {
    let Some(c) = case.costs.get(dev.id) else { return 0.0 };
    let mut v = 0.0;
    if x_next.len() == c.fx.len() {
        v += c.fx.dot(x_next) + 0.5 * (x_next.transpose() * &c.hx * x_next)[0];
    }
    if u.len() == c.fu.len() {
        v += c.fu.dot(u) + 0.5 * (u.transpose() * &c.hu * u)[0];
    }
    v
}

/// Local rows of `dev` over one stage starting from state `x`.
fn device_rows(dev: &DeviceModel, x: &DVector<f64>, x_next: &DVector<f64>, u: &DVector<f64>, xi: &[f64]) -> Vec<(RowKind, f64)> {
    let mut d = dev.clone();
    d.x0 = x.clone();
    let block = d.constraint_block(1, xi.len());
    (0..block.w.len())
        .map(|r| {
            let mut v = -block.w[r];
            for c in 0..block.t.ncols() {
                v += block.t[(r, c)] * x_next[c];
            }
            for c in 0..block.u.ncols() {
                v += block.u[(r, c)] * u[c];
            }
            for c in 0..block.z.ncols() {
                v += block.z[(r, c)] * xi[c];
            }
            (RowKind::Device { device: dev.id, row: r }, v)
        })
        .collect()
}

/// One closed-loop step. Timing lives in [`SimulationTrace::solve_seconds`]
/// so that records compare bitwise across runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub t: usize,
    pub horizon: usize,
    pub xi: Vec<f64>,
    /// Applied inputs per device id.
    pub inputs: BTreeMap<usize, Vec<f64>>,
    /// States before the step.
    pub states_before: BTreeMap<usize, Vec<f64>>,
    /// States after the step.
    pub states: BTreeMap<usize, Vec<f64>>,
    /// Realized bus injections, slack first.
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    /// PQ voltage magnitudes or line flows.
    pub network: Vec<f64>,
    pub rows: Vec<(RowKind, f64)>,
    pub stage_cost: f64,
    /// Σ p over all buses (zero for a balanced transmission dispatch).
    pub net_injection: f64,
    pub objective: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub window: usize,
}

impl StepRecord {
    pub fn violations(&self) -> impl Iterator<Item = &(RowKind, f64)> {
        self.rows.iter().filter(|r| r.1 > VIOLATION_TOL)
    }

    pub fn worst_violation(&self) -> f64 {
        self.rows.iter().map(|r| r.1).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationTrace {
    pub steps: Vec<StepRecord>,
    pub solve_seconds: Vec<f64>,
    /// Set when the loop stopped early.
    pub termination: Option<String>,
}

impl SimulationTrace {
    pub fn total_cost(&self) -> f64 {
        self.steps.iter().map(|s| s.stage_cost).sum()
    }

    /// Largest difference between a stored state and the one recomputed from
    /// the previous state and the applied inputs.
    pub fn state_consistency(&self, devices: &[DeviceModel]) -> f64 {
        let mut worst: f64 = 0.0;
        for (k, s) in self.steps.iter().enumerate() {
            for dev in devices {
                let x = DVector::from_vec(s.states_before[&dev.id].clone());
                let u = DVector::from_vec(s.inputs[&dev.id].clone());
                let next = dev.advance(&x, &u);
                for (a, b) in next.iter().zip(&s.states[&dev.id]) {
                    worst = worst.max((a - b).abs());
                }
                if k + 1 < self.steps.len() {
                    for (a, b) in s.states[&dev.id].iter().zip(&self.steps[k + 1].states_before[&dev.id]) {
                        worst = worst.max((a - b).abs());
                    }
                }
            }
        }
        worst
    }

    /// One row per step: errors, inputs, states, network values, row count
    /// violated, worst violation, costs and solver statistics.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let Some(first) = self.steps.first() else {
            out.flush()?;
            return Ok(());
        };
        let mut header = vec!["t".to_string(), "horizon".into()];
        header.extend((0..first.xi.len()).map(|k| format!("xi_{k}")));
        for (id, u) in &first.inputs {
            header.extend((0..u.len()).map(|k| format!("u_{id}_{k}")));
        }
        for (id, x) in &first.states {
            header.extend((0..x.len()).map(|k| format!("x_{id}_{k}")));
        }
        header.extend((0..first.network.len()).map(|k| format!("net_{k}")));
        header.extend(
            ["violated_rows", "worst_violation", "stage_cost", "net_injection", "objective", "status", "iterations", "window"]
                .map(String::from),
        );
        out.write_record(&header).map_err(csv_err)?;
        for s in &self.steps {
            let mut rec = vec![s.t.to_string(), s.horizon.to_string()];
            rec.extend(s.xi.iter().map(f64::to_string));
            rec.extend(s.inputs.values().flatten().map(f64::to_string));
            rec.extend(s.states.values().flatten().map(f64::to_string));
            rec.extend(s.network.iter().map(f64::to_string));
            rec.push(s.violations().count().to_string());
            rec.push(s.worst_violation().to_string());
            rec.push(s.stage_cost.to_string());
            rec.push(s.net_injection.to_string());
            rec.push(s.objective.to_string());
            rec.push(format!("{:?}", s.status));
            rec.push(s.iterations.to_string());
            rec.push(s.window.to_string());
            out.write_record(&rec).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// First-stage inputs of `pol` at the realized stage error.
fn first_stage_input(dev: &DeviceModel, pol: Option<&AffinePolicy>, xi: &[f64]) -> DVector<f64> {
    let m = dev.n_input();
    match pol {
        Some(p) => DVector::from_fn(m, |k, _| {
            p.e[k] + (0..xi.len()).map(|c| p.d[(k, c)] * xi[c]).sum::<f64>()
        }),
        None => DVector::zeros(m),
    }
}

/// Runs the closed loop for `config.steps` steps. `scenario` holds one
/// realized error vector per step (rows). Stage-level infeasibility ends the
/// trace early with a diagnostic in `termination`.
pub fn run_mpc(
    case: &Case,
    config: &MpcConfig,
    training: &ForecastErrorDataset,
    scenario: &DMatrix<f64>,
) -> Result<SimulationTrace> {
    config.validate()?;
    let ctrl = &config.controller;
    let n_xi = training.n_xi;
    if scenario.nrows() < config.steps {
        return Err(Error::Validation(format!(
            "scenario has {} steps, {} requested",
            scenario.nrows(),
            config.steps
        )));
    }
    if scenario.ncols() != n_xi {
        return Err(Error::dim("scenario columns", n_xi, scenario.ncols()));
    }
    if training.n_stages < ctrl.horizon {
        return Err(Error::Validation(format!(
            "training data covers {} stages, horizon is {}",
            training.n_stages, ctrl.horizon
        )));
    }
    let plant = Plant::new(case, ctrl.formulation, ctrl.v0)?;
    let nb = case.network.buses.len();
    let h_max = ctrl.horizon;
    let mut devices = case.devices.clone();
    let mut window = training.truncate(h_max)?;
    let mut realized: Vec<Vec<f64>> = Vec::new();
    let mut trace = SimulationTrace {
        steps: Vec::with_capacity(config.steps),
        solve_seconds: Vec::with_capacity(config.steps),
        termination: None,
    };
    for t in 0..config.steps {
        let h = h_max.min(config.steps - t);
        let abs = config.start + t;
        let problem = plant.assemble(ctrl, &devices, &window, h, abs)?;
        let result = plant.solve(ctrl, &problem)?;
        trace.solve_seconds.push(result.solve_time.as_secs_f64());
        if !result.is_optimal() {
            trace.termination = Some(format!("step {t}: controller problem returned {:?}", result.status));
            log::warn!("{}", trace.termination.as_deref().unwrap_or_default());
            break;
        }
        let sol = decode_solution(&result, &problem)?;
        let xi: Vec<f64> = scenario.row(t).iter().copied().collect();
        let mut p = vec![0.0; nb];
        let mut q = vec![0.0; nb];
        let mut rows = Vec::new();
        let mut cost = 0.0;
        let mut inputs = BTreeMap::new();
        let mut before = BTreeMap::new();
        let mut after = BTreeMap::new();
        for dev in devices.iter_mut() {
            let u = first_stage_input(dev, sol.policies.get(&dev.id), &xi);
            let x_next = dev.advance(&dev.x0, &u);
            let (dp, dq) = realized_injection(dev, abs, &x_next, &u, &xi);
            p[dev.bus] += dp;
            q[dev.bus] += dq;
            rows.extend(device_rows(dev, &dev.x0, &x_next, &u, &xi));
            cost += stage_cost(case, dev, &x_next, &u);
            inputs.insert(dev.id, u.iter().copied().collect());
            before.insert(dev.id, dev.x0.iter().copied().collect());
            after.insert(dev.id, x_next.iter().copied().collect());
            dev.x0 = x_next;
        }
        let net = plant.network_rows(&p, &q, ctrl.accounting)?;
        let mut all_rows = net.rows;
        all_rows.extend(rows);
        trace.steps.push(StepRecord {
            t,
            horizon: h,
            xi: xi.clone(),
            inputs,
            states_before: before,
            states: after,
            net_injection: p.iter().sum(),
            p,
            q,
            network: net.values,
            rows: all_rows,
            stage_cost: cost,
            objective: sol.objective,
            status: result.status,
            iterations: result.iterations,
            window: window.n_samples(),
        });
        realized.push(xi);
        if config.online_update && realized.len() >= h_max {
            let row: Vec<f64> = realized[realized.len() - h_max..].iter().flatten().copied().collect();
            window.push(&row, config.window_cap)?;
        }
    }
    Ok(trace)
}

/// Statistics of one constraint row across validation scenarios.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowStats {
    pub stage: usize,
    pub kind: RowKind,
    pub cvar: f64,
    pub mean: f64,
    pub violation_frequency: f64,
    pub worst_violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OosReport {
    pub n_scenarios: usize,
    pub beta: f64,
    pub mean_cost: f64,
    /// Fraction of scenarios with at least one violated network row.
    pub violation_frequency: f64,
    /// Fraction of (scenario, network row) pairs that are violated.
    pub row_violation_frequency: f64,
    pub worst_violation: f64,
    /// Validation rows that also appear in the training data.
    pub overlap: usize,
    pub rows: Vec<RowStats>,
}

impl OosReport {
    /// Mean cost plus `rho` times the summed row CVaRs.
    pub fn score(&self, rho: f64) -> f64 {
        self.mean_cost + rho * self.rows.iter().filter(|r| r.kind.is_network()).map(|r| r.cvar).sum::<f64>()
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self).map_err(std::io::Error::other)?;
        Ok(())
    }
}

/// Cost and (stage, row, value) list of one evaluated scenario.
struct Outcome {
    cost: f64,
    rows: Vec<(usize, RowKind, f64)>,
}

fn aggregate(outcomes: &[Outcome], beta: f64, overlap: usize) -> Result<OosReport> {
    let n = outcomes.len();
    if n == 0 {
        return Err(Error::Validation("empty validation set".into()));
    }
    let mut by_row: BTreeMap<(usize, RowKindKey), (RowKind, Vec<f64>)> = BTreeMap::new();
    let mut any = 0usize;
    let mut net_pairs = 0usize;
    let mut net_viol = 0usize;
    let mut worst: f64 = 0.0;
    for o in outcomes {
        let mut hit = false;
        for &(stage, kind, v) in &o.rows {
            by_row.entry((stage, RowKindKey::from(kind))).or_insert((kind, Vec::new())).1.push(v);
            if kind.is_network() {
                net_pairs += 1;
                if v > VIOLATION_TOL {
                    net_viol += 1;
                    hit = true;
                    worst = worst.max(v);
                }
            }
        }
        if hit {
            any += 1;
        }
    }
    let rows = by_row
        .into_iter()
        .map(|((stage, _), (kind, v))| RowStats {
            stage,
            kind,
            cvar: empirical_cvar(&v, beta),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            violation_frequency: v.iter().filter(|x| **x > VIOLATION_TOL).count() as f64 / v.len() as f64,
            worst_violation: v.iter().copied().fold(0.0, f64::max),
        })
        .collect();
    Ok(OosReport {
        n_scenarios: n,
        beta,
        mean_cost: outcomes.iter().map(|o| o.cost).sum::<f64>() / n as f64,
        violation_frequency: any as f64 / n as f64,
        row_violation_frequency: if net_pairs == 0 { 0.0 } else { net_viol as f64 / net_pairs as f64 },
        worst_violation: worst,
        overlap,
        rows,
    })
}

/// Total order on row kinds for keyed aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct RowKindKey(u8, usize, usize);

impl From<RowKind> for RowKindKey {
    fn from(k: RowKind) -> Self {
        match k {
            RowKind::VoltageUpper { bus } => RowKindKey(0, bus, 0),
            RowKind::VoltageLower { bus } => RowKindKey(1, bus, 0),
            RowKind::LineFlow { line, reverse } => RowKindKey(2, line, reverse as usize),
            RowKind::Device { device, row } => RowKindKey(3, device, row),
        }
    }
}

fn row_hashes(m: &DMatrix<f64>) -> HashSet<Vec<u64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().map(|v| v.to_bits()).collect()).collect()
}

fn count_overlap(training: &DMatrix<f64>, validation: &DMatrix<f64>) -> usize {
    let cols = training.ncols().min(validation.ncols());
    let train = row_hashes(&training.columns(0, cols).into_owned());
    let n = (0..validation.nrows())
        .filter(|&i| train.contains(&validation.row(i).columns(0, cols).iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
        .count();
    if n > 0 {
        log::warn!("{n} validation rows also appear in the training data");
    }
    n
}

/// Evaluates a solved horizon plan (affine policies applied open loop) on
/// validation error trajectories, one per row of `validation`
/// (`horizon·n_xi` columns, stage-major).
pub fn evaluate_plan(
    plant: &Plant,
    problem: &AssembledProblem,
    solution: &DecodedSolution,
    validation: &DMatrix<f64>,
    accounting: Accounting,
    training: Option<&DMatrix<f64>>,
) -> Result<OosReport> {
    let h = problem.horizon;
    let n_xi = problem.n_xi;
    if validation.ncols() < h * n_xi {
        return Err(Error::dim("validation columns", h * n_xi, validation.ncols()));
    }
    let case = plant.case;
    let nb = case.network.buses.len();
    let overlap = training.map_or(0, |t| count_overlap(t, &validation.columns(0, h * n_xi).into_owned()));
    let policies: BTreeMap<usize, AffinePolicy> = solution.policies.clone();
    let outcomes: Vec<Result<Outcome>> = (0..validation.nrows())
        .into_par_iter()
        .map(|i| {
            let xi = DVector::from_fn(h * n_xi, |c, _| validation[(i, c)]);
            let mut traj = Vec::with_capacity(case.devices.len());
            for dev in &case.devices {
                let m = dev.n_input();
                let (x, u) = match policies.get(&dev.id) {
                    Some(pol) => {
                        let u = &pol.d * &xi + &pol.e;
                        (apply_policy(dev, pol, &xi)?, u)
                    }
                    None => {
                        let pol = AffinePolicy {
                            d: DMatrix::zeros(m * h, h * n_xi),
                            e: DVector::zeros(m * h),
                        };
                        (apply_policy(dev, &pol, &xi)?, pol.e)
                    }
                };
                traj.push((x, u));
            }
            let mut cost = 0.0;
            let mut rows = Vec::new();
            for j in 0..h {
                let xi_j: Vec<f64> = xi.rows(j * n_xi, n_xi).iter().copied().collect();
                let mut p = vec![0.0; nb];
                let mut q = vec![0.0; nb];
                for (dev, (x, u)) in case.devices.iter().zip(&traj) {
                    let (n, m) = (dev.n_state(), dev.n_input());
                    let x_prev = if j == 0 { dev.x0.clone() } else { x.rows((j - 1) * n, n).into_owned() };
                    let x_next = x.rows(j * n, n).into_owned();
                    let u_j = u.rows(j * m, m).into_owned();
                    let (dp, dq) = realized_injection(dev, problem.t0 + j, &x_next, &u_j, &xi_j);
                    p[dev.bus] += dp;
                    q[dev.bus] += dq;
                    cost += stage_cost(case, dev, &x_next, &u_j);
                    rows.extend(device_rows(dev, &x_prev, &x_next, &u_j, &xi_j).into_iter().map(|(k, v)| (j, k, v)));
                }
                let net = plant.network_rows(&p, &q, accounting)?;
                rows.extend(net.rows.into_iter().map(|(k, v)| (j, k, v)));
            }
            Ok(Outcome { cost, rows })
        })
        .collect();
    let outcomes: Vec<Outcome> = outcomes.into_iter().collect::<Result<_>>()?;
    aggregate(&outcomes, problem.risk.beta, overlap)
}

/// Closed-loop Monte Carlo: one [`run_mpc`] per scenario (run concurrently),
/// rows keyed by simulation step.
pub fn monte_carlo_oos(
    case: &Case,
    config: &MpcConfig,
    training: &ForecastErrorDataset,
    scenarios: &[DMatrix<f64>],
) -> Result<(OosReport, Vec<SimulationTrace>)> {
    if scenarios.is_empty() {
        return Err(Error::Validation("empty validation set".into()));
    }
    let traces: Vec<SimulationTrace> = scenarios
        .par_iter()
        .map(|s| run_mpc(case, config, training, s))
        .collect::<Result<_>>()?;
    let report = report_from_traces(&traces, config.controller.risk.beta)?;
    Ok((report, traces))
}

pub fn report_from_traces(traces: &[SimulationTrace], beta: f64) -> Result<OosReport> {
    let outcomes: Vec<Outcome> = traces
        .iter()
        .map(|tr| Outcome {
            cost: tr.total_cost(),
            rows: tr
                .steps
                .iter()
                .flat_map(|s| s.rows.iter().map(move |&(k, v)| (s.t, k, v)))
                .collect(),
        })
        .collect();
    aggregate(&outcomes, beta, 0)
}

/// Solves one horizon problem from the case's initial states.
pub fn solve_plan(
    plant: &Plant,
    ctrl: &ControllerConfig,
    training: &ForecastErrorDataset,
    t0: usize,
) -> Result<(AssembledProblem, DecodedSolution)> {
    ctrl.validate()?;
    let problem = plant.assemble(ctrl, &plant.case.devices, training, ctrl.horizon, t0)?;
    let result = plant.solve(ctrl, &problem)?;
    let sol = decode_solution(&result, &problem)?;
    Ok((problem, sol))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuningResult {
    pub epsilon: f64,
    /// (ε, mean held-out score) per grid point.
    pub scores: Vec<(f64, f64)>,
}

/// K-fold cross-validation of a single radius over `grid`: each fold is held
/// out in turn and the plan trained on the rest is scored by held-out mean
/// cost plus ρ times the summed row CVaRs. Ties go to the smaller radius.
pub fn tune_epsilon(
    plant: &Plant,
    ctrl: &ControllerConfig,
    training: &ForecastErrorDataset,
    t0: usize,
    grid: &[f64],
    folds: usize,
) -> Result<TuningResult> {
    let n = training.n_samples();
    if grid.is_empty() {
        return Err(Error::Validation("empty radius grid".into()));
    }
    if folds < 2 || folds > n {
        return Err(Error::Validation(format!("{folds} folds for {n} samples")));
    }
    let ds = training.truncate(ctrl.horizon)?;
    let supports = Some(ds.supports.clone());
    let mut scores = Vec::with_capacity(grid.len());
    for &eps in grid {
        let c = ctrl.with_epsilon(vec![eps]);
        let mut total = 0.0;
        for f in 0..folds {
            let held: Vec<usize> = (0..n).filter(|i| i % folds == f).collect();
            let kept: Vec<usize> = (0..n).filter(|i| i % folds != f).collect();
            let train = ForecastErrorDataset::new(ds.samples.select_rows(&kept), ds.n_xi, supports.clone())?;
            let (problem, sol) = solve_plan(plant, &c, &train, t0)?;
            let report = evaluate_plan(plant, &problem, &sol, &ds.samples.select_rows(&held), ctrl.accounting, None)?;
            total += report.score(ctrl.risk.rho);
        }
        scores.push((eps, total / folds as f64));
    }
    let best = scores
        .iter()
        .fold((f64::NAN, f64::INFINITY), |acc, &(e, s)| if s < acc.1 { (e, s) } else { acc });
    Ok(TuningResult { epsilon: best.0, scores })
}

/// One point of an ε or ρ sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub epsilon: f64,
    pub rho: f64,
    pub objective: f64,
    pub cost_term: f64,
    pub risk_term: f64,
    pub violation_frequency: f64,
    pub oos_cost: f64,
    /// Summed out-of-sample CVaR of the network rows.
    pub oos_cvar: f64,
}

/// Solves the plan for every (ε, ρ) pair and evaluates each on `validation`.
pub fn sweep(
    plant: &Plant,
    ctrl: &ControllerConfig,
    training: &ForecastErrorDataset,
    t0: usize,
    epsilons: &[f64],
    rhos: &[f64],
    validation: &DMatrix<f64>,
) -> Result<Vec<SweepPoint>> {
    let mut out = Vec::with_capacity(epsilons.len() * rhos.len());
    for &rho in rhos {
        for &eps in epsilons {
            let mut c = ctrl.with_epsilon(vec![eps]);
            c.risk = RiskConfig::new(ctrl.risk.beta, rho)?;
            let (problem, sol) = solve_plan(plant, &c, training, t0)?;
            let rep = evaluate_plan(plant, &problem, &sol, validation, c.accounting, Some(&training.samples))?;
            out.push(SweepPoint {
                epsilon: eps,
                rho,
                objective: sol.objective,
                cost_term: sol.cost_term,
                risk_term: sol.risk_term,
                violation_frequency: rep.violation_frequency,
                oos_cost: rep.mean_cost,
                oos_cvar: rep.rows.iter().filter(|r| r.kind.is_network()).map(|r| r.cvar).sum(),
            });
        }
    }
    Ok(out)
}
