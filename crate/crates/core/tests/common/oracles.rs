//! Helpers shared by the assembler tests and the acceptance run, including
//! sample-average problems written without the assembler.

use std::collections::BTreeMap;

use dro_opf::case::Case;
use dro_opf::dataset::ForecastErrorDataset;
use dro_opf::devices::{apply_policy, realized_injection, DeviceModel, Template};
use dro_opf::dro::RiskConfig;
use dro_opf::linearization::{build_sensitivities, VoltageLinearization};
use dro_opf::network::{build_admittance, dc_flow_map};
use dro_opf::opf::*;
use dro_opf::qp::{self, LinExpr, QpBuilder, Settings};
use dro_opf::affine::BiAffine;
use dro_opf::dro::{cvar_pieces, dro_epigraph, AmbiguitySet, EmpiricalDistribution, PolytopicSupport};
use dro_opf::linearization::approx_voltage_magnitude;
use dro_opf::network::{ac_power_flow, AdmittanceMatrix, Injections, NetworkModel};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use num_complex::Complex64;

pub const BETA: f64 = 0.1;

pub fn lin(case: &Case) -> VoltageLinearization {
    let adm = build_admittance(&case.network).unwrap();
    build_sensitivities(&adm, Complex64::new(1.0, 0.0)).unwrap()
}

pub fn inputs<'a>(case: &'a Case, ds: &'a ForecastErrorDataset, eps: &'a [f64], rho: f64, h: usize, t0: usize) -> OpfInputs<'a> {
    OpfInputs {
        network: &case.network,
        devices: &case.devices,
        costs: &case.costs,
        dataset: ds,
        epsilon: eps,
        risk: RiskConfig::new(BETA, rho).unwrap(),
        horizon: h,
        t0,
        options: AssemblyOptions::default(),
    }
}

pub fn solve(p: &AssembledProblem) -> DecodedSolution {
    let r = p.solve(&Settings::default());
    assert!(r.is_optimal(), "{:?}", r.status);
    decode_solution(&r, p).unwrap()
}

pub fn distribution(case: &Case, ds: &ForecastErrorDataset, eps: f64, rho: f64, h: usize, t0: usize) -> (AssembledProblem, DecodedSolution) {
    let l = lin(case);
    let p = assemble_distribution(&inputs(case, ds, &[eps], rho, h, t0), &l).unwrap();
    let s = solve(&p);
    (p, s)
}

pub fn transmission(case: &Case, ds: &ForecastErrorDataset, eps: f64, rho: f64, h: usize) -> (AssembledProblem, DecodedSolution) {
    let p = assemble_transmission(&inputs(case, ds, &[eps], rho, h, 0)).unwrap();
    let s = solve(&p);
    (p, s)
}

/// Adds `ρ · [ (1/N) Σ_i max(row_i + κ, 0) − βκ ]` with one epigraph
/// variable per sample.
pub fn saa_cvar(b: &mut QpBuilder<String>, name: &str, rows: &[LinExpr], rho: f64) {
    let kappa = b.free_var(format!("{name}/kappa"));
    let n = rows.len() as f64;
    b.add_objective(&LinExpr::term(kappa, -BETA * rho), 1.0);
    for (i, r) in rows.iter().enumerate() {
        let t = b.add_var(format!("{name}/t{i}"), 0.0, f64::INFINITY);
        b.add_objective(&LinExpr::term(t, rho / n), 1.0);
        let mut e = r.clone();
        e.add_term(kappa, 1.0).add_term(t, -1.0);
        b.add_le(e);
    }
}

pub fn solve_builder(b: QpBuilder<String>) -> f64 {
    let (qp, _) = b.build().unwrap();
    let r = qp::solve(&qp, &Settings::default());
    assert!(r.is_optimal(), "{:?}", r.status);
    r.objective
}

/// Sample-average distribution problem written directly from the feeder
/// model: curtailment α and reactive set point q per PV and stage, voltages
/// `a + M p + N q`, one CVaR per voltage bound.
pub fn saa_distribution(case: &Case, ds: &ForecastErrorDataset, rho: f64, h: usize, t0: usize) -> f64 {
    let l = lin(case);
    let n = case.network.n_pq();
    let n_xi = ds.n_xi;
    let mut b: QpBuilder<String> = QpBuilder::new();
    let mut vars: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
    for d in &case.devices {
        if let Template::CurtailableRes(r) = &d.template {
            for j in 0..h {
                let a = b.add_var(format!("alpha{}_{j}", d.id), 0.0, 1.0);
                let q = b.add_var(format!("q{}_{j}", d.id), -r.qmax, r.qmax);
                vars.insert((d.id, j), (a, q));
                if let Some(c) = case.costs.get(d.id) {
                    b.add_objective(&LinExpr::term(a, c.fu[0]), 1.0);
                    b.add_objective(&LinExpr::term(q, c.fu[1]), 1.0);
                    let z = [a, q];
                    for r in 0..2 {
                        for s in 0..2 {
                            b.add_product(&LinExpr::var(z[r]), &LinExpr::var(z[s]), 0.5 * c.hu[(r, s)]);
                        }
                    }
                }
            }
        }
    }
    for j in 0..h {
        let mut upper: Vec<Vec<LinExpr>> = vec![Vec::new(); n];
        let mut lower: Vec<Vec<LinExpr>> = vec![Vec::new(); n];
        for i in 0..ds.n_samples() {
            let xi = |k: usize| ds.samples[(i, j * n_xi + k)];
            let mut p = vec![LinExpr::zero(); n + 1];
            let mut q = vec![LinExpr::zero(); n + 1];
            for d in &case.devices {
                match &d.template {
                    Template::CurtailableRes(r) => {
                        let avail = r.forecast.at(t0 + j) + xi(r.xi);
                        let (a, qv) = vars[&(d.id, j)];
                        p[d.bus].add_constant(avail).add_term(a, -avail);
                        q[d.bus].add_term(qv, 1.0);
                    }
                    Template::FixedLoad(ld) => {
                        let dem = ld.demand.at(t0 + j) + ld.xi.map_or(0.0, xi);
                        p[d.bus].add_constant(-dem);
                        q[d.bus].add_constant(-ld.q_ratio * dem);
                    }
                    _ => unreachable!(),
                }
            }
            for bus in 1..=n {
                let mut g = LinExpr::constant(l.a[bus - 1]);
                for k in 1..=n {
                    g.add_scaled(&p[k], l.m[(bus - 1, k - 1)]);
                    g.add_scaled(&q[k], l.n[(bus - 1, k - 1)]);
                }
                let bb = case.network.bus(bus);
                let mut up = g.clone();
                up.add_constant(-bb.vmax);
                let mut lo = g.scaled(-1.0);
                lo.add_constant(bb.vmin);
                upper[bus - 1].push(up);
                lower[bus - 1].push(lo);
            }
        }
        for bus in 0..n {
            saa_cvar(&mut b, &format!("up{j}_{bus}"), &upper[bus], rho);
            saa_cvar(&mut b, &format!("lo{j}_{bus}"), &lower[bus], rho);
        }
    }
    solve_builder(b)
}

/// Sample-average transmission problem written directly from the generator
/// template (`p_j = u_j`): causal affine reserves, balance per ξ column,
/// ramp and capacity rows at every sample, one CVaR per line direction.
pub fn saa_transmission(case: &Case, ds: &ForecastErrorDataset, rho: f64, h: usize) -> f64 {
    let n_xi = ds.n_xi;
    let gamma = dc_flow_map(&case.network).unwrap();
    let nl = case.network.lines.len();
    let nb = case.network.buses.len();
    let mut b: QpBuilder<String> = QpBuilder::new();
    // gen id -> per stage (e, D columns)
    let mut pol: BTreeMap<usize, Vec<(usize, Vec<usize>)>> = BTreeMap::new();
    for d in &case.devices {
        if let Template::Generator(_) = d.template {
            let stages = (0..h)
                .map(|j| {
                    let e = b.free_var(format!("e{}_{j}", d.id));
                    let dcols = (0..(j + 1) * n_xi).map(|c| b.free_var(format!("D{}_{j}_{c}", d.id))).collect();
                    (e, dcols)
                })
                .collect();
            pol.insert(d.id, stages);
        }
    }
    let gen_p = |id: usize, j: usize, xi: &[f64]| -> LinExpr {
        let (e, dcols) = &pol[&id][j];
        let mut x = LinExpr::var(*e);
        for (c, v) in dcols.iter().enumerate() {
            x.add_term(*v, xi[c]);
        }
        x
    };
    for j in 0..h {
        // nominal balance and one equality per ξ column
        let mut nominal = LinExpr::zero();
        let mut cols = vec![LinExpr::zero(); (j + 1) * n_xi];
        for d in &case.devices {
            match &d.template {
                Template::Generator(_) => {
                    let (e, dcols) = &pol[&d.id][j];
                    nominal.add_term(*e, 1.0);
                    for (c, v) in dcols.iter().enumerate() {
                        cols[c].add_term(*v, 1.0);
                    }
                }
                Template::CurtailableRes(r) => {
                    nominal.add_constant(r.forecast.at(j));
                    cols[j * n_xi + r.xi].add_constant(1.0);
                }
                Template::FixedLoad(l) => {
                    nominal.add_constant(-l.demand.at(j));
                    if let Some(k) = l.xi {
                        cols[j * n_xi + k].add_constant(-1.0);
                    }
                }
                _ => unreachable!(),
            }
        }
        b.add_eq(nominal);
        for c in cols {
            b.add_eq(c);
        }
    }
    let ns = ds.n_samples();
    let w = 1.0 / ns as f64;
    let mut flow_rows: Vec<Vec<LinExpr>> = vec![Vec::new(); 2 * nl * h];
    for i in 0..ns {
        let xi: Vec<f64> = ds.samples.row(i).iter().copied().collect();
        for j in 0..h {
            let mut p = vec![LinExpr::zero(); nb];
            for d in &case.devices {
                match &d.template {
                    Template::Generator(g) => {
                        let pj = gen_p(d.id, j, &xi);
                        let mut hi = pj.clone();
                        hi.add_constant(-g.pmax);
                        b.add_le(hi);
                        let mut lo = pj.scaled(-1.0);
                        lo.add_constant(g.pmin);
                        b.add_le(lo);
                        if let Some(r) = g.ramp {
                            let mut step = pj.clone();
                            if j == 0 {
                                step.add_constant(-g.p0);
                            } else {
                                step.add_scaled(&gen_p(d.id, j - 1, &xi), -1.0);
                            }
                            let mut up = step.clone();
                            up.add_constant(-r);
                            b.add_le(up);
                            let mut down = step.scaled(-1.0);
                            down.add_constant(-r);
                            b.add_le(down);
                        }
                        if let Some(c) = case.costs.get(d.id) {
                            b.add_objective(&pj, w * c.fx[0]);
                            b.add_product(&pj, &pj, 0.5 * w * c.hx[(0, 0)]);
                        }
                        p[d.bus].add_scaled(&pj, 1.0);
                    }
                    Template::CurtailableRes(r) => {
                        p[d.bus].add_constant(r.forecast.at(j) + xi[j * n_xi + r.xi]);
                    }
                    Template::FixedLoad(l) => {
                        p[d.bus].add_constant(-(l.demand.at(j) + l.xi.map_or(0.0, |k| xi[j * n_xi + k])));
                    }
                    _ => unreachable!(),
                }
            }
            for l in 0..nl {
                let mut f = LinExpr::zero();
                for bus in 1..nb {
                    f.add_scaled(&p[bus], gamma[(l, bus - 1)]);
                }
                let limit = case.network.lines[l].limit;
                let mut fwd = f.clone();
                fwd.add_constant(-limit);
                let mut rev = f.scaled(-1.0);
                rev.add_constant(-limit);
                flow_rows[(j * 2) * nl + l].push(fwd);
                flow_rows[(j * 2 + 1) * nl + l].push(rev);
            }
        }
    }
    for (o, rows) in flow_rows.iter().enumerate() {
        saa_cvar(&mut b, &format!("line{o}"), rows, rho);
    }
    solve_builder(b)
}


pub fn assert_nondecreasing(v: &[f64], what: &str) {
    for w in v.windows(2) {
        assert!(w[1] >= w[0] - 1e-7 * w[0].abs().max(1.0), "{what} decreased: {v:?}");
    }
}

/// Unweighted risk measure of the decisions in `s`, evaluated on a problem
/// with ρ = 1 so that ρ = 0 solutions are covered too.
pub fn risk_of(unit: &AssembledProblem, s: &DecodedSolution) -> f64 {
    let qp = unit.with_fixed_decisions(&s.y).unwrap();
    let r = qp::solve(&qp, &Settings::default());
    assert!(r.is_optimal());
    let d = decode_solution(&r, unit).unwrap();
    d.risk_term
}

pub fn balance_residual(devices: &[DeviceModel], s: &DecodedSolution, xi: &DVector<f64>, h: usize) -> f64 {
    let mut worst: f64 = 0.0;
    let traj: BTreeMap<usize, (DVector<f64>, DVector<f64>)> = devices
        .iter()
        .filter_map(|d| {
            s.policies
                .get(&d.id)
                .map(|pol| (d.id, (apply_policy(d, pol, xi).unwrap(), &pol.d * xi + &pol.e)))
        })
        .collect();
    for j in 0..h {
        let xj: Vec<f64> = xi.rows(j * 2, 2).iter().copied().collect();
        let mut total = 0.0;
        for d in devices {
            let (x, u) = match traj.get(&d.id) {
                Some((x, u)) => {
                    let (n, m) = (d.n_state(), d.n_input());
                    (x.rows(j * n, n).into_owned(), u.rows(j * m, m).into_owned())
                }
                None => (DVector::zeros(0), DVector::zeros(0)),
            };
            total += realized_injection(d, j, &x, &u, &xj).0;
        }
        worst = worst.max(total.abs());
    }
    worst
}

fn ac_magnitudes(net: &NetworkModel, adm: &AdmittanceMatrix, p: &DVector<f64>, q: &DVector<f64>) -> DVector<f64> {
    let v = ac_power_flow(net, adm, &Injections { p: p.clone(), q: q.clone() }, Complex64::new(1.0, 0.0), 1e-13).unwrap();
    DVector::from_fn(p.len(), |i, _| v[i + 1].norm())
}

/// Largest linearization error at injections `(p, q)` and at half of them.
pub fn linearization_error(scale: f64, seed: u64) -> (f64, f64) {
    let case = super::feeder();
    let adm = build_admittance(&case.network).unwrap();
    let lin = build_sensitivities(&adm, Complex64::new(1.0, 0.0)).unwrap();
    let mut r = super::rng(seed);
    let p = DVector::from_fn(3, |_, _| r.random_range(-scale..=scale));
    let q = DVector::from_fn(3, |_, _| r.random_range(-scale..=scale));
    let err = |p: &DVector<f64>, q: &DVector<f64>| {
        let ac = ac_magnitudes(&case.network, &adm, p, q);
        let ap = approx_voltage_magnitude(&lin, p, q).unwrap();
        (ac - ap).amax()
    };
    (err(&p, &q), err(&(p.clone() * 0.5), &(q.clone() * 0.5)))
}

/// `min_κ (1/N) Σ (v_i + κ)_+ − κβ` through the reformulation at zero radius
/// with κ as a decision.
pub fn cvar_via_epigraph(values: &[f64], beta: f64) -> f64 {
    let mut b: QpBuilder<String> = QpBuilder::new();
    let kappa = b.free_var("kappa".into());
    let mut row = BiAffine::zero();
    row.add_xi_const(0, 1.0);
    let loss = cvar_pieces(&row, beta, kappa, 1);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1.0;
    let amb = AmbiguitySet::new(
        EmpiricalDistribution::new(DMatrix::from_column_slice(values.len(), 1, values)).unwrap(),
        0.0,
        PolytopicSupport::boxed(&[lo], &[hi]).unwrap(),
    )
    .unwrap();
    let block = dro_epigraph(&mut b, |v| format!("{v:?}"), &loss, &amb, 1.0).unwrap();
    b.add_objective(&block.objective, 1.0);
    let (qp, _) = b.build().unwrap();
    let r = qp::solve(&qp, &Settings::default());
    assert!(r.is_optimal());
    r.objective
}
