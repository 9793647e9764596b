mod common;

use common::oracles::*;
use common::*;
use dro_opf::case::Case;
use dro_opf::dataset::ForecastErrorDataset;
use dro_opf::devices::{apply_policy, check_causality, realized_injection, DeviceModel, GeneratorParams, LoadParams, Profile, Template};
use dro_opf::network::{dc_flow_map, Bus, BusKind, Line, NetworkModel};
use dro_opf::opf::*;
use dro_opf::qp::{self, Settings};
use dro_opf::Error;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;

#[test]
fn distribution_reduces_to_saa_at_zero_radius() {
    let case = feeder();
    for (rho, seed) in [(0.0, 1), (10.0, 2), (100.0, 3)] {
        let ds = feeder_data(10, 2, seed);
        let (_, s) = distribution(&case, &ds, 0.0, rho, 2, 3);
        let saa = saa_distribution(&case, &ds, rho, 2, 3);
        assert!(rel_diff(s.objective, saa) < 1e-6, "rho {rho}: {} vs {saa}", s.objective);
    }
}

#[test]
fn transmission_reduces_to_saa_at_zero_radius() {
    let case = triangle();
    for (rho, seed) in [(0.0, 1), (1.0, 2), (20.0, 3)] {
        let ds = triangle_data(8, 3, seed);
        let (_, s) = transmission(&case, &ds, 0.0, rho, 3);
        let saa = saa_transmission(&case, &ds, rho, 3);
        assert!(rel_diff(s.objective, saa) < 1e-6, "rho {rho}: {} vs {saa}", s.objective);
    }
}

#[test]
fn objective_nondecreasing_in_radius() {
    let grid = [0.0, 0.005, 0.02, 0.05, 0.2];
    let case = feeder();
    let ds = feeder_data(10, 2, 4);
    let obj: Vec<f64> = grid.iter().map(|&e| distribution(&case, &ds, e, 100.0, 2, 3).1.objective).collect();
    assert_nondecreasing(&obj, "distribution objective");
    let case = triangle();
    let ds = triangle_data(10, 2, 4);
    let obj: Vec<f64> = grid.iter().map(|&e| transmission(&case, &ds, e, 5.0, 2).1.objective).collect();
    assert_nondecreasing(&obj, "transmission objective");
}

#[test]
fn rho_sweep_trades_cost_for_risk() {
    let rhos = [0.0, 0.5, 5.0, 50.0, 500.0];
    let case = feeder();
    let ds = feeder_data(10, 2, 5);
    let l = lin(&case);
    let unit = assemble_distribution(&inputs(&case, &ds, &[0.01], 1.0, 2, 3), &l).unwrap();
    let (mut cost, mut risk) = (Vec::new(), Vec::new());
    for &rho in &rhos {
        let (_, s) = distribution(&case, &ds, 0.01, rho, 2, 3);
        cost.push(s.cost_term);
        risk.push(-risk_of(&unit, &s));
    }
    assert_nondecreasing(&cost, "distribution cost");
    assert_nondecreasing(&risk, "negated distribution risk");
    assert!(cost[4] > cost[0] + 1e-3, "sweep never curtailed: {cost:?}");

    let case = triangle();
    let ds = triangle_data(10, 2, 5);
    let unit = assemble_transmission(&inputs(&case, &ds, &[0.01], 1.0, 2, 0)).unwrap();
    let (mut cost, mut risk) = (Vec::new(), Vec::new());
    for &rho in &rhos {
        let (_, s) = transmission(&case, &ds, 0.01, rho, 2);
        cost.push(s.cost_term);
        risk.push(-risk_of(&unit, &s));
    }
    assert_nondecreasing(&cost, "transmission cost");
    assert_nondecreasing(&risk, "negated transmission risk");
}

#[test]
fn zero_rho_matches_cost_only_optimum() {
    let case = triangle();
    let ds = triangle_data(8, 2, 6);
    let (_, s) = transmission(&case, &ds, 0.05, 0.0, 2);
    let base = saa_transmission(&case, &ds, 0.0, 2);
    assert!(rel_diff(s.cost_term, base) < 1e-6);
    assert!(s.risk_term.abs() < 1e-7);
}

#[test]
fn zero_error_data_gives_deterministic_plan() {
    let case = feeder();
    let zero = ForecastErrorDataset::new(DMatrix::zeros(4, 4), 2, None).unwrap();
    let (p, s) = distribution(&case, &zero, 0.0, 10.0, 2, 0);
    for pol in s.policies.values() {
        for v in pol.e.iter() {
            assert!(v.abs() < 1e-7);
        }
    }
    // upper and lower rows of a bus add up to βρ(vmin − vmax) for a point mass
    let rows = p.risk_rows.len() as f64 / 2.0;
    assert!((s.risk_term - 10.0 * BETA * rows * (0.95 - 1.05)).abs() < 1e-7);
}

#[test]
fn risk_shares_account_for_the_objective() {
    let case = triangle();
    let ds = triangle_data(10, 2, 7);
    let (p, s) = transmission(&case, &ds, 0.03, 3.0, 2);
    assert!((s.objective - s.cost_term - s.risk.iter().map(|r| r.share).sum::<f64>()).abs() < 1e-8);
    assert!((s.objective - s.cost_term - s.risk_term).abs() < 1e-8);
    assert_eq!(s.risk.len(), 2 * 3 * 2);
    for r in &p.risk_rows {
        assert!(matches!(r.kind, RowKind::LineFlow { .. }));
        // causal reserves carry earlier errors into later flows
        assert_eq!(r.xi_stages.last(), Some(&r.stage));
        assert!(r.xi_stages.iter().all(|&j| j <= r.stage));
    }
    let case = feeder();
    let ds = feeder_data(10, 2, 7);
    let (_, s) = distribution(&case, &ds, 0.03, 3.0, 2, 3);
    assert!((s.objective - s.cost_term - s.risk_term).abs() < 1e-8);
}

#[test]
fn decoded_policies_are_causal_and_balanced() {
    let case = triangle();
    let h = 3;
    let ds = triangle_data(12, h, 8);
    let (p, s) = transmission(&case, &ds, 0.02, 2.0, h);
    for (id, pol) in &s.policies {
        let dev = case.devices.iter().find(|d| d.id == *id).unwrap();
        assert!(check_causality(&pol.d, dev.n_input(), 2, h));
    }
    for k in p.layout.keys() {
        if let VarItem::Gain { xi, .. } = k.item {
            assert!(xi < (k.stage + 1) * 2);
        }
    }
    // symbolic: every ξ coefficient of the total injection vanishes
    for (j, bal) in p.balance.iter().enumerate() {
        assert!(bal.b.eval(&s.y).abs() < 1e-9, "stage {j} nominal");
        for (k, e) in &bal.a {
            assert!(e.eval(&s.y).abs() < 1e-9, "stage {j} column {k}");
        }
    }
    // Monte Carlo over the support box
    let lo: Vec<f64> = ds.supports.iter().flat_map(|s| s.lower().to_vec()).collect();
    let hi: Vec<f64> = ds.supports.iter().flat_map(|s| s.upper().to_vec()).collect();
    let mut r = rng(3);
    for _ in 0..200 {
        let xi = DVector::from_fn(2 * h, |c, _| r.random_range(lo[c]..=hi[c]));
        let worst = balance_residual(&case.devices, &s, &xi, h);
        assert!(worst <= 1e-8, "{worst}");
    }
}

fn two_bus() -> Case {
    let bus = |id, kind| Bus {
        id,
        kind,
        vmin: 0.9,
        vmax: 1.1,
        shunt: Complex64::new(0.0, 0.0),
    };
    let network = NetworkModel::new(
        1.0,
        vec![bus(0, BusKind::Slack), bus(1, BusKind::Pq)],
        vec![Line {
            from: 0,
            to: 1,
            y: Complex64::new(0.0, -10.0),
            limit: 2.0,
        }],
    )
    .unwrap();
    let gen = DeviceModel::new(
        0,
        0,
        Template::Generator(GeneratorParams {
            pmin: 0.0,
            pmax: 3.0,
            ramp: None,
            p0: 0.0,
        }),
    )
    .unwrap();
    let load = DeviceModel::new(
        1,
        1,
        Template::FixedLoad(LoadParams {
            demand: Profile::Series(vec![0.7, 0.9, 0.8]),
            q_ratio: 0.0,
            xi: Some(0),
        }),
    )
    .unwrap();
    let mut costs = CostSpec::default();
    costs
        .insert(0, DeviceCost::new(DVector::from_element(1, 1.0), DMatrix::from_element(1, 1, 0.2), DVector::zeros(1), DMatrix::zeros(1, 1)).unwrap())
        .unwrap();
    Case {
        network,
        devices: vec![gen, load],
        costs,
    }
}

#[test]
fn single_generator_policy_is_forced_by_balance() {
    let case = two_bus();
    let ds = ForecastErrorDataset::new(
        DMatrix::from_fn(6, 3, |i, j| 0.05 * ((i * 3 + j) as f64).sin()),
        1,
        None,
    )
    .unwrap();
    let (_, s) = transmission(&case, &ds, 0.01, 1.0, 3);
    let pol = &s.policies[&0];
    // load injection is −(d + ξ): G = −I, so D = I and e = d
    for j in 0..3 {
        for c in 0..3 {
            let want = if c == j { 1.0 } else { 0.0 };
            assert!((pol.d[(j, c)] - want).abs() < 1e-9);
        }
        assert!((pol.e[j] - [0.7, 0.9, 0.8][j]).abs() < 1e-9);
    }
}

#[test]
fn line_rows_match_flow_map_coefficients() {
    let case = triangle();
    let h = 2;
    let ds = triangle_data(10, h, 9);
    let (p, s) = transmission(&case, &ds, 0.02, 2.0, h);
    let gamma = dc_flow_map(&case.network).unwrap();
    let nl = case.network.lines.len();
    let flow = |xi: &DVector<f64>, j: usize, o: usize| -> f64 {
        let mut inj = vec![0.0; case.network.buses.len()];
        for d in &case.devices {
            let xj: Vec<f64> = xi.rows(j * 2, 2).iter().copied().collect();
            let (x, u) = match s.policies.get(&d.id) {
                Some(pol) => {
                    let x = apply_policy(d, pol, xi).unwrap();
                    let u = &pol.d * xi + &pol.e;
                    let (n, m) = (d.n_state(), d.n_input());
                    (x.rows(j * n, n).into_owned(), u.rows(j * m, m).into_owned())
                }
                None => (DVector::zeros(0), DVector::zeros(0)),
            };
            inj[d.bus] += realized_injection(d, j, &x, &u, &xj).0;
        }
        (1..inj.len()).map(|b| gamma[(o, b - 1)] * inj[b]).sum()
    };
    for r in &p.risk_rows {
        let RowKind::LineFlow { line, reverse } = r.kind else { panic!() };
        let o = if reverse { line + nl } else { line };
        let zero = DVector::zeros(2 * h);
        let b = flow(&zero, r.stage, o) - case.network.lines[line].limit;
        assert!((r.row.b.eval(&s.y) - b).abs() < 1e-9);
        for c in 0..2 * h {
            let mut e = zero.clone();
            e[c] = 1.0;
            let a = flow(&e, r.stage, o) - flow(&zero, r.stage, o);
            let got = r.row.a.get(&c).map_or(0.0, |e| e.eval(&s.y));
            assert!((got - a).abs() < 1e-9, "row {} column {c}: {got} vs {a}", r.id);
        }
    }
}

#[test]
fn tightened_line_carries_the_largest_risk() {
    let mut case = triangle();
    case.network.lines[1].limit = 0.05;
    let ds = triangle_data(10, 1, 10);
    let (_, s) = transmission(&case, &ds, 0.02, 50.0, 1);
    let top = s
        .risk
        .iter()
        .max_by(|a, b| a.share.total_cmp(&b.share))
        .unwrap();
    assert!(matches!(top.kind, RowKind::LineFlow { line: 1, .. }), "{top:?}");
    assert!(top.lambda > 0.0);
}

#[test]
fn assembly_is_reproducible_and_ordered() {
    let case = triangle();
    let ds = triangle_data(6, 2, 11);
    let a = assemble_transmission(&inputs(&case, &ds, &[0.01], 1.0, 2, 0)).unwrap();
    let b = assemble_transmission(&inputs(&case, &ds, &[0.01], 1.0, 2, 0)).unwrap();
    assert_eq!(a.qp, b.qp);
    assert_eq!(a.layout, b.layout);
    let keys = a.layout.keys();
    assert!(keys.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(keys.len(), a.qp.n);
    for (i, k) in keys.iter().enumerate() {
        assert_eq!(a.layout.get(k), Some(i));
    }
    let dir = tempfile::tempdir().unwrap();
    a.write_archive(dir.path()).unwrap();
    let back = qp::dump::load(&dir.path().join("problem.qp")).unwrap();
    assert_eq!(back, a.qp);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("layout.json")).unwrap()).unwrap();
    assert_eq!(manifest["n"], a.qp.n);
}

#[test]
fn per_stage_radius_schedule() {
    let case = feeder();
    let ds = feeder_data(8, 2, 12);
    let l = lin(&case);
    let p = assemble_distribution(&inputs(&case, &ds, &[0.0, 0.3], 10.0, 2, 3), &l).unwrap();
    for r in &p.risk_rows {
        assert_eq!(r.radius, [0.0, 0.3][r.stage]);
    }
    assert!(assemble_distribution(&inputs(&case, &ds, &[0.0, 0.1, 0.2, 0.3], 1.0, 3, 3), &l).is_err());
    assert!(assemble_distribution(&inputs(&case, &ds, &[0.1, 0.2, 0.3], 1.0, 3, 3), &l).is_err());
}

#[test]
fn invalid_inputs_rejected() {
    let case = feeder();
    let ds = feeder_data(8, 2, 12);
    let l = lin(&case);
    assert!(assemble_distribution(&inputs(&case, &ds, &[-0.1], 1.0, 2, 0), &l).is_err());
    assert!(assemble_distribution(&inputs(&case, &ds, &[0.1], 1.0, 0, 0), &l).is_err());
    let mut slack = case.clone();
    slack.devices[0].bus = 0;
    assert!(assemble_distribution(&inputs(&slack, &ds, &[0.1], 1.0, 2, 0), &l).is_err());
    // loads only: nothing can balance the uncertain injections
    let mut tri = triangle();
    tri.devices.retain(|d| !d.is_dispatchable());
    let ds = triangle_data(4, 1, 1);
    assert!(matches!(
        assemble_transmission(&inputs(&tri, &ds, &[0.0], 1.0, 1, 0)),
        Err(Error::Validation(_))
    ));
}

#[test]
fn infeasible_dispatch_reports_certificate() {
    let mut case = triangle();
    for d in &mut case.devices {
        if let Template::FixedLoad(l) = &mut d.template {
            l.demand = Profile::Constant(5.0);
        }
    }
    let ds = triangle_data(4, 1, 1);
    let p = assemble_transmission(&inputs(&case, &ds, &[0.0], 1.0, 1, 0)).unwrap();
    let r = p.solve(&Settings::default());
    assert_eq!(r.status, qp::SolveStatus::PrimalInfeasible);
    match decode_solution(&r, &p) {
        Err(Error::Solver { status, certificate }) => {
            assert_eq!(status, qp::SolveStatus::PrimalInfeasible);
            assert!(!certificate.is_empty());
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn device_rows_can_join_the_risk_set() {
    let case = triangle();
    let ds = triangle_data(6, 2, 13);
    let mut inp = inputs(&case, &ds, &[0.01], 1.0, 2, 0);
    inp.options.device_rows_in_risk_set = true;
    let p = assemble_transmission(&inp).unwrap();
    let n_dev = p.risk_rows.iter().filter(|r| matches!(r.kind, RowKind::Device { .. })).count();
    // two generators, capacity and ramp rows in both directions, two stages
    assert_eq!(n_dev, 2 * 4 * 2);
    let s = solve(&p);
    assert!((s.objective - s.cost_term - s.risk_term).abs() < 1e-8);
}
