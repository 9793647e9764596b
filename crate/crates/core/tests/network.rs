mod common;

use common::*;
use dro_opf::case::parse_case_str;
use dro_opf::network::*;
use dro_opf::Error;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::Rng;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn bus(id: usize) -> Bus {
    Bus {
        id,
        kind: if id == 0 { BusKind::Slack } else { BusKind::Pq },
        vmin: 0.9,
        vmax: 1.1,
        shunt: c(0.0, 0.0),
    }
}

fn line(from: usize, to: usize, y: Complex64) -> Line {
    Line { from, to, y, limit: 1.0 }
}

#[test]
fn single_line_reduced_admittance() {
    let m = NetworkModel::new(1.0, vec![bus(0), bus(1)], vec![line(0, 1, c(1.0, -10.0))]).unwrap();
    assert_eq!(m.n_pq(), 1);
    let a = build_admittance(&m).unwrap();
    assert_eq!(a.y, DMatrix::from_element(1, 1, c(1.0, -10.0)));
    assert_eq!(a.ybar[0], c(-1.0, 10.0));
}

#[test]
fn feeder_admittance_matches_hand_built() {
    let case = feeder();
    let a = build_admittance(&case.network).unwrap();
    let y = c(10.0, -20.0);
    let z = c(0.0, 0.0);
    #[rustfmt::skip]
    let want = DMatrix::from_row_slice(4, 4, &[
        y,  -y, z, z,
        -y, y + y, -y, z,
        z, -y, y + y, -y,
        z, z, -y, y,
    ]);
    assert_eq!(a.full, want);
    assert_eq!(a.y00, y);
    assert_eq!(a.y, want.view((1, 1), (3, 3)).into_owned());
}

#[test]
fn two_slack_case_rejected() {
    let text = r#"{"buses": [{"id": 0, "kind": "slack"}, {"id": 1, "kind": "slack"}],
                   "lines": [{"from": 0, "to": 1, "g": 1.0, "b": -10.0}], "devices": []}"#;
    assert!(matches!(parse_case_str(text, "inline"), Err(Error::Validation(_)) | Err(Error::Parse { .. })));
}

#[test]
fn zero_injection_flow_is_the_no_load_voltage() {
    let case = feeder();
    let a = build_admittance(&case.network).unwrap();
    let v0 = c(1.02, 0.0);
    let v = ac_power_flow(&case.network, &a, &Injections::zeros(3), v0, 1e-12).unwrap();
    let inv = a.y.clone().try_inverse().unwrap();
    let nominal = -(inv * &a.ybar) * v0;
    for k in 0..3 {
        assert!((v[k + 1] - nominal[k]).norm() < 1e-12);
    }
}

#[test]
fn loaded_feeder_satisfies_power_balance() {
    let case = feeder();
    let a = build_admittance(&case.network).unwrap();
    let inj = Injections {
        p: DVector::from_element(3, -0.1),
        q: DVector::from_element(3, -0.03),
    };
    let v = ac_power_flow(&case.network, &a, &inj, c(1.0, 0.0), 1e-10).unwrap();
    assert!(power_mismatch(&a, &v, &inj) <= 1e-8);
    // independent residual of diag(v)(Y v)* = s
    let i = &a.full * &v;
    for k in 1..4 {
        let s = v[k] * i[k].conj();
        assert!((s - c(-0.1, -0.03)).norm() <= 1e-8);
    }
    assert!(v.iter().skip(1).all(|x| x.norm() < 1.0));
}

#[test]
fn absurd_load_does_not_converge() {
    let case = feeder();
    let a = build_admittance(&case.network).unwrap();
    let inj = Injections {
        p: DVector::from_element(3, -100.0),
        q: DVector::zeros(3),
    };
    assert!(matches!(
        ac_power_flow(&case.network, &a, &inj, c(1.0, 0.0), 1e-8),
        Err(Error::NonConvergence { .. })
    ));
}

#[test]
fn triangle_splits_two_thirds_one_third() {
    let case = triangle();
    let g = dc_flow_map(&case.network).unwrap();
    // lines: 0-1, 1-2, 0-2 with equal reactance; +1 at bus 1, −1 at bus 2
    let p = DVector::from_row_slice(&[1.0, -1.0]);
    let f = &g * &p;
    let want = [-1.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0];
    for l in 0..3 {
        assert!((f[l] - want[l]).abs() < 1e-12, "{f}");
        assert!((f[l + 3] + want[l]).abs() < 1e-12);
    }
    let zero = &g * DVector::zeros(2);
    assert!(zero.iter().all(|v| *v == 0.0));
}

/// Connected network on `n` buses: a random spanning tree plus extra lines.
fn random_network(seed: u64, n: usize) -> NetworkModel {
    let mut r = rng(seed);
    let mut lines = Vec::new();
    for b in 1..n {
        let to = r.random_range(0..b);
        lines.push(line(to, b, c(0.0, -r.random_range(2.0..30.0))));
    }
    for _ in 0..r.random_range(0..n) {
        let a = r.random_range(0..n);
        let b = r.random_range(0..n);
        if a != b {
            lines.push(line(a, b, c(r.random_range(0.0..2.0), -r.random_range(2.0..30.0))));
        }
    }
    NetworkModel::new(1.0, (0..n).map(bus).collect(), lines).unwrap()
}

proptest! {
    #[test]
    fn dc_flows_satisfy_kcl(seed in 0u64..5_000, n in 2usize..8) {
        let net = random_network(seed, n);
        let g = dc_flow_map(&net).unwrap();
        let nl = net.lines.len();
        let mut r = rng(seed ^ 0xabc);
        let p = DVector::from_fn(n - 1, |_, _| r.random_range(-1.0..1.0));
        let f = &g * &p;
        let mut net_out = vec![0.0; n];
        for (k, l) in net.lines.iter().enumerate() {
            net_out[l.from] += f[k];
            net_out[l.to] -= f[k];
            prop_assert!((f[k] + f[k + nl]).abs() < 1e-12);
        }
        for b in 1..n {
            prop_assert!((net_out[b] - p[b - 1]).abs() < 1e-9, "bus {b}");
        }
        // the slack absorbs the total
        prop_assert!((net_out[0] + p.sum()).abs() < 1e-9);
    }

    #[test]
    fn dc_flows_match_angle_differences(seed in 0u64..5_000, n in 2usize..7) {
        let net = random_network(seed, n);
        let g = dc_flow_map(&net).unwrap();
        let mut r = rng(seed);
        let p = DVector::from_fn(n - 1, |_, _| r.random_range(-1.0..1.0));
        // solve B θ = p directly with the slack angle fixed at zero
        let mut b = DMatrix::<f64>::zeros(n, n);
        for l in &net.lines {
            let s = 1.0 / l.reactance();
            b[(l.from, l.from)] += s;
            b[(l.to, l.to)] += s;
            b[(l.from, l.to)] -= s;
            b[(l.to, l.from)] -= s;
        }
        let red = b.view((1, 1), (n - 1, n - 1)).into_owned();
        let theta = red.lu().solve(&p).unwrap();
        let ang = |i: usize| if i == 0 { 0.0 } else { theta[i - 1] };
        let f = &g * &p;
        for (k, l) in net.lines.iter().enumerate() {
            let want = (ang(l.from) - ang(l.to)) / l.reactance();
            prop_assert!((f[k] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn ac_solution_residual_small(seed in 0u64..2_000) {
        let case = feeder();
        let a = build_admittance(&case.network).unwrap();
        let mut r = rng(seed);
        let inj = Injections {
            p: DVector::from_fn(3, |_, _| r.random_range(-0.3..0.3)),
            q: DVector::from_fn(3, |_, _| r.random_range(-0.1..0.1)),
        };
        let v = ac_power_flow(&case.network, &a, &inj, c(1.0, 0.0), 1e-10).unwrap();
        prop_assert!(power_mismatch(&a, &v, &inj) <= 1e-8);
        prop_assert_eq!(v[0], c(1.0, 0.0));
    }
}
