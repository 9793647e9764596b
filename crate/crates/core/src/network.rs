//! Network cases, the bus admittance matrix, the DC flow map and a
//! Newton-Raphson AC power flow used as a reference oracle.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BusKind {
    Slack,
    Pq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
    pub vmin: f64,
    pub vmax: f64,
    pub shunt: Complex64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    /// Series admittance g + jb.
    pub y: Complex64,
    pub limit: f64,
}

impl Line {
    /// Series reactance Im{1/y}.
    pub fn reactance(&self) -> f64 {
        (1.0 / self.y).im
    }
}

/// Validated network. Bus 0 is the slack; buses 1..=N are PQ buses.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
}

impl NetworkModel {
    pub fn new(base_mva: f64, buses: Vec<Bus>, lines: Vec<Line>) -> Result<Self> {
        let m = NetworkModel {
            base_mva,
            buses,
            lines,
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        if !(self.base_mva > 0.0) {
            return Err(Error::Validation(format!("base_mva must be positive, got {}", self.base_mva)));
        }
        if self.buses.len() < 2 {
            return Err(Error::Validation("a network needs a slack bus and at least one PQ bus".into()));
        }
        let mut seen = vec![false; self.buses.len()];
        for b in &self.buses {
            if b.id >= self.buses.len() {
                return Err(Error::Validation(format!(
                    "bus ids must be contiguous from 0; bus {} out of range",
                    b.id
                )));
            }
            if seen[b.id] {
                return Err(Error::Validation(format!("duplicate bus id {}", b.id)));
            }
            seen[b.id] = true;
            if !(b.vmin < b.vmax) || !b.vmin.is_finite() || !b.vmax.is_finite() {
                return Err(Error::Validation(format!("bus {}: vmin must be below vmax", b.id)));
            }
        }
        let slacks: Vec<usize> = self
            .buses
            .iter()
            .filter(|b| b.kind == BusKind::Slack)
            .map(|b| b.id)
            .collect();
        match slacks.as_slice() {
            [] => return Err(Error::Validation("missing slack bus".into())),
            [0] => {}
            [s] => return Err(Error::Validation(format!("slack bus must be bus 0, found bus {s}"))),
            many => return Err(Error::Validation(format!("multiple slack buses: {many:?}"))),
        }
        for (k, l) in self.lines.iter().enumerate() {
            if l.from >= self.buses.len() || l.to >= self.buses.len() {
                return Err(Error::Validation(format!("line {k} references an unknown bus")));
            }
            if l.from == l.to {
                return Err(Error::Validation(format!("line {k} connects bus {} to itself", l.from)));
            }
            if l.y.norm() == 0.0 || !l.y.re.is_finite() || !l.y.im.is_finite() {
                return Err(Error::Validation(format!("line {k} has zero or non-finite admittance")));
            }
            if !(l.limit > 0.0) {
                return Err(Error::Validation(format!("line {k} has nonpositive flow limit {}", l.limit)));
            }
        }
        Ok(())
    }

    /// Number of PQ buses.
    pub fn n_pq(&self) -> usize {
        self.buses.len() - 1
    }

    pub fn bus(&self, id: usize) -> &Bus {
        self.buses.iter().find(|b| b.id == id).expect("validated bus id")
    }

    fn is_connected(&self) -> bool {
        let n = self.buses.len();
        let mut adj = vec![Vec::new(); n];
        for l in &self.lines {
            adj[l.from].push(l.to);
            adj[l.to].push(l.from);
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen.iter().all(|&s| s)
    }
}

/// Full bus admittance matrix and its partition around the slack bus.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceMatrix {
    pub full: DMatrix<Complex64>,
    pub y00: Complex64,
    /// Column coupling the PQ buses to the slack.
    pub ybar: DVector<Complex64>,
    /// PQ-bus block.
    pub y: DMatrix<Complex64>,
}

pub fn build_admittance(model: &NetworkModel) -> Result<AdmittanceMatrix> {
    if !model.is_connected() {
        return Err(Error::Validation("network graph is disconnected".into()));
    }
    let n = model.buses.len();
    let mut full = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    for l in &model.lines {
        full[(l.from, l.from)] += l.y;
        full[(l.to, l.to)] += l.y;
        full[(l.from, l.to)] -= l.y;
        full[(l.to, l.from)] -= l.y;
    }
    for b in &model.buses {
        full[(b.id, b.id)] += b.shunt;
    }
    Ok(AdmittanceMatrix {
        y00: full[(0, 0)],
        ybar: full.view((1, 0), (n - 1, 1)).column(0).into_owned(),
        y: full.view((1, 1), (n - 1, n - 1)).into_owned(),
        full,
    })
}

/// Active and reactive injections at the PQ buses (generation positive).
#[derive(Debug, Clone, PartialEq)]
pub struct Injections {
    pub p: DVector<f64>,
    pub q: DVector<f64>,
}

impl Injections {
    pub fn zeros(n: usize) -> Self {
        Injections {
            p: DVector::zeros(n),
            q: DVector::zeros(n),
        }
    }

    pub fn complex(&self) -> DVector<Complex64> {
        DVector::from_iterator(
            self.p.len(),
            self.p.iter().zip(self.q.iter()).map(|(&p, &q)| Complex64::new(p, q)),
        )
    }
}

pub const AC_MAX_ITER: usize = 50;
pub const AC_DEFAULT_TOL: f64 = 1e-8;

/// Newton-Raphson power flow in polar coordinates from a flat start with the
/// slack held at `v0`. Returns all bus voltages, slack first.
pub fn ac_power_flow(
    model: &NetworkModel,
    adm: &AdmittanceMatrix,
    inj: &Injections,
    v0: Complex64,
    tol: f64,
) -> Result<DVector<Complex64>> {
    let n = model.n_pq();
    if inj.p.len() != n || inj.q.len() != n {
        return Err(Error::dim("ac_power_flow injections", n, inj.p.len()));
    }
    let ybus = &adm.full;
    let s_spec = inj.complex();
    let mut vm = DVector::from_element(n + 1, 1.0);
    let mut va = DVector::from_element(n + 1, 0.0);
    vm[0] = v0.norm();
    va[0] = v0.arg();
    let voltage = |vm: &DVector<f64>, va: &DVector<f64>| -> DVector<Complex64> {
        DVector::from_iterator(n + 1, vm.iter().zip(va.iter()).map(|(&m, &a)| Complex64::from_polar(m, a)))
    };
    let mut mismatch = f64::INFINITY;
    for it in 0..=AC_MAX_ITER {
        let v = voltage(&vm, &va);
        let ibus = ybus * &v;
        let s = v.component_mul(&ibus.map(|c| c.conj()));
        let f: DVector<f64> = DVector::from_iterator(
            2 * n,
            (1..=n)
                .map(|i| s[i].re - s_spec[i - 1].re)
                .chain((1..=n).map(|i| s[i].im - s_spec[i - 1].im)),
        );
        mismatch = f.amax();
        if !mismatch.is_finite() {
            break;
        }
        if mismatch <= tol {
            return Ok(v);
        }
        if it == AC_MAX_ITER {
            break;
        }
        // dS/dVa = j diag(V) conj(diag(I) − Y diag(V)),
        // dS/dVm = diag(V) conj(Y diag(V/|V|)) + conj(diag(I)) diag(V/|V|).
        let vn = v.map(|c| c / c.norm());
        let mut jac = DMatrix::zeros(2 * n, 2 * n);
        for i in 1..=n {
            for k in 1..=n {
                let yik = ybus[(i, k)];
                let mut d_a = -Complex64::i() * v[i] * (yik * v[k]).conj();
                let mut d_m = v[i] * (yik * vn[k]).conj();
                if i == k {
                    d_a += Complex64::i() * v[i] * ibus[i].conj();
                    d_m += ibus[i].conj() * vn[i];
                }
                jac[(i - 1, k - 1)] = d_a.re;
                jac[(i - 1, n + k - 1)] = d_m.re;
                jac[(n + i - 1, k - 1)] = d_a.im;
                jac[(n + i - 1, n + k - 1)] = d_m.im;
            }
        }
        let Some(dx) = jac.lu().solve(&(-f)) else {
            break;
        };
        for i in 1..=n {
            va[i] += dx[i - 1];
            vm[i] += dx[n + i - 1];
        }
    }
    Err(Error::NonConvergence {
        iterations: AC_MAX_ITER,
        mismatch,
    })
}

/// Power mismatch ‖diag(v)(Y v)* − s‖∞ over the PQ buses.
pub fn power_mismatch(adm: &AdmittanceMatrix, v: &DVector<Complex64>, inj: &Injections) -> f64 {
    let i = &adm.full * v;
    let s = inj.complex();
    (1..v.len())
        .map(|k| (v[k] * i[k].conj() - s[k - 1]).norm())
        .fold(0.0, f64::max)
}

/// DC flow map Γ (2L × N over the PQ buses): rows 0..L give the flow on each
/// line in its declared orientation, rows L..2L the reverse orientation. The
/// slack bus absorbs any injection imbalance.
pub fn dc_flow_map(model: &NetworkModel) -> Result<DMatrix<f64>> {
    if !model.is_connected() {
        return Err(Error::Validation("network graph is disconnected".into()));
    }
    let n = model.n_pq();
    let nl = model.lines.len();
    let mut bred = DMatrix::<f64>::zeros(n, n);
    let mut flow_theta = DMatrix::<f64>::zeros(nl, n);
    for (k, l) in model.lines.iter().enumerate() {
        let x = l.reactance();
        if x == 0.0 || !x.is_finite() {
            return Err(Error::Validation(format!(
                "line {k} ({}-{}) has zero reactance",
                l.from, l.to
            )));
        }
        let b = 1.0 / x;
        for (bus, sign) in [(l.from, 1.0), (l.to, -1.0)] {
            if bus > 0 {
                flow_theta[(k, bus - 1)] += sign * b;
            }
        }
        for (i, j) in [(l.from, l.to), (l.to, l.from)] {
            if i > 0 {
                bred[(i - 1, i - 1)] += b;
                if j > 0 {
                    bred[(i - 1, j - 1)] -= b;
                }
            }
        }
    }
    let binv = bred
        .try_inverse()
        .ok_or_else(|| Error::Singular("reduced DC susceptance matrix".into()))?;
    let fwd = flow_theta * binv;
    let mut gamma = DMatrix::zeros(2 * nl, n);
    gamma.view_mut((0, 0), (nl, n)).copy_from(&fwd);
    gamma.view_mut((nl, 0), (nl, n)).copy_from(&(-&fwd));
    Ok(gamma)
}

#[cfg(test)]
mod tests {
    use super::*;

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
        Line {
            from,
            to,
            y,
            limit: 1.0,
        }
    }

    #[test]
    fn two_bus_admittance() {
        let m = NetworkModel::new(1.0, vec![bus(0), bus(1)], vec![line(0, 1, c(2.0, 0.0))]).unwrap();
        let a = build_admittance(&m).unwrap();
        assert_eq!(a.full[(0, 0)], c(2.0, 0.0));
        assert_eq!(a.full[(0, 1)], c(-2.0, 0.0));
        assert_eq!(a.y[(0, 0)], c(2.0, 0.0));
        let mut b1 = bus(1);
        b1.shunt = c(0.0, 0.1);
        let m = NetworkModel::new(1.0, vec![bus(0), b1], vec![line(0, 1, c(2.0, 0.0))]).unwrap();
        assert_eq!(build_admittance(&m).unwrap().full[(1, 1)], c(2.0, 0.1));
    }

    #[test]
    fn slack_rules() {
        let mut b1 = bus(1);
        b1.kind = BusKind::Slack;
        let err = NetworkModel::new(1.0, vec![bus(0), b1], vec![line(0, 1, c(1.0, -10.0))]).unwrap_err();
        assert!(err.to_string().contains("multiple slack"), "{err}");
        let mut b0 = bus(0);
        b0.kind = BusKind::Pq;
        assert!(NetworkModel::new(1.0, vec![b0, bus(1)], vec![]).is_err());
    }

    #[test]
    fn disconnected_rejected() {
        let m = NetworkModel::new(1.0, vec![bus(0), bus(1), bus(2)], vec![line(0, 1, c(1.0, -10.0))]).unwrap();
        assert!(build_admittance(&m).is_err());
        assert!(dc_flow_map(&m).is_err());
    }

    #[test]
    fn two_bus_dc_flow() {
        let m = NetworkModel::new(1.0, vec![bus(0), bus(1)], vec![line(0, 1, c(0.0, -10.0))]).unwrap();
        let g = dc_flow_map(&m).unwrap();
        // +1 at bus 1 flows toward the slack: negative in the 0→1 orientation.
        assert!((g[(0, 0)] + 1.0).abs() < 1e-12);
        assert!((g[(1, 0)] - 1.0).abs() < 1e-12);
        let m = NetworkModel::new(1.0, vec![bus(0), bus(1)], vec![line(1, 0, c(0.0, -10.0))]).unwrap();
        let g = dc_flow_map(&m).unwrap();
        assert!((g[(0, 0)] - 1.0).abs() < 1e-12 && (g[(1, 0)] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_reactance_rejected() {
        let m = NetworkModel::new(1.0, vec![bus(0), bus(1)], vec![line(0, 1, c(5.0, 0.0))]).unwrap();
        assert!(dc_flow_map(&m).is_err());
    }
}
