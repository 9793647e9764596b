//! Fixed-point linearization of the AC power flow around the no-load voltage.
//!
//! With `v̄` chosen so that `Y v̄ + ȳ V0 = 0`, the first-order deviation is
//! `Δv = Y⁻¹ diag(v̄*)⁻¹ s*`. Writing `Y⁻¹ = Z_R + j Z_I` and `v̄ = |v̄|∠θ`
//! gives `Δv = H p + J q` with `H = M̄ + jN̄`, `J = N̄ − jM̄` and
//! magnitudes `|v| ≈ M p + N q + |v̄|`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::network::AdmittanceMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct VoltageLinearization {
    pub v_bar: DVector<Complex64>,
    pub m: DMatrix<f64>,
    pub n: DMatrix<f64>,
    pub h: DMatrix<Complex64>,
    pub j: DMatrix<Complex64>,
    /// |v̄|
    pub a: DVector<f64>,
}

impl VoltageLinearization {
    pub fn c(&self) -> &DVector<Complex64> {
        &self.v_bar
    }

    /// Rectangular prediction `c + H p + J q`.
    pub fn approx_voltage(&self, p: &DVector<f64>, q: &DVector<f64>) -> DVector<Complex64> {
        let pc = p.map(|v| Complex64::new(v, 0.0));
        let qc = q.map(|v| Complex64::new(v, 0.0));
        &self.v_bar + &self.h * pc + &self.j * qc
    }

    /// Buses where M or N has a nonpositive diagonal entry (unexpected for
    /// radial resistive-inductive feeders).
    pub fn sanity_flags(&self) -> Vec<usize> {
        (0..self.a.len())
            .filter(|&i| !(self.m[(i, i)] > 0.0 && self.n[(i, i)] > 0.0))
            .collect()
    }
}

fn reduced_inverse(adm: &AdmittanceMatrix) -> Result<DMatrix<Complex64>> {
    let inv = adm
        .y
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("reduced admittance matrix".into()))?;
    if inv.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(Error::Singular("reduced admittance matrix".into()));
    }
    Ok(inv)
}

/// No-load voltage `v̄ = −Y⁻¹ ȳ V0`.
pub fn nominal_voltage(adm: &AdmittanceMatrix, v0: Complex64) -> Result<DVector<Complex64>> {
    let inv = reduced_inverse(adm)?;
    Ok(-(inv * &adm.ybar) * v0)
}

pub fn build_sensitivities(adm: &AdmittanceMatrix, v0: Complex64) -> Result<VoltageLinearization> {
    let inv = reduced_inverse(adm)?;
    let v_bar = -(&inv * &adm.ybar) * v0;
    let n = v_bar.len();
    let mag = v_bar.map(|c| c.norm());
    if let Some(i) = mag.iter().position(|&m| !(m > 0.0)) {
        return Err(Error::Singular(format!("zero nominal voltage at PQ bus {}", i + 1)));
    }
    let zr = inv.map(|c| c.re);
    let zi = inv.map(|c| c.im);
    let cos = DVector::from_fn(n, |i, _| v_bar[i].arg().cos() / mag[i]);
    let sin = DVector::from_fn(n, |i, _| v_bar[i].arg().sin() / mag[i]);
    let dc = DMatrix::from_diagonal(&cos);
    let ds = DMatrix::from_diagonal(&sin);
    let m_bar = &zr * &dc - &zi * &ds;
    let n_bar = &zi * &dc + &zr * &ds;
    let h = DMatrix::from_fn(n, n, |i, j| Complex64::new(m_bar[(i, j)], n_bar[(i, j)]));
    let j = DMatrix::from_fn(n, n, |i, k| Complex64::new(n_bar[(i, k)], -m_bar[(i, k)]));
    Ok(VoltageLinearization {
        v_bar,
        m: m_bar,
        n: n_bar,
        h,
        j,
        a: mag,
    })
}

/// `M p + N q + a`.
pub fn approx_voltage_magnitude(lin: &VoltageLinearization, p: &DVector<f64>, q: &DVector<f64>) -> Result<DVector<f64>> {
    let n = lin.a.len();
    if p.len() != n || q.len() != n {
        return Err(Error::dim("approx_voltage_magnitude", n, p.len().min(q.len())));
    }
    Ok(&lin.m * p + &lin.n * q + &lin.a)
}

/// Writes M, N and a as CSV: a header of bus ids then one row per bus with
/// the M row, the N row and a.
pub fn write_csv<W: Write>(lin: &VoltageLinearization, w: W) -> Result<()> {
    let n = lin.a.len();
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["bus".to_string()];
    header.extend((1..=n).map(|i| format!("M_{i}")));
    header.extend((1..=n).map(|i| format!("N_{i}")));
    header.push("a".into());
    out.write_record(&header).map_err(csv_err)?;
    for i in 0..n {
        let mut rec = vec![(i + 1).to_string()];
        rec.extend((0..n).map(|k| lin.m[(i, k)].to_string()));
        rec.extend((0..n).map(|k| lin.n[(i, k)].to_string()));
        rec.push(lin.a[i].to_string());
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
