//! JSON case files.
//!
//! ```json
//! {
//!   "base_mva": 10.0,
//!   "buses":   [{"id": 0, "kind": "slack", "vmin": 0.95, "vmax": 1.05, "shunt": {"g": 0, "b": 0}}],
//!   "lines":   [{"from": 0, "to": 1, "g": 1.0, "b": -10.0, "limit": 2.0}],
//!   "devices": [{"id": 0, "bus": 1, "kind": "generator",
//!                "params": {"pmin": 0, "pmax": 1, "ramp": 0.2, "p0": 0.3},
//!                "cost": {"fx": [1.0], "hx": [[0.5]]}}]
//! }
//! ```
//!
//! Device kinds and their `params`:
//!
//! | kind             | keys                                                              |
//! |------------------|-------------------------------------------------------------------|
//! | `generator`      | `pmin`, `pmax`, `ramp`?, `p0`?                                    |
//! | `storage`        | `pmin`, `pmax`, `emin`, `emax`, `soc0`, `eta`? (1), `dt`? (1), `p0`? |
//! | `curtailable_res`| `forecast` (number or list), `xi`, `qmax`? (0)                    |
//! | `fixed_load`     | `demand` (number or list), `q_ratio`? (0), `xi`?                   |
//!
//! The optional `cost` block holds `fx`, `hx`, `fu`, `hu` for the stage cost
//! `fxᵀx + ½xᵀHx x + fuᵀu + ½uᵀHu u`; omitted entries are zero.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::devices::{DeviceModel, GeneratorParams, LoadParams, ResParams, StorageParams, Template};
use crate::error::{Error, Result};
use crate::network::{Bus, BusKind, Line, NetworkModel};
use crate::opf::{CostSpec, DeviceCost};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseFile {
    base_mva: f64,
    buses: Vec<BusRecord>,
    lines: Vec<LineRecord>,
    #[serde(default)]
    devices: Vec<DeviceRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BusRecord {
    id: usize,
    kind: BusKind,
    vmin: f64,
    vmax: f64,
    #[serde(default)]
    shunt: Shunt,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Shunt {
    g: f64,
    b: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LineRecord {
    from: usize,
    to: usize,
    g: f64,
    b: f64,
    limit: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DeviceRecord {
    id: usize,
    bus: usize,
    kind: String,
    params: serde_json::Value,
    #[serde(default)]
    cost: Option<CostRecord>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CostRecord {
    #[serde(default)]
    fx: Vec<f64>,
    #[serde(default)]
    hx: Vec<Vec<f64>>,
    #[serde(default)]
    fu: Vec<f64>,
    #[serde(default)]
    hu: Vec<Vec<f64>>,
}

/// A parsed case: network, devices sorted by id, and their costs.
#[derive(Debug, Clone)]
pub struct Case {
    pub network: NetworkModel,
    pub devices: Vec<DeviceModel>,
    pub costs: CostSpec,
}

pub fn load_case(path: &Path) -> Result<Case> {
    let text = std::fs::read_to_string(path)?;
    parse_case_str(&text, &path.display().to_string())
}

/// Reads only the network part of a case file.
pub fn parse_case(path: &Path) -> Result<NetworkModel> {
    Ok(load_case(path)?.network)
}

pub fn parse_case_str(text: &str, origin: &str) -> Result<Case> {
    let file: CaseFile = serde_json::from_str(text)
        .map_err(|e| Error::parse(format!("{origin}:{}:{}", e.line(), e.column()), e.to_string()))?;
    let buses = file
        .buses
        .iter()
        .map(|b| Bus {
            id: b.id,
            kind: b.kind,
            vmin: b.vmin,
            vmax: b.vmax,
            shunt: Complex64::new(b.shunt.g, b.shunt.b),
        })
        .collect::<Vec<_>>();
    let mut buses = buses;
    buses.sort_by_key(|b| b.id);
    let lines = file
        .lines
        .iter()
        .map(|l| Line {
            from: l.from,
            to: l.to,
            y: Complex64::new(l.g, l.b),
            limit: l.limit,
        })
        .collect();
    let network = NetworkModel::new(file.base_mva, buses, lines)?;

    let mut devices = Vec::new();
    let mut costs = CostSpec::default();
    for (k, rec) in file.devices.iter().enumerate() {
        let loc = format!("{origin}: devices[{k}] (id {})", rec.id);
        if rec.bus >= network.buses.len() {
            return Err(Error::Validation(format!(
                "{loc}: bus {} is not a bus of the network",
                rec.bus
            )));
        }
        let params = |v: &serde_json::Value| v.clone();
        let bad = |e: serde_json::Error| Error::parse(format!("{loc}.params"), e.to_string());
        let template = match rec.kind.as_str() {
            "generator" => Template::Generator(serde_json::from_value::<GeneratorParams>(params(&rec.params)).map_err(bad)?),
            "storage" => Template::Storage(serde_json::from_value::<StorageParams>(params(&rec.params)).map_err(bad)?),
            "curtailable_res" => Template::CurtailableRes(serde_json::from_value::<ResParams>(params(&rec.params)).map_err(bad)?),
            "fixed_load" => Template::FixedLoad(serde_json::from_value::<LoadParams>(params(&rec.params)).map_err(bad)?),
            other => {
                return Err(Error::parse(
                    loc,
                    format!("unknown device kind '{other}' (expected generator, storage, curtailable_res or fixed_load)"),
                ))
            }
        };
        let dev = DeviceModel::new(rec.id, rec.bus, template)?;
        if devices.iter().any(|d: &DeviceModel| d.id == rec.id) {
            return Err(Error::Validation(format!("duplicate device id {}", rec.id)));
        }
        let cost = match &rec.cost {
            None => DeviceCost::zero(dev.n_state(), dev.n_input()),
            Some(c) => cost_from_record(c, dev.n_state(), dev.n_input()).map_err(|m| Error::Validation(format!("{loc}: {m}")))?,
        };
        costs.insert(dev.id, cost)?;
        devices.push(dev);
    }
    devices.sort_by_key(|d| d.id);
    Ok(Case {
        network,
        devices,
        costs,
    })
}

fn cost_from_record(c: &CostRecord, n: usize, m: usize) -> std::result::Result<DeviceCost, String> {
    let vec = |v: &[f64], len: usize, name: &str| -> std::result::Result<DVector<f64>, String> {
        match v.len() {
            0 => Ok(DVector::zeros(len)),
            l if l == len => Ok(DVector::from_column_slice(v)),
            l => Err(format!("cost.{name} has {l} entries, expected {len}")),
        }
    };
    let mat = |v: &[Vec<f64>], len: usize, name: &str| -> std::result::Result<DMatrix<f64>, String> {
        if v.is_empty() {
            return Ok(DMatrix::zeros(len, len));
        }
        if v.len() != len || v.iter().any(|r| r.len() != len) {
            return Err(format!("cost.{name} must be {len}x{len}"));
        }
        Ok(DMatrix::from_fn(len, len, |i, j| v[i][j]))
    };
    DeviceCost::new(vec(&c.fx, n, "fx")?, mat(&c.hx, n, "hx")?, vec(&c.fu, m, "fu")?, mat(&c.hu, m, "hu")?)
        .map_err(|e| e.to_string())
}
