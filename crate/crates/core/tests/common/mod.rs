#![allow(dead_code)]

pub mod oracles;

use dro_opf::qp::QuadraticProgram;
use dro_opf::sparse::CscMatrix;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random feasible, bounded QP with at most `max_ineq` inequality rows
/// (bounds included). Strictly convex unless `n` is small, in which case a
/// rank-deficient Hessian is paired with a full box.
pub fn random_qp(seed: u64, n_max: usize, max_ineq: usize) -> QuadraticProgram {
    let mut r = rng(seed);
    let n = r.random_range(2..=n_max);
    let boxed = n * 2 <= max_ineq && r.random_bool(0.5);
    let rank = if boxed { r.random_range(0..=n) } else { n };
    let mut l = DMatrix::<f64>::zeros(n, rank.max(1));
    for v in l.iter_mut() {
        *v = r.random_range(-1.0..1.0);
    }
    let mut p = if rank == 0 { DMatrix::zeros(n, n) } else { &l * l.transpose() };
    if !boxed {
        for i in 0..n {
            p[(i, i)] += 0.1;
        }
    }
    let y0: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let m_eq = r.random_range(0..=n / 3);
    let dense_row = |r: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n)
            .map(|_| if r.random_bool(0.6) { r.random_range(-2.0..2.0) } else { 0.0 })
            .collect()
    };
    let mut teq = Vec::new();
    let mut beq = Vec::new();
    for i in 0..m_eq {
        let row = dense_row(&mut r);
        beq.push(row.iter().zip(&y0).map(|(a, b)| a * b).sum());
        teq.extend(row.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(j, v)| (i, j, *v)));
    }
    let (lb, ub) = if boxed {
        (
            y0.iter().map(|v| v - r.random_range(0.0..1.0)).collect(),
            y0.iter().map(|v| v + r.random_range(0.0..1.0)).collect(),
        )
    } else {
        (vec![f64::NEG_INFINITY; n], vec![f64::INFINITY; n])
    };
    let used = if boxed { 2 * n } else { 0 };
    let m_in = r.random_range(0..=(max_ineq - used).min(10));
    let mut tin = Vec::new();
    let mut bin = Vec::new();
    for i in 0..m_in {
        let row = dense_row(&mut r);
        let slack = if r.random_bool(0.3) { 0.0 } else { r.random_range(0.0..1.0) };
        bin.push(row.iter().zip(&y0).map(|(a, b)| a * b).sum::<f64>() + slack);
        tin.extend(row.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(j, v)| (i, j, *v)));
    }
    let c: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
    QuadraticProgram::new(
        CscMatrix::from_dense(&p),
        c,
        r.random_range(-1.0..1.0),
        CscMatrix::from_triplets(m_eq, n, &teq),
        beq,
        CscMatrix::from_triplets(m_in, n, &tin),
        bin,
        lb,
        ub,
    )
    .expect("generated QP is valid")
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

pub fn fixture(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn feeder() -> dro_opf::case::Case {
    dro_opf::case::load_case(&fixture("feeder4.json")).unwrap()
}

pub fn triangle() -> dro_opf::case::Case {
    dro_opf::case::load_case(&fixture("triangle3.json")).unwrap()
}

/// Two PV error components, Gaussian, widening with lead time.
pub fn feeder_data(n: usize, stages: usize, seed: u64) -> dro_opf::dataset::ForecastErrorDataset {
    use dro_opf::scenario::{ErrorModel, ScenarioGenerator};
    ScenarioGenerator::new(ErrorModel::Gaussian {
        mean: vec![0.0, 0.0],
        std: vec![0.05, 0.08],
    })
    .with_growth(0.3)
    .dataset(n, stages, seed)
    .unwrap()
}

/// Wind and load error components.
pub fn triangle_data(n: usize, stages: usize, seed: u64) -> dro_opf::dataset::ForecastErrorDataset {
    use dro_opf::scenario::{ErrorModel, ScenarioGenerator};
    ScenarioGenerator::new(ErrorModel::Gaussian {
        mean: vec![0.0, 0.0],
        std: vec![0.1, 0.05],
    })
    .with_growth(0.3)
    .dataset(n, stages, seed)
    .unwrap()
}
