//! Seeded synthetic forecast-error generators.
//!
//! Every generator draws independent stages; the spread of stage `j` is the
//! base spread times `1 + growth·j` so errors widen with lead time. Draws are
//! clipped to `±clip` times the stage spread, which keeps supports bounded.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StudentT};
use serde::{Deserialize, Serialize};

use crate::dataset::ForecastErrorDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ErrorModel {
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
    UniformBox { lo: Vec<f64>, hi: Vec<f64> },
    /// Gaussian core; with probability `p_outlier` the draw is scaled by
    /// `outlier_scale`.
    MixtureOutliers { std: Vec<f64>, p_outlier: f64, outlier_scale: f64 },
    /// Student-t with `dof` degrees of freedom.
    StudentT { scale: Vec<f64>, dof: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioGenerator {
    pub model: ErrorModel,
    /// Relative spread growth per stage of lead time.
    #[serde(default)]
    pub growth: f64,
    /// Clip radius in units of the stage spread.
    #[serde(default = "default_clip")]
    pub clip: f64,
}

fn default_clip() -> f64 {
    6.0
}

impl ScenarioGenerator {
    pub fn new(model: ErrorModel) -> Self {
        ScenarioGenerator {
            model,
            growth: 0.0,
            clip: default_clip(),
        }
    }

    pub fn with_growth(mut self, growth: f64) -> Self {
        self.growth = growth;
        self
    }

    pub fn n_xi(&self) -> usize {
        match &self.model {
            ErrorModel::Gaussian { std, .. } => std.len(),
            ErrorModel::UniformBox { lo, .. } => lo.len(),
            ErrorModel::MixtureOutliers { std, .. } => std.len(),
            ErrorModel::StudentT { scale, .. } => scale.len(),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match &self.model {
            ErrorModel::Gaussian { mean, std } => mean.len() == std.len() && std.iter().all(|s| *s >= 0.0),
            ErrorModel::UniformBox { lo, hi } => lo.len() == hi.len() && lo.iter().zip(hi).all(|(l, h)| l <= h),
            ErrorModel::MixtureOutliers {
                std,
                p_outlier,
                outlier_scale,
            } => std.iter().all(|s| *s >= 0.0) && (0.0..=1.0).contains(p_outlier) && *outlier_scale >= 0.0,
            ErrorModel::StudentT { scale, dof } => scale.iter().all(|s| *s >= 0.0) && *dof > 0.0,
        };
        if ok && self.n_xi() > 0 && self.growth >= 0.0 && self.clip > 0.0 {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid scenario generator {self:?}")))
        }
    }

    /// `n × (stages·n_xi)` draws, stage-major.
    pub fn sample(&self, n: usize, stages: usize, seed: u64) -> Result<DMatrix<f64>> {
        self.validate()?;
        let n_xi = self.n_xi();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
        let t = match &self.model {
            ErrorModel::StudentT { dof, .. } => Some(StudentT::new(*dof).map_err(|e| Error::Validation(e.to_string()))?),
            _ => None,
        };
        let mut out = DMatrix::zeros(n, stages * n_xi);
        for i in 0..n {
            for j in 0..stages {
                let g = 1.0 + self.growth * j as f64;
                for k in 0..n_xi {
                    let (v, spread) = match &self.model {
                        ErrorModel::Gaussian { mean, std } => (mean[k] + g * std[k] * std_normal.sample(&mut rng), g * std[k]),
                        ErrorModel::UniformBox { lo, hi } => {
                            let mid = 0.5 * (lo[k] + hi[k]);
                            let half = 0.5 * (hi[k] - lo[k]) * g;
                            (mid + half * rng.random_range(-1.0..=1.0), half)
                        }
                        ErrorModel::MixtureOutliers {
                            std,
                            p_outlier,
                            outlier_scale,
                        } => {
                            let z = std_normal.sample(&mut rng);
                            let s = if rng.random_bool(*p_outlier) { *outlier_scale } else { 1.0 };
                            (g * std[k] * s * z, g * std[k])
                        }
                        ErrorModel::StudentT { scale, .. } => {
                            (g * scale[k] * t.as_ref().expect("t").sample(&mut rng), g * scale[k])
                        }
                    };
                    let c = self.clip * spread;
                    out[(i, j * n_xi + k)] = if c > 0.0 { v.clamp(-c, c) } else { v };
                }
            }
        }
        Ok(out)
    }

    /// A dataset with data-derived supports.
    pub fn dataset(&self, n: usize, stages: usize, seed: u64) -> Result<ForecastErrorDataset> {
        ForecastErrorDataset::new(self.sample(n, stages, seed)?, self.n_xi(), None)
    }
}
