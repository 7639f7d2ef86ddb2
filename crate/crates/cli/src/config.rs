//! Run configuration, stored as JSON.

use std::path::{Path, PathBuf};

use rwalk_core::measures::adapted_measure;
use rwalk_core::{AdaptedSpec, GroupElement, GroupSpec, SparseMeasure};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// A measure on one base group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FactorMeasure {
    /// Uniform on the standard generators and their inverses.
    Srw,
    Explicit {
        entries: Vec<(GroupElement, f64)>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MeasureConfig {
    Srw,
    Explicit {
        entries: Vec<(GroupElement, f64)>,
    },
    /// `alpha mu0 + (1 - alpha) mu1` on the free product `group`.
    Adapted {
        alpha: f64,
        mu0: FactorMeasure,
        mu1: FactorMeasure,
    },
}

/// How return probabilities are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesChoice {
    /// Sparse convolution engine (any measure).
    Engine,
    /// Contour transfer from the excursion system (adapted measures).
    Transfer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    pub tol_deg: f64,
    pub tol_alpha: f64,
    pub divergence_margin: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            tol_deg: rwalk_core::classify::TOL_DEG,
            tol_alpha: rwalk_core::classify::TOL_ALPHA,
            divergence_margin: rwalk_core::classify::DIVERGENCE_MARGIN,
        }
    }
}

fn default_steps() -> usize {
    1024
}

fn default_grid() -> Vec<f64> {
    vec![0.5, 0.9, 1.0]
}

fn default_kernel_rows() -> usize {
    2048
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub group: GroupSpec,
    pub measure: MeasureConfig,
    /// Replace the measure by `(mu + delta_e) / 2`.
    #[serde(default)]
    pub lazy: bool,
    #[serde(default = "default_series")]
    pub series: SeriesChoice,
    #[serde(default)]
    pub prune_eps: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub eta: f64,
    /// Fractions of the radius of convergence.
    #[serde(default = "default_grid")]
    pub r_grid: Vec<f64>,
    #[serde(default = "default_kernel_rows")]
    pub kernel_rows: usize,
    #[serde(default)]
    pub tolerances: Tolerances,
    /// Largest number of stored support points in the engine.
    #[serde(default)]
    pub support_budget: Option<usize>,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub threads: Option<usize>,
}

fn default_series() -> SeriesChoice {
    SeriesChoice::Engine
}

/// Smallest step budget that `classify` accepts as conclusive.
pub const MIN_CLASSIFY_STEPS: usize = 64;

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.group
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        let t = &self.tolerances;
        for (name, v) in [
            ("tol_deg", t.tol_deg),
            ("tol_alpha", t.tol_alpha),
            ("divergence_margin", t.divergence_margin),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CliError::Config(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.prune_eps >= 0.0 && self.prune_eps.is_finite()) {
            return Err(CliError::Config(format!(
                "prune_eps must be >= 0, got {}",
                self.prune_eps
            )));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(CliError::Config(format!(
                "eta must be >= 0, got {}",
                self.eta
            )));
        }
        if self.threads == Some(0) {
            return Err(CliError::Config("threads must be >= 1".into()));
        }
        if self.r_grid.iter().any(|&x| !(x > 0.0 && x <= 1.0)) {
            return Err(CliError::Config("r_grid entries must lie in (0, 1]".into()));
        }
        if self.series == SeriesChoice::Transfer
            && !matches!(self.measure, MeasureConfig::Adapted { .. })
        {
            return Err(CliError::Config(
                "the transfer series needs an adapted measure".into(),
            ));
        }
        Ok(())
    }

    /// The adapted description, when there is one (lazified if requested).
    pub fn adapted(&self) -> Result<Option<AdaptedSpec>, CliError> {
        let MeasureConfig::Adapted { alpha, mu0, mu1 } = &self.measure else {
            return Ok(None);
        };
        let (Some(h0), Some(h1)) = (self.group.factor(0), self.group.factor(1)) else {
            return Err(CliError::Config(
                "an adapted measure needs a free product group".into(),
            ));
        };
        let a = AdaptedSpec::new(*alpha, factor_measure(h0, mu0)?, factor_measure(h1, mu1)?)
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(Some(if self.lazy { a.lazified() } else { a }))
    }

    /// The measure the walk steps with.
    pub fn measure(&self) -> Result<SparseMeasure, CliError> {
        let mu = match &self.measure {
            MeasureConfig::Srw => SparseMeasure::simple_random_walk(self.group.clone()),
            MeasureConfig::Explicit { entries } => {
                SparseMeasure::new(self.group.clone(), entries.iter().cloned())
                    .map_err(|e| CliError::Config(e.to_string()))?
            }
            MeasureConfig::Adapted { .. } => {
                let a = self.adapted()?.expect("adapted measure");
                return adapted_measure(&self.group, &a)
                    .map_err(|e| CliError::Config(e.to_string()));
            }
        };
        if !mu.is_probability() {
            return Err(CliError::Config(format!(
                "measure has mass {}",
                mu.total_mass()
            )));
        }
        Ok(if self.lazy {
            rwalk_core::measures::lazify(&mu)
        } else {
            mu
        })
    }
}

fn factor_measure(spec: &GroupSpec, m: &FactorMeasure) -> Result<SparseMeasure, CliError> {
    match m {
        FactorMeasure::Srw => Ok(SparseMeasure::simple_random_walk(spec.clone())),
        FactorMeasure::Explicit { entries } => {
            SparseMeasure::new(spec.clone(), entries.iter().cloned())
                .map_err(|e| CliError::Config(e.to_string()))
        }
    }
}
