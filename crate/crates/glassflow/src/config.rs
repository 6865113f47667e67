//! Experiment configuration: a TOML file selects a mode, the model, the
//! numerical knobs, the replicate seeds, and the output directory. Unknown
//! keys are rejected so typos fail loudly instead of silently defaulting.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{validate_params, ModelParams, ParamError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Model(#[from] ParamError),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Simulate,
    FlowParticle,
    FlowPde,
    Compare,
    Bifurcation,
    GaussianCheck,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Simulate => "simulate",
            Mode::FlowParticle => "flow-particle",
            Mode::FlowPde => "flow-pde",
            Mode::Compare => "compare",
            Mode::Bifurcation => "bifurcation",
            Mode::GaussianCheck => "gaussian-check",
        }
    }

    pub fn parse(text: &str) -> Option<Mode> {
        match text {
            "simulate" => Some(Mode::Simulate),
            "flow-particle" => Some(Mode::FlowParticle),
            "flow-pde" => Some(Mode::FlowPde),
            "compare" => Some(Mode::Compare),
            "bifurcation" => Some(Mode::Bifurcation),
            "gaussian-check" => Some(Mode::GaussianCheck),
            _ => None,
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Model block: everything `ModelParams` carries except the seed, which comes
/// from the replicate list.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n: usize,
    pub m: usize,
    pub beta: f64,
    #[serde(default)]
    pub h: f64,
    pub s: f64,
    #[serde(default = "default_c_floor")]
    pub c_floor: f64,
    pub t_horizon: f64,
}

fn default_c_floor() -> f64 {
    0.1
}

impl ModelSection {
    pub fn params_for_seed(&self, seed: u64) -> ModelParams {
        ModelParams {
            n: self.n,
            m: self.m,
            beta: self.beta,
            h: self.h,
            s: self.s,
            c_floor: self.c_floor,
            t_horizon: self.t_horizon,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NumericsSection {
    /// Euler step for the particle flow.
    pub dt: f64,
    /// Particle count; `None` means match the simulation (at least the
    /// particle-system minimum).
    pub particles: Option<usize>,
    /// Grid resolution and domain for the single-replica density solver.
    pub cells: usize,
    pub x_min: f64,
    pub x_max: f64,
    /// Observation times; empty means five uniform times ending at the
    /// horizon.
    pub snapshot_times: Vec<f64>,
}

impl Default for NumericsSection {
    fn default() -> Self {
        NumericsSection {
            dt: 0.005,
            particles: None,
            cells: 400,
            x_min: -8.0,
            x_max: 8.0,
            snapshot_times: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplicatesSection {
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub directory: PathBuf,
}

/// Grid of inverse temperatures scanned for the symmetric-overlap onset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BifurcationSection {
    pub beta_min: f64,
    pub beta_max: f64,
    pub beta_step: f64,
    /// Smallest root magnitude that counts as a nonzero branch.
    pub threshold: f64,
}

impl Default for BifurcationSection {
    fn default() -> Self {
        BifurcationSection {
            beta_min: 0.5,
            beta_max: 2.0,
            beta_step: 0.001,
            threshold: 0.05,
        }
    }
}

/// Randomized audit of the conditional-field formulas on small instances.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussianCheckSection {
    pub instances: usize,
    pub max_n: usize,
    pub max_m: usize,
    pub tolerance: f64,
}

impl Default for GaussianCheckSection {
    fn default() -> Self {
        GaussianCheckSection {
            instances: 100,
            max_n: 12,
            max_m: 3,
            tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub model: ModelSection,
    #[serde(default)]
    pub numerics: NumericsSection,
    #[serde(default)]
    pub replicates: ReplicatesSection,
    pub output: OutputSection,
    #[serde(default)]
    pub bifurcation: BifurcationSection,
    #[serde(default)]
    pub gaussian_check: GaussianCheckSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Observation times, defaulted to five uniform times ending at the
    /// horizon when the config leaves them empty.
    pub fn snapshot_schedule(&self) -> Vec<f64> {
        if !self.numerics.snapshot_times.is_empty() {
            return self.numerics.snapshot_times.clone();
        }
        let t = self.model.t_horizon;
        if t == 0.0 {
            return vec![0.0];
        }
        (0..=4).map(|k| t * k as f64 / 4.0).collect()
    }

    /// Particle count for the flow, defaulted to the simulation size but
    /// never below the particle-system minimum.
    pub fn particle_count(&self) -> usize {
        self.numerics
            .particles
            .unwrap_or_else(|| self.model.n.max(crate::flow::MIN_PARTICLES))
    }

    /// Replicate seeds shifted by a command-line offset.
    pub fn seeds_with_offset(&self, offset: u64) -> Vec<u64> {
        self.replicates
            .seeds
            .iter()
            .map(|&s| s.wrapping_add(offset))
            .collect()
    }

    fn validate(&self) -> Result<(), ConfigError> {
        // Seed is irrelevant to the static parameter ranges.
        validate_params(&self.model.params_for_seed(0))?;
        let num = &self.numerics;
        if !(num.dt > 0.0) || !num.dt.is_finite() {
            return Err(invalid(format!("numerics.dt must be positive, got {}", num.dt)));
        }
        if !(num.x_min < num.x_max) || !num.x_min.is_finite() || !num.x_max.is_finite() {
            return Err(invalid(format!(
                "numerics grid bounds need x_min < x_max, got [{}, {}]",
                num.x_min, num.x_max
            )));
        }
        let times = &num.snapshot_times;
        if !times.is_empty() {
            let sorted = times.windows(2).all(|w| w[0] <= w[1]);
            let in_range = times
                .iter()
                .all(|&t| t.is_finite() && t >= 0.0 && t <= self.model.t_horizon);
            if !sorted || !in_range {
                return Err(invalid(
                    "numerics.snapshot_times must be sorted and lie within [0, t_horizon]",
                ));
            }
        }
        if let Some(p) = num.particles {
            if p < crate::flow::MIN_PARTICLES {
                return Err(invalid(format!(
                    "numerics.particles must be at least {}, got {p}",
                    crate::flow::MIN_PARTICLES
                )));
            }
        }
        let needs_seeds = matches!(
            self.mode,
            Mode::Simulate
                | Mode::FlowParticle
                | Mode::FlowPde
                | Mode::Compare
                | Mode::GaussianCheck
        );
        if needs_seeds && self.replicates.seeds.is_empty() {
            return Err(invalid(format!(
                "mode {} needs at least one seed in replicates.seeds",
                self.mode
            )));
        }
        match self.mode {
            Mode::FlowPde => {
                if self.model.m != 1 {
                    return Err(invalid("flow-pde requires a single replica (model.m = 1)"));
                }
                if num.cells < 200 {
                    return Err(invalid(format!(
                        "flow-pde needs numerics.cells >= 200 to resolve the density, got {}",
                        num.cells
                    )));
                }
            }
            Mode::Bifurcation => {
                let b = &self.bifurcation;
                if !(b.beta_min > 0.0 && b.beta_min <= b.beta_max) || !(b.beta_step > 0.0) {
                    return Err(invalid(
                        "bifurcation grid needs 0 < beta_min <= beta_max and beta_step > 0",
                    ));
                }
                if !(b.threshold > 0.0 && b.threshold < 1.0) {
                    return Err(invalid("bifurcation.threshold must lie in (0, 1)"));
                }
            }
            Mode::GaussianCheck => {
                let g = &self.gaussian_check;
                if g.instances == 0 {
                    return Err(invalid("gaussian_check.instances must be positive"));
                }
                if g.max_n < 2 || g.max_m == 0 || g.max_m > 8 {
                    return Err(invalid(
                        "gaussian_check needs max_n >= 2 and max_m in 1..=8",
                    ));
                }
                if !(g.tolerance > 0.0) {
                    return Err(invalid("gaussian_check.tolerance must be positive"));
                }
            }
            _ => {}
        }
        Ok(())
    }
}
