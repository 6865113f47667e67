//! Model parameters and the empirical objects the dynamics produce.
//!
//! A configuration holds `M` replicas of `N` spins driven by one shared
//! coupling matrix. The observable the theory tracks is the double empirical
//! measure: one atom per spin site, carrying that site's spin column across
//! replicas together with its field column.

use thiserror::Error;

/// Parameters of a replicated spin-glass run.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Number of spins per replica.
    pub n: usize,
    /// Number of replicas sharing the couplings.
    pub m: usize,
    /// Inverse temperature.
    pub beta: f64,
    /// External field.
    pub h: f64,
    /// Coupling symmetry parameter in `[0, 1]`: `E[J_{jk} J_{kj}] = s`.
    pub s: f64,
    /// Overlap-eigenvalue floor used by the stopping rule and by the
    /// regularized inverse of the overlap matrix.
    pub c_floor: f64,
    /// Time horizon.
    pub t_horizon: f64,
    /// Master seed; all streams derive from it.
    pub seed: u64,
}

impl ModelParams {
    pub fn sites(&self) -> usize {
        self.n * self.m
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("n must be at least 1")]
    BadN,
    #[error("m must be between 1 and 8")]
    BadM,
    #[error("beta must be finite and >= 0, got {0}")]
    BadBeta(f64),
    #[error("h must be finite, got {0}")]
    BadH(f64),
    #[error("s must lie in [0, 1], got {0}")]
    BadS(f64),
    #[error("c_floor must lie in (0, 1), got {0}")]
    BadCFloor(f64),
    #[error("t_horizon must be finite and >= 0, got {0}")]
    BadHorizon(f64),
}

/// Validate parameter ranges. `m <= 8` is a deliberate limit: the moment
/// eigensolver and the experiments are sized for few replicas.
pub fn validate_params(p: &ModelParams) -> Result<(), ParamError> {
    if p.n < 1 {
        return Err(ParamError::BadN);
    }
    if p.m < 1 || p.m > 8 {
        return Err(ParamError::BadM);
    }
    if !p.beta.is_finite() || p.beta < 0.0 {
        return Err(ParamError::BadBeta(p.beta));
    }
    if !p.h.is_finite() {
        return Err(ParamError::BadH(p.h));
    }
    if !(0.0..=1.0).contains(&p.s) {
        return Err(ParamError::BadS(p.s));
    }
    if !(p.c_floor > 0.0 && p.c_floor < 1.0) {
        return Err(ParamError::BadCFloor(p.c_floor));
    }
    if !p.t_horizon.is_finite() || p.t_horizon < 0.0 {
        return Err(ParamError::BadHorizon(p.t_horizon));
    }
    Ok(())
}

/// One atom of the double empirical measure: the spin column and field column
/// of a single site across replicas. Spins are `+1` or `-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub sigma: Vec<i8>,
    pub x: Vec<f64>,
}

impl Atom {
    pub fn new(sigma: Vec<i8>, x: Vec<f64>) -> Self {
        assert_eq!(sigma.len(), x.len());
        debug_assert!(sigma.iter().all(|&s| s == 1 || s == -1));
        Self { sigma, x }
    }

    pub fn m(&self) -> usize {
        self.sigma.len()
    }
}

/// Equal-weight empirical measure on spin-column / field-column atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    pub m: usize,
    pub atoms: Vec<Atom>,
}

impl EmpiricalMeasure {
    pub fn new(m: usize, atoms: Vec<Atom>) -> Self {
        assert!(atoms.iter().all(|a| a.m() == m));
        Self { m, atoms }
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Build from flat row-major state arrays (`sigma[i * n + j]`, replica `i`,
    /// site `j`): atom `j` collects column `j` of both arrays.
    pub fn from_state(sigma: &[i8], fields: &[f64], n: usize, m: usize) -> Self {
        assert_eq!(sigma.len(), n * m);
        assert_eq!(fields.len(), n * m);
        let atoms = (0..n)
            .map(|j| {
                Atom::new(
                    (0..m).map(|i| sigma[i * n + j]).collect(),
                    (0..m).map(|i| fields[i * n + j]).collect(),
                )
            })
            .collect();
        Self { m, atoms }
    }

    /// Mean of `(sigma, x) -> f` over atoms.
    pub fn mean(&self, f: impl Fn(&Atom) -> f64) -> f64 {
        if self.atoms.is_empty() {
            return 0.0;
        }
        self.atoms.iter().map(f).sum::<f64>() / self.atoms.len() as f64
    }
}
