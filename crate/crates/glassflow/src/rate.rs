//! Spin-flip rate functions.
//!
//! Every dynamical component takes its rate through [`RateFunction`] so test
//! rates (constant, truncated, deliberately misdeclared) can be injected in
//! place of the Glauber rate without touching the engines.

/// A single-site flip rate `c(sigma, g)`: the rate at which a spin with value
/// `sigma` flips when it sees local field `g`.
///
/// Implementations declare a uniform bound `sup_rate` (used as the proposal
/// rate by thinning) and a Lipschitz constant in the field argument.
pub trait RateFunction: Send + Sync {
    fn rate(&self, spin: i8, field: f64) -> f64;

    /// Declared uniform upper bound `c1` with `0 < c <= c1`.
    fn sup_rate(&self) -> f64;

    /// Declared Lipschitz constant of `g -> c(sigma, g)`.
    fn lipschitz(&self) -> f64;
}

/// Heat-bath (Glauber) rate `c(sigma, g) = 1 / (1 + exp(2 beta sigma (g + h)))`.
///
/// Bounds: `c1 = 1` and Lipschitz constant `beta / 2` (sharp, attained where
/// the rate crosses 1/2). The complement identity
/// `c(sigma, g) + c(-sigma, g) = 1` holds to a few ulp because both values are
/// produced from the same rounded `exp` (see [`logistic`]).
#[derive(Debug, Clone, Copy)]
pub struct GlauberRate {
    pub beta: f64,
    pub h: f64,
}

impl GlauberRate {
    pub fn new(beta: f64, h: f64) -> Self {
        assert!(beta >= 0.0 && beta.is_finite(), "beta must be finite, >= 0");
        assert!(h.is_finite(), "h must be finite");
        Self { beta, h }
    }
}

/// `1 / (1 + e^{-x})`, branch-stable. For `x` and `-x` the same `e^{-|x|}` is
/// computed, so `logistic(x) + logistic(-x)` rounds to 1 up to ~2 ulp.
fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        let t = (-x).exp();
        1.0 / (1.0 + t)
    } else {
        let t = x.exp();
        t / (1.0 + t)
    }
}

impl RateFunction for GlauberRate {
    fn rate(&self, spin: i8, field: f64) -> f64 {
        let u = 2.0 * self.beta * f64::from(spin) * (field + self.h);
        logistic(-u)
    }

    fn sup_rate(&self) -> f64 {
        1.0
    }

    fn lipschitz(&self) -> f64 {
        self.beta / 2.0
    }
}

/// Field-independent rate, for calibration runs and engine tests. The declared
/// bound is a separate field so tests can declare it wrongly on purpose.
#[derive(Debug, Clone, Copy)]
pub struct ConstantRate {
    pub value: f64,
    pub declared_sup: f64,
}

impl ConstantRate {
    pub fn new(value: f64) -> Self {
        Self {
            value,
            declared_sup: value,
        }
    }
}

impl RateFunction for ConstantRate {
    fn rate(&self, _spin: i8, _field: f64) -> f64 {
        self.value
    }

    fn sup_rate(&self) -> f64 {
        self.declared_sup
    }

    fn lipschitz(&self) -> f64 {
        0.0
    }
}

/// Report of [`rate_assumption_check`]: observed bounds on a field grid
/// against the declared ones, plus the growth rate of `|log c|`.
#[derive(Debug, Clone)]
pub struct RateCheckReport {
    pub sup_declared: f64,
    pub sup_observed: f64,
    pub sup_violated: bool,
    pub lipschitz_declared: f64,
    pub lipschitz_observed: f64,
    pub lipschitz_violated: bool,
    /// max of |log c(sigma, g)| / |g| over the grid away from g = 0.
    pub log_growth: f64,
    /// Rate values at the grid ends, `(c(+1, g_min), c(+1, g_max), c(-1, g_min), c(-1, g_max))`;
    /// probes that the limits at infinity settle.
    pub tail_values: [f64; 4],
    /// Smallest rate seen on the grid; positivity requires it to be > 0.
    pub min_rate: f64,
}

/// Evaluate a rate on a uniform field grid and compare against its declared
/// constants. Reporting only; the caller decides what a violation means.
pub fn rate_assumption_check(
    rate: &dyn RateFunction,
    g_min: f64,
    g_max: f64,
    points: usize,
) -> RateCheckReport {
    assert!(points >= 3 && g_max > g_min);
    let dg = (g_max - g_min) / (points - 1) as f64;
    let mut sup_observed = f64::NEG_INFINITY;
    let mut min_rate = f64::INFINITY;
    let mut lipschitz_observed: f64 = 0.0;
    let mut log_growth: f64 = 0.0;
    for &spin in &[1i8, -1i8] {
        let mut prev = rate.rate(spin, g_min);
        for k in 0..points {
            let g = g_min + k as f64 * dg;
            let c = rate.rate(spin, g);
            sup_observed = sup_observed.max(c);
            min_rate = min_rate.min(c);
            if k > 0 {
                lipschitz_observed = lipschitz_observed.max((c - prev).abs() / dg);
            }
            if g.abs() > 1e-9 && c > 0.0 {
                log_growth = log_growth.max(c.ln().abs() / g.abs());
            }
            prev = c;
        }
    }
    let tol = 1e-12;
    RateCheckReport {
        sup_declared: rate.sup_rate(),
        sup_observed,
        sup_violated: sup_observed > rate.sup_rate() * (1.0 + tol),
        lipschitz_declared: rate.lipschitz(),
        lipschitz_observed,
        lipschitz_violated: lipschitz_observed > rate.lipschitz() * (1.0 + 1e-6) + tol,
        log_growth,
        tail_values: [
            rate.rate(1, g_min),
            rate.rate(1, g_max),
            rate.rate(-1, g_min),
            rate.rate(-1, g_max),
        ],
        min_rate,
    }
}
