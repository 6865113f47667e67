//! Stationary overlap equation and its bifurcation in the interaction
//! strength.
//!
//! The stationary overlap `q` of two replicas solves
//!
//! `(1 + q) / (1 - q) = cosh(2 beta h) exp(2 beta^2 q)`,  `q` in `[0, 1)`.
//!
//! The solver works on the logarithmic residual
//! `2 artanh(q) - ln cosh(2 beta h) - 2 beta^2 q`, which has the same roots
//! and signs but stays well conditioned near `q = 1`, where the raw form
//! loses up to ten digits to cancellation. Both residuals are reported at
//! every root.
//!
//! Structure of the root set: at `h = 0` the root `q = 0` always exists and
//! a second positive root appears exactly for `beta > 1`; at `h != 0` the
//! residual is convex with a negative value at 0, so the positive root is
//! unique.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FixedPointError {
    #[error("beta must be finite and nonnegative, h finite")]
    InvalidParams,
}

/// `ln cosh x` without overflow: `|x| + ln(1 + e^{-2|x|}) - ln 2`.
pub fn ln_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// Raw fixed-point residual `(1+q)/(1-q) - cosh(2 beta h) exp(2 beta^2 q)`.
pub fn overlap_residual(q: f64, beta: f64, h: f64) -> f64 {
    (1.0 + q) / (1.0 - q) - (2.0 * beta * h).cosh() * (2.0 * beta * beta * q).exp()
}

/// Logarithmic residual with the same roots on `[0, 1)`.
pub fn overlap_log_residual(q: f64, beta: f64, h: f64) -> f64 {
    2.0 * q.atanh() - ln_cosh(2.0 * beta * h) - 2.0 * beta * beta * q
}

#[derive(Debug, Clone)]
pub struct OverlapSolution {
    pub beta: f64,
    pub h: f64,
    /// Roots in increasing order.
    pub roots: Vec<f64>,
    /// Logarithmic residual at each root.
    pub log_residuals: Vec<f64>,
    /// Raw residual at each root; reflects the conditioning of the raw form,
    /// not solver accuracy.
    pub raw_residuals: Vec<f64>,
}

const GRID_POINTS: usize = 10_000;
const Q_MAX: f64 = 1.0 - 1e-9;

fn bisect_to_ulp(mut lo: f64, mut hi: f64, f_lo: f64, f: impl Fn(f64) -> f64) -> f64 {
    let lo_negative = f_lo < 0.0;
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return mid;
        }
        let fm = f(mid);
        if fm == 0.0 {
            return mid;
        }
        if (fm < 0.0) == lo_negative {
            lo = mid;
        } else {
            hi = mid;
        }
    }
}

/// All stationary overlaps on `[0, 1)`: grid scan for sign changes, then
/// bisection of the logarithmic residual to the last floating-point digit.
pub fn solve_overlap(beta: f64, h: f64) -> Result<OverlapSolution, FixedPointError> {
    if !beta.is_finite() || beta < 0.0 || !h.is_finite() {
        return Err(FixedPointError::InvalidParams);
    }
    let f = |q: f64| overlap_log_residual(q, beta, h);
    let mut roots = Vec::new();
    let step = Q_MAX / (GRID_POINTS - 1) as f64;
    let mut prev_q = 0.0;
    let mut prev_f = f(0.0);
    if prev_f == 0.0 {
        roots.push(0.0);
    }
    for i in 1..GRID_POINTS {
        let q = i as f64 * step;
        let val = f(q);
        if val == 0.0 {
            roots.push(q);
        } else if prev_f != 0.0 && (prev_f < 0.0) != (val < 0.0) {
            roots.push(bisect_to_ulp(prev_q, q, prev_f, f));
        }
        prev_q = q;
        prev_f = val;
    }
    roots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    roots.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let log_residuals = roots.iter().map(|&q| f(q)).collect();
    let raw_residuals = roots
        .iter()
        .map(|&q| overlap_residual(q, beta, h))
        .collect();
    Ok(OverlapSolution {
        beta,
        h,
        roots,
        log_residuals,
        raw_residuals,
    })
}

#[derive(Debug, Clone)]
pub struct BifurcationPoint {
    pub beta: f64,
    pub roots: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BifurcationScan {
    pub h: f64,
    pub points: Vec<BifurcationPoint>,
    /// Smallest scanned `beta` whose largest root reaches `threshold`; the
    /// branch opens like `sqrt(3 (beta^2 - 1))` at `h = 0`, so a small
    /// threshold (0.05 is a good default) localizes the onset sharply.
    pub onset: Option<f64>,
}

pub fn bifurcation_scan(
    betas: &[f64],
    h: f64,
    threshold: f64,
) -> Result<BifurcationScan, FixedPointError> {
    let mut points = Vec::with_capacity(betas.len());
    let mut onset = None;
    for &beta in betas {
        let sol = solve_overlap(beta, h)?;
        if onset.is_none()
            && sol
                .roots
                .last()
                .is_some_and(|&q| q >= threshold)
        {
            onset = Some(beta);
        }
        points.push(BifurcationPoint {
            beta,
            roots: sol.roots,
        });
    }
    Ok(BifurcationScan { h, points, onset })
}
