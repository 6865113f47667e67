//! Moment matrices of a measure on spin/field columns, and the drift and
//! diffusion coefficients of the mean-field flow built from them.
//!
//! For a measure on `(sigma, x)` with `m` replica coordinates, all matrices
//! are `m x m`, row-major, with the row index carrying the rate factor where
//! one appears:
//!
//! * `K[j][k] = E[sigma^j sigma^k]` (overlap matrix),
//! * `L[j][k] = E[sigma^k sigma^j c(sigma^j, x^j)]`,
//! * `kappa[j][k] = E[x^k sigma^j c(sigma^j, x^j)]`,
//! * `upsilon[j][k] = E[sigma^k x^j]`.
//!
//! `H` is the inverse of `K` when the smallest overlap eigenvalue `Lambda`
//! is at least `c_floor / 2`, and the shifted inverse
//! `(I (c_floor/2 - Lambda) + K)^{-1}` otherwise; both are formed on the
//! eigenbasis of `K`. The flow drift is
//! `m(sigma, x) = -2 L H x - 2 s kappa H sigma + 2 s L H upsilon H sigma`
//! and the diffusion is diagonal with entries `2 sqrt(L_jj)`.

use crate::linalg::{matmul, matvec, sym_apply_spectral, sym_eigen};
use crate::model::{Atom, EmpiricalMeasure};
use crate::rate::RateFunction;
use crate::transport::wasserstein_exact;
use thiserror::Error;

#[derive(Debug, Clone)]
pub struct MomentSet {
    pub m: usize,
    pub k: Vec<f64>,
    pub l: Vec<f64>,
    pub kappa: Vec<f64>,
    pub upsilon: Vec<f64>,
    /// Smallest eigenvalue of `K`.
    pub lambda_min: f64,
    /// Inverse or shifted inverse of `K`, depending on `regularized`.
    pub h: Vec<f64>,
    /// Whether the shifted branch was taken (`lambda_min < c_floor / 2`).
    pub regularized: bool,
}

#[derive(Debug, Error)]
pub enum MomentError {
    #[error("diffusion needs L_jj >= 0, got {0} at index {1}")]
    NegativeRateDiagonal(f64, usize),
    #[error("empty measure")]
    EmptyMeasure,
}

/// Moments of flat state arrays: `sigma[a * m + j]`, `x[a * m + j]` for atom
/// `a` and replica `j`, `count` atoms in total.
pub fn compute_moments_flat(
    sigma: &[i8],
    x: &[f64],
    count: usize,
    m: usize,
    rate: &dyn RateFunction,
    c_floor: f64,
) -> Result<MomentSet, MomentError> {
    if count == 0 {
        return Err(MomentError::EmptyMeasure);
    }
    assert_eq!(sigma.len(), count * m);
    assert_eq!(x.len(), count * m);
    let mut k = vec![0.0; m * m];
    let mut l = vec![0.0; m * m];
    let mut kappa = vec![0.0; m * m];
    let mut upsilon = vec![0.0; m * m];
    let mut rates = vec![0.0; m];
    for a in 0..count {
        let sa = &sigma[a * m..(a + 1) * m];
        let xa = &x[a * m..(a + 1) * m];
        for j in 0..m {
            rates[j] = rate.rate(sa[j], xa[j]);
        }
        for j in 0..m {
            let sj = f64::from(sa[j]);
            let weighted = sj * rates[j];
            for kk in 0..m {
                let sk = f64::from(sa[kk]);
                k[j * m + kk] += sj * sk;
                l[j * m + kk] += sk * weighted;
                kappa[j * m + kk] += xa[kk] * weighted;
                upsilon[j * m + kk] += sk * xa[j];
            }
        }
    }
    let inv = 1.0 / count as f64;
    for v in [&mut k, &mut l, &mut kappa, &mut upsilon] {
        v.iter_mut().for_each(|e| *e *= inv);
    }
    let eig = sym_eigen(&k, m);
    let lambda_min = eig.values[0];
    let regularized = lambda_min < c_floor / 2.0;
    let shift = if regularized {
        c_floor / 2.0 - lambda_min
    } else {
        0.0
    };
    let h = sym_apply_spectral(&eig, |v| 1.0 / (v + shift));
    Ok(MomentSet {
        m,
        k,
        l,
        kappa,
        upsilon,
        lambda_min,
        h,
        regularized,
    })
}

/// Moments of an empirical measure.
pub fn compute_moments(
    measure: &EmpiricalMeasure,
    rate: &dyn RateFunction,
    c_floor: f64,
) -> Result<MomentSet, MomentError> {
    let m = measure.m;
    let count = measure.len();
    let mut sigma = Vec::with_capacity(count * m);
    let mut x = Vec::with_capacity(count * m);
    for atom in &measure.atoms {
        sigma.extend_from_slice(&atom.sigma);
        x.extend_from_slice(&atom.x);
    }
    compute_moments_flat(&sigma, &x, count, m, rate, c_floor)
}

/// Smallest overlap eigenvalue of a measure; the quantity watched by the
/// stopping rule.
pub fn overlap_lambda_min(measure: &EmpiricalMeasure) -> f64 {
    let m = measure.m;
    let count = measure.len().max(1) as f64;
    let mut k = vec![0.0; m * m];
    for atom in &measure.atoms {
        for j in 0..m {
            let sj = f64::from(atom.sigma[j]);
            for kk in 0..m {
                k[j * m + kk] += sj * f64::from(atom.sigma[kk]);
            }
        }
    }
    k.iter_mut().for_each(|e| *e /= count);
    sym_eigen(&k, m).values[0]
}

/// The two matrices `(A_x, A_sigma)` with `drift = A_x x + A_sigma sigma`:
/// `A_x = -2 L H`, `A_sigma = -2 s kappa H + 2 s L H upsilon H`.
pub fn drift_matrices(ms: &MomentSet, s: f64) -> (Vec<f64>, Vec<f64>) {
    let m = ms.m;
    let lh = matmul(&ms.l, &ms.h, m);
    let mut a_x = lh.clone();
    a_x.iter_mut().for_each(|e| *e *= -2.0);
    let kh = matmul(&ms.kappa, &ms.h, m);
    let lhuh = matmul(&lh, &matmul(&ms.upsilon, &ms.h, m), m);
    let mut a_sigma = vec![0.0; m * m];
    for i in 0..m * m {
        a_sigma[i] = -2.0 * s * kh[i] + 2.0 * s * lhuh[i];
    }
    (a_x, a_sigma)
}

/// Flow drift at a single atom.
pub fn drift(ms: &MomentSet, s: f64, atom: &Atom) -> Vec<f64> {
    let m = ms.m;
    assert_eq!(atom.m(), m);
    let (a_x, a_sigma) = drift_matrices(ms, s);
    let sig: Vec<f64> = atom.sigma.iter().map(|&v| f64::from(v)).collect();
    let dx = matvec(&a_x, &atom.x, m);
    let ds = matvec(&a_sigma, &sig, m);
    dx.iter().zip(&ds).map(|(a, b)| a + b).collect()
}

/// Diagonal diffusion coefficients `D_j = 2 sqrt(L_jj)`.
pub fn diffusion(ms: &MomentSet) -> Result<Vec<f64>, MomentError> {
    (0..ms.m)
        .map(|j| {
            let diag = ms.l[j * ms.m + j];
            if diag < 0.0 {
                Err(MomentError::NegativeRateDiagonal(diag, j))
            } else {
                Ok(2.0 * diag.sqrt())
            }
        })
        .collect()
}

/// One sampled point of the moment-continuity probe.
#[derive(Debug, Clone)]
pub struct ProbePoint {
    pub distance: f64,
    pub delta_l: f64,
    pub delta_k: f64,
    pub quotient_l: f64,
    pub quotient_k: f64,
}

#[derive(Debug, Clone)]
pub struct LipschitzReport {
    pub points: Vec<ProbePoint>,
    pub max_quotient_l: f64,
    pub max_quotient_k: f64,
    pub median_quotient_l: f64,
    pub median_quotient_k: f64,
    /// Pairs skipped because their distance was below resolution.
    pub skipped: usize,
}

/// Empirical continuity of the coefficient matrices in the measure: for each
/// pair, the max-norm changes of `L` and `K` divided by the transport
/// distance. The theory provides finiteness of these quotients, not a named
/// constant; callers assert boundedness and stability.
pub fn lipschitz_probe(
    pairs: &[(EmpiricalMeasure, EmpiricalMeasure)],
    rate: &dyn RateFunction,
    c_floor: f64,
) -> Result<LipschitzReport, MomentError> {
    let mut points = Vec::with_capacity(pairs.len());
    let mut skipped = 0;
    for (mu, nu) in pairs {
        let d = wasserstein_exact(mu, nu);
        if d < 1e-12 {
            skipped += 1;
            continue;
        }
        let ma = compute_moments(mu, rate, c_floor)?;
        let mb = compute_moments(nu, rate, c_floor)?;
        let delta_l = crate::linalg::max_abs_diff(&ma.l, &mb.l);
        let delta_k = crate::linalg::max_abs_diff(&ma.k, &mb.k);
        points.push(ProbePoint {
            distance: d,
            delta_l,
            delta_k,
            quotient_l: delta_l / d,
            quotient_k: delta_k / d,
        });
    }
    let median = |mut v: Vec<f64>| -> f64 {
        if v.is_empty() {
            return 0.0;
        }
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    Ok(LipschitzReport {
        max_quotient_l: points.iter().map(|p| p.quotient_l).fold(0.0, f64::max),
        max_quotient_k: points.iter().map(|p| p.quotient_k).fold(0.0, f64::max),
        median_quotient_l: median(points.iter().map(|p| p.quotient_l).collect()),
        median_quotient_k: median(points.iter().map(|p| p.quotient_k).collect()),
        points,
        skipped,
    })
}
