//! Exact configuration-law oracle for small single-replica systems.
//!
//! For n spins the law on the 2^n configurations evolves by the forward
//! equation
//!
//! `dP(s)/dt = sum_j [ r(s^j, j) P(s^j) - r(s, j) P(s) ]`
//!
//! where `s^j` flips bit `j` and `r(s, j)` is the jump rate of spin `j` in
//! configuration `s`, evaluated at that configuration's own field. Replicas
//! are conditionally independent given the couplings, so the single-replica
//! law determines the multi-replica one by product; only `m = 1` is handled
//! here.
//!
//! Fields are recomputed from coupling entries directly, not through the
//! simulator's incremental update path, so the two sides of any comparison
//! are independent.

use crate::couplings::CouplingMatrix;
use crate::rate::RateFunction;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MasterError {
    #[error("state space 2^n supported only up to n = {max}, got n = {n}")]
    TooLarge { n: usize, max: usize },
    #[error("initial law must have length 2^n, be nonnegative, and sum to 1")]
    BadInitialLaw,
    #[error("output times must be finite, sorted, nonnegative")]
    BadTimes,
    #[error("step size must be positive and finite")]
    BadStep,
}

const MAX_SPINS: usize = 10;

/// Spin of bit `j` in configuration `state`: bit clear is +1, bit set is -1.
pub fn spin_of(state: usize, j: usize) -> i8 {
    if state >> j & 1 == 0 {
        1
    } else {
        -1
    }
}

/// Index of the configuration holding the given spins.
pub fn state_of(spins: &[i8]) -> usize {
    spins
        .iter()
        .enumerate()
        .fold(0, |acc, (j, &s)| acc | usize::from(s < 0) << j)
}

/// Fields of one configuration: `g_j = n^{-1/2} sum_k J_{jk} sigma_k`.
pub fn state_fields(couplings: &CouplingMatrix, state: usize) -> Vec<f64> {
    let n = couplings.n();
    let scale = 1.0 / (n as f64).sqrt();
    (0..n)
        .map(|j| {
            let mut acc = 0.0;
            for k in 0..n {
                acc += couplings.entry(j, k) * f64::from(spin_of(state, k));
            }
            acc * scale
        })
        .collect()
}

pub fn uniform_initial(n: usize) -> Vec<f64> {
    vec![1.0 / (1 << n) as f64; 1 << n]
}

#[derive(Debug, Clone)]
pub struct MasterSolution {
    pub n: usize,
    pub times: Vec<f64>,
    /// `laws[t][state]`, aligned with `times`.
    pub laws: Vec<Vec<f64>>,
}

/// Integrate the forward equation with classical fourth-order Runge-Kutta at
/// fixed step `dt`, reporting the law at each requested time.
pub fn kolmogorov_oracle(
    couplings: &CouplingMatrix,
    rate: &dyn RateFunction,
    initial: &[f64],
    times: &[f64],
    dt: f64,
) -> Result<MasterSolution, MasterError> {
    let n = couplings.n();
    if n > MAX_SPINS {
        return Err(MasterError::TooLarge { n, max: MAX_SPINS });
    }
    let states = 1usize << n;
    if initial.len() != states
        || initial.iter().any(|&p| !(p >= 0.0) || !p.is_finite())
        || (initial.iter().sum::<f64>() - 1.0).abs() > 1e-12
    {
        return Err(MasterError::BadInitialLaw);
    }
    if times.windows(2).any(|w| !(w[0] <= w[1]))
        || times.iter().any(|&t| !t.is_finite() || t < 0.0)
    {
        return Err(MasterError::BadTimes);
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(MasterError::BadStep);
    }

    // Jump rates are time independent: r[s * n + j].
    let mut rates = vec![0.0; states * n];
    for s in 0..states {
        let fields = state_fields(couplings, s);
        for j in 0..n {
            rates[s * n + j] = rate.rate(spin_of(s, j), fields[j]);
        }
    }
    let deriv = |p: &[f64], out: &mut [f64]| {
        out.iter_mut().for_each(|v| *v = 0.0);
        for s in 0..states {
            for j in 0..n {
                let flow = rates[s * n + j] * p[s];
                out[s] -= flow;
                out[s ^ (1 << j)] += flow;
            }
        }
    };

    let mut p = initial.to_vec();
    let mut t = 0.0;
    let mut laws = Vec::with_capacity(times.len());
    let mut k1 = vec![0.0; states];
    let mut k2 = vec![0.0; states];
    let mut k3 = vec![0.0; states];
    let mut k4 = vec![0.0; states];
    let mut tmp = vec![0.0; states];
    for &target in times {
        while t < target - 1e-12 {
            let step = dt.min(target - t);
            deriv(&p, &mut k1);
            for s in 0..states {
                tmp[s] = p[s] + 0.5 * step * k1[s];
            }
            deriv(&tmp, &mut k2);
            for s in 0..states {
                tmp[s] = p[s] + 0.5 * step * k2[s];
            }
            deriv(&tmp, &mut k3);
            for s in 0..states {
                tmp[s] = p[s] + step * k3[s];
            }
            deriv(&tmp, &mut k4);
            for s in 0..states {
                p[s] += step / 6.0 * (k1[s] + 2.0 * k2[s] + 2.0 * k3[s] + k4[s]);
            }
            t += step;
        }
        laws.push(p.clone());
    }
    Ok(MasterSolution {
        n,
        times: times.to_vec(),
        laws,
    })
}

/// Total variation distance between two laws on the same state space.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::couplings::sample_couplings;
    use crate::rate::{ConstantRate, GlauberRate};
    use approx::assert_abs_diff_eq;

    #[test]
    fn spin_encoding_roundtrips() {
        for state in 0..16usize {
            let spins: Vec<i8> = (0..4).map(|j| spin_of(state, j)).collect();
            assert_eq!(state_of(&spins), state);
        }
    }

    #[test]
    fn probability_is_conserved_and_nonnegative() {
        let couplings = sample_couplings(3, 1.0, 7).unwrap();
        let rate = GlauberRate::new(1.3, 0.2);
        let sol = kolmogorov_oracle(
            &couplings,
            &rate,
            &uniform_initial(3),
            &[0.5, 1.0, 2.0, 4.0],
            1e-3,
        )
        .unwrap();
        for law in &sol.laws {
            assert_abs_diff_eq!(law.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert!(law.iter().all(|&p| p > -1e-14));
        }
    }

    #[test]
    fn single_spin_matches_two_state_closed_form() {
        // One spin with self-coupling: a two-state chain with up rate
        // r_plus = c(+1, J00) and down rate r_minus = c(-1, -J00); the
        // occupation of +1 relaxes exponentially to its stationary value.
        let couplings = sample_couplings(1, 1.0, 11).unwrap();
        let j00 = couplings.entry(0, 0);
        let rate = GlauberRate::new(0.9, -0.3);
        let r_plus = rate.rate(1, j00);
        let r_minus = rate.rate(-1, -j00);
        let p0 = vec![1.0, 0.0]; // start at sigma = +1
        let times = [0.3, 1.0, 2.5];
        let sol = kolmogorov_oracle(&couplings, &rate, &p0, &times, 1e-4).unwrap();
        let lambda = r_plus + r_minus;
        let pi_plus = r_minus / lambda;
        for (i, &t) in times.iter().enumerate() {
            let expect = pi_plus + (1.0 - pi_plus) * (-lambda * t).exp();
            assert_abs_diff_eq!(sol.laws[i][0], expect, epsilon = 1e-10);
        }
    }

    #[test]
    fn flat_rate_factorizes_over_spins() {
        // At constant rate 1/2 each spin flips independently; starting from
        // a point mass the law is the product of two-state laws with
        // agreement probability (1 + e^{-t}) / 2.
        let n = 3;
        let couplings = sample_couplings(n, 0.4, 5).unwrap();
        let rate = ConstantRate::new(0.5);
        let init_state = 0b101usize;
        let mut p0 = vec![0.0; 1 << n];
        p0[init_state] = 1.0;
        let t = 0.7;
        let sol = kolmogorov_oracle(&couplings, &rate, &p0, &[t], 1e-4).unwrap();
        let agree = 0.5 * (1.0 + (-t).exp());
        for s in 0..1usize << n {
            let mut expect = 1.0;
            for j in 0..n {
                expect *= if spin_of(s, j) == spin_of(init_state, j) {
                    agree
                } else {
                    1.0 - agree
                };
            }
            assert_abs_diff_eq!(sol.laws[0][s], expect, epsilon = 1e-10);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let couplings = sample_couplings(2, 1.0, 1).unwrap();
        let rate = GlauberRate::new(1.0, 0.0);
        let good = uniform_initial(2);
        assert!(kolmogorov_oracle(&couplings, &rate, &good[..3], &[1.0], 1e-3).is_err());
        assert!(kolmogorov_oracle(&couplings, &rate, &good, &[1.0, 0.5], 1e-3).is_err());
        assert!(kolmogorov_oracle(&couplings, &rate, &good, &[1.0], 0.0).is_err());
        let unnormalized = vec![0.5, 0.2, 0.2, 0.2];
        assert!(kolmogorov_oracle(&couplings, &rate, &unnormalized, &[1.0], 1e-3).is_err());
    }

    #[test]
    fn total_variation_basics() {
        assert_abs_diff_eq!(
            total_variation(&[1.0, 0.0], &[0.0, 1.0]),
            1.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            total_variation(&[0.5, 0.5], &[0.5, 0.5]),
            0.0,
            epsilon = 1e-15
        );
    }
}
