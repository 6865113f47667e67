//! Conditional-Gaussian structure of field increments over one observation
//! window.
//!
//! Conditionally on the spin path, the start-of-window fields `G` and the
//! field increments `F` (end minus start) are jointly Gaussian images of the
//! couplings. With replicas `i, m`, spins `j, k`, increment
//! `eta = sigma_end - sigma_start`, and coupling correlation `s`, the blocks
//! are
//!
//! * `Cov(G^{i,j}, G^{m,k}) = d(j,k) Ktil^{im} + (s/n) sigma^{i,k} sigma^{m,j}`,
//! * `Cov(F^{i,j}, F^{m,k}) = d(j,k) Etil^{im} + (s/n) eta^{i,k} eta^{m,j}`,
//! * `Cov(F^{i,j}, G^{m,k}) = d(j,k) Ctil^{im} + (s/n) eta^{i,k} sigma^{m,j}`,
//!
//! with `Ktil = sigma sigma^T / n`, `Etil = eta eta^T / n`,
//! `Ctil = eta sigma^T / n`, all spins taken at window start. The
//! conditional law of `F` given `G` has mean `Cross Cov(G)^+ G` and
//! covariance `Incr - Cross Cov(G)^+ Cross^T`.
//!
//! The same mean collapses, spin column by spin column, to an expression in
//! `m x m` window matrices: with `Ltil = -Ctil`, `kaptil` the start-minus-end
//! contraction against fields, `upstil = sigma G^T / n`, and
//! `Htil = Ktil^{-1}`,
//!
//! `mean^j = -Ltil Htil G^j - s kaptil Htil sig^j + s Ltil Htil upstil Htil sig^j`.
//!
//! This holds for every `s < 1` with arbitrary `G`, and at `s = 1` whenever
//! `G` is an exact field of a symmetric coupling matrix (then `upstil` is
//! symmetric and `G` lies in the range of the singular `Cov(G)`).
//!
//! Flat site index: `a = j * m + i` (spin-major). Inputs use the simulator
//! layout `i * n + j`; conversion happens here.

use crate::linalg::{matmul, matvec, sym_apply_spectral, sym_eigen};
use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GaussianError {
    #[error("window overlap matrix is singular (smallest eigenvalue {0})")]
    SingularOverlap(f64),
    #[error("window arrays must all have length n*m")]
    SizeMismatch,
}

/// One observation window of the spin path, simulator layout `i * n + j`.
#[derive(Debug, Clone, Copy)]
pub struct StepWindow<'a> {
    pub n: usize,
    pub m: usize,
    pub sigma_start: &'a [i8],
    pub sigma_end: &'a [i8],
    /// Fields at window start.
    pub fields_start: &'a [f64],
    pub s: f64,
}

impl<'a> StepWindow<'a> {
    fn check(&self) -> Result<(), GaussianError> {
        let sites = self.n * self.m;
        if self.sigma_start.len() != sites
            || self.sigma_end.len() != sites
            || self.fields_start.len() != sites
        {
            return Err(GaussianError::SizeMismatch);
        }
        Ok(())
    }

    fn sig(&self, i: usize, j: usize) -> f64 {
        f64::from(self.sigma_start[i * self.n + j])
    }

    fn eta(&self, i: usize, j: usize) -> f64 {
        f64::from(self.sigma_end[i * self.n + j]) - f64::from(self.sigma_start[i * self.n + j])
    }

    fn field(&self, i: usize, j: usize) -> f64 {
        self.fields_start[i * self.n + j]
    }

    /// Fraction of spins of each replica that differ across the window.
    pub fn flip_fractions(&self) -> Vec<f64> {
        (0..self.m)
            .map(|i| {
                (0..self.n)
                    .filter(|&j| self.sigma_start[i * self.n + j] != self.sigma_end[i * self.n + j])
                    .count() as f64
                    / self.n as f64
            })
            .collect()
    }
}

/// The three site-pair covariance blocks, row-major `nm x nm`, flat index
/// `a = j * m + i`. `cross` has increment rows and field columns.
#[derive(Debug, Clone)]
pub struct BlockMatrices {
    pub nm: usize,
    pub start: Vec<f64>,
    pub incr: Vec<f64>,
    pub cross: Vec<f64>,
}

pub fn assemble_blocks(w: &StepWindow) -> Result<BlockMatrices, GaussianError> {
    w.check()?;
    let (n, m) = (w.n, w.m);
    let nm = n * m;
    let inv_n = 1.0 / n as f64;
    // Replica-pair contractions over spins, at 1/n scale.
    let mut ktil = vec![0.0; m * m];
    let mut etil = vec![0.0; m * m];
    let mut ctil = vec![0.0; m * m];
    for i in 0..m {
        for im in 0..m {
            let mut sk = 0.0;
            let mut se = 0.0;
            let mut sc = 0.0;
            for l in 0..n {
                sk += w.sig(i, l) * w.sig(im, l);
                se += w.eta(i, l) * w.eta(im, l);
                sc += w.eta(i, l) * w.sig(im, l);
            }
            ktil[i * m + im] = sk * inv_n;
            etil[i * m + im] = se * inv_n;
            ctil[i * m + im] = sc * inv_n;
        }
    }
    let sn = w.s * inv_n;
    let mut start = vec![0.0; nm * nm];
    let mut incr = vec![0.0; nm * nm];
    let mut cross = vec![0.0; nm * nm];
    for j in 0..n {
        for i in 0..m {
            let row = j * m + i;
            for k in 0..n {
                for im in 0..m {
                    let col = k * m + im;
                    let diag = if j == k { 1.0 } else { 0.0 };
                    start[row * nm + col] =
                        diag * ktil[i * m + im] + sn * w.sig(i, k) * w.sig(im, j);
                    incr[row * nm + col] =
                        diag * etil[i * m + im] + sn * w.eta(i, k) * w.eta(im, j);
                    cross[row * nm + col] =
                        diag * ctil[i * m + im] + sn * w.eta(i, k) * w.sig(im, j);
                }
            }
        }
    }
    Ok(BlockMatrices {
        nm,
        start,
        incr,
        cross,
    })
}

/// Window moment matrices, `m x m` row-major; the start-minus-end sign makes
/// `l` and `kappa` small positive multiples of the flow moments for short
/// windows.
#[derive(Debug, Clone)]
pub struct StepMatrices {
    pub m: usize,
    /// `k[i][j] = n^{-1} sum_l sig_start^{i,l} sig_start^{j,l}`.
    pub k: Vec<f64>,
    /// `l[i][j] = n^{-1} sum_k sig_start^{j,k} (sig_start - sig_end)^{i,k}`.
    pub l: Vec<f64>,
    /// `kappa[i][j] = n^{-1} sum_k g^{j,k} (sig_start - sig_end)^{i,k}`.
    pub kappa: Vec<f64>,
    /// `upsilon[i][j] = n^{-1} sum_k sig_start^{i,k} g^{j,k}`.
    pub upsilon: Vec<f64>,
}

pub fn step_matrices(w: &StepWindow) -> Result<StepMatrices, GaussianError> {
    w.check()?;
    let m = w.m;
    let inv_n = 1.0 / w.n as f64;
    let mut k = vec![0.0; m * m];
    let mut l = vec![0.0; m * m];
    let mut kappa = vec![0.0; m * m];
    let mut upsilon = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            let mut sk = 0.0;
            let mut sl = 0.0;
            let mut skap = 0.0;
            let mut sup = 0.0;
            for kk in 0..w.n {
                let drop = -w.eta(i, kk); // start minus end
                sk += w.sig(i, kk) * w.sig(j, kk);
                sl += w.sig(j, kk) * drop;
                skap += w.field(j, kk) * drop;
                sup += w.sig(i, kk) * w.field(j, kk);
            }
            k[i * m + j] = sk * inv_n;
            l[i * m + j] = sl * inv_n;
            kappa[i * m + j] = skap * inv_n;
            upsilon[i * m + j] = sup * inv_n;
        }
    }
    Ok(StepMatrices {
        m,
        k,
        l,
        kappa,
        upsilon,
    })
}

/// Relative eigenvalue cutoff for pseudo-inverting the field covariance; the
/// block is exactly singular at `s = 1`, where field realizations still lie
/// in its range.
const PINV_RELATIVE_CUTOFF: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct DirectConditional {
    /// Conditional mean of the increments, flat spin-major layout.
    pub mean: Vec<f64>,
    pub eigen_min: f64,
    pub eigen_max: f64,
    /// Eigendirections dropped by the pseudo-inverse cutoff.
    pub dropped: usize,
}

fn fields_flat(w: &StepWindow) -> Vec<f64> {
    let mut g = vec![0.0; w.n * w.m];
    for j in 0..w.n {
        for i in 0..w.m {
            g[j * w.m + i] = w.field(i, j);
        }
    }
    g
}

/// Conditional mean by explicit pseudo-inversion of the field covariance.
pub fn conditional_mean_direct(w: &StepWindow) -> Result<DirectConditional, GaussianError> {
    let blocks = assemble_blocks(w)?;
    let nm = blocks.nm;
    let g = fields_flat(w);
    let cov = DMatrix::from_row_slice(nm, nm, &blocks.start);
    let eig = cov.symmetric_eigen();
    let eigen_max = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let eigen_min = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    let cutoff = eigen_max.abs() * PINV_RELATIVE_CUTOFF;
    let mut dropped = 0;
    let gv = nalgebra::DVector::from_column_slice(&g);
    let mut v = nalgebra::DVector::zeros(nm);
    for idx in 0..nm {
        let lambda = eig.eigenvalues[idx];
        if lambda <= cutoff {
            dropped += 1;
            continue;
        }
        let u = eig.eigenvectors.column(idx);
        let coef = u.dot(&gv) / lambda;
        v.axpy(coef, &u, 1.0);
    }
    let cross = DMatrix::from_row_slice(nm, nm, &blocks.cross);
    let mean = (cross * v).iter().cloned().collect();
    Ok(DirectConditional {
        mean,
        eigen_min,
        eigen_max,
        dropped,
    })
}

const OVERLAP_SINGULAR_TOL: f64 = 1e-9;

/// Conditional mean through the reduced window-matrix expression; errors if
/// the window overlap matrix is numerically singular (collinear replicas).
pub fn conditional_mean_reduced(w: &StepWindow) -> Result<Vec<f64>, GaussianError> {
    let sm = step_matrices(w)?;
    let m = w.m;
    let eig = sym_eigen(&sm.k, m);
    if eig.values[0] < OVERLAP_SINGULAR_TOL {
        return Err(GaussianError::SingularOverlap(eig.values[0]));
    }
    let h = sym_apply_spectral(&eig, |v| 1.0 / v);
    let lh = matmul(&sm.l, &h, m);
    let kap_h = matmul(&sm.kappa, &h, m);
    let lhuh = matmul(&lh, &matmul(&sm.upsilon, &h, m), m);
    let mut out = vec![0.0; w.n * m];
    let mut gcol = vec![0.0; m];
    let mut scol = vec![0.0; m];
    for j in 0..w.n {
        for i in 0..m {
            gcol[i] = w.field(i, j);
            scol[i] = w.sig(i, j);
        }
        let t1 = matvec(&lh, &gcol, m);
        let t2 = matvec(&kap_h, &scol, m);
        let t3 = matvec(&lhuh, &scol, m);
        for i in 0..m {
            out[j * m + i] = -t1[i] - w.s * t2[i] + w.s * t3[i];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ConditionalCovariance {
    /// Symmetrized `Incr - Cross Cov(G)^+ Cross^T`, row-major `nm x nm`.
    pub cov: Vec<f64>,
    pub eigen_min: f64,
    pub dropped: usize,
}

pub fn conditional_covariance(w: &StepWindow) -> Result<ConditionalCovariance, GaussianError> {
    let blocks = assemble_blocks(w)?;
    let nm = blocks.nm;
    let cov = DMatrix::from_row_slice(nm, nm, &blocks.start);
    let cross = DMatrix::from_row_slice(nm, nm, &blocks.cross);
    let incr = DMatrix::from_row_slice(nm, nm, &blocks.incr);
    let eig = cov.symmetric_eigen();
    let eigen_max = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let cutoff = eigen_max.abs() * PINV_RELATIVE_CUTOFF;
    let mut dropped = 0;
    let mut pinv = DMatrix::zeros(nm, nm);
    for idx in 0..nm {
        let lambda = eig.eigenvalues[idx];
        if lambda <= cutoff {
            dropped += 1;
            continue;
        }
        let u = eig.eigenvectors.column(idx);
        pinv += u * u.transpose() / lambda;
    }
    let r = &incr - &cross * pinv * cross.transpose();
    let sym = (&r + r.transpose()) * 0.5;
    let eigen_min = sym
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::MAX, f64::min);
    Ok(ConditionalCovariance {
        cov: sym.transpose().iter().cloned().collect(),
        eigen_min,
        dropped,
    })
}

/// One checked inequality: observed value against its bound.
#[derive(Debug, Clone, Copy)]
pub struct BoundCheck {
    pub value: f64,
    pub bound: f64,
    pub holds: bool,
}

fn check(value: f64, bound: f64) -> BoundCheck {
    BoundCheck {
        value,
        bound,
        holds: value <= bound + 1e-10 * bound.abs().max(1.0),
    }
}

/// Spectral norms of the assembled blocks against bounds provable from their
/// structure, with `U = sup_i` flip fraction:
///
/// * conditional covariance norm is at most the increment block norm,
/// * increment block norm is at most `4 m (1 + s) U`,
/// * cross block norm is at most `|Ltil| + 2 s m sqrt(U)`,
/// * field block spectrum sits in `[(1 - s) lambda_min(Ktil), m (1 + s)]`
///   and reaches at least `lambda_max(Ktil)`.
#[derive(Debug, Clone)]
pub struct NormBoundReport {
    pub flip_sup: f64,
    pub incr_norm: BoundCheck,
    pub cross_norm: BoundCheck,
    pub cond_cov_norm: BoundCheck,
    pub start_upper: BoundCheck,
    pub start_reaches_overlap: BoundCheck,
    pub start_lower: BoundCheck,
    pub all_hold: bool,
}

pub fn norm_bounds_check(w: &StepWindow) -> Result<NormBoundReport, GaussianError> {
    let blocks = assemble_blocks(w)?;
    let nm = blocks.nm;
    let m = w.m;
    let flip_sup = w
        .flip_fractions()
        .into_iter()
        .fold(0.0f64, f64::max);
    let sym_norm = |data: &[f64]| -> (f64, f64) {
        let eig = DMatrix::from_row_slice(nm, nm, data).symmetric_eigen();
        let hi = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
        let lo = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
        (hi, lo)
    };
    let (incr_hi, _) = sym_norm(&blocks.incr);
    let (start_hi, start_lo) = sym_norm(&blocks.start);
    let cross_mat = DMatrix::from_row_slice(nm, nm, &blocks.cross);
    let gram = cross_mat.transpose() * &cross_mat;
    let cross_norm_val = gram
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::MIN, f64::max)
        .max(0.0)
        .sqrt();
    let sm = step_matrices(w)?;
    let ltil_gram = {
        let lm = DMatrix::from_row_slice(m, m, &sm.l);
        (lm.transpose() * &lm)
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::MIN, f64::max)
            .max(0.0)
            .sqrt()
    };
    let ktil_eig = sym_eigen(&sm.k, m);
    let ktil_min = ktil_eig.values[0];
    let ktil_max = ktil_eig.values[m - 1];
    let cond = conditional_covariance(w)?;
    let (cond_hi, _) = {
        let eig = DMatrix::from_row_slice(nm, nm, &cond.cov).symmetric_eigen();
        (
            eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max),
            0.0,
        )
    };
    let mf = m as f64;
    let incr_norm = check(incr_hi, 4.0 * mf * (1.0 + w.s) * flip_sup);
    let cross_norm = check(cross_norm_val, ltil_gram + 2.0 * w.s * mf * flip_sup.sqrt());
    let cond_cov_norm = check(cond_hi.max(0.0), incr_hi.max(0.0));
    let start_upper = check(start_hi, mf * (1.0 + w.s));
    // Lower-bound style checks recast as value <= bound.
    let start_reaches_overlap = check(ktil_max, start_hi);
    let start_lower = check((1.0 - w.s) * ktil_min, start_lo + 1e-10);
    let all_hold = incr_norm.holds
        && cross_norm.holds
        && cond_cov_norm.holds
        && start_upper.holds
        && start_reaches_overlap.holds
        && start_lower.holds;
    Ok(NormBoundReport {
        flip_sup,
        incr_norm,
        cross_norm,
        cond_cov_norm,
        start_upper,
        start_reaches_overlap,
        start_lower,
        all_hold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::couplings::sample_couplings;
    use crate::rng::{stream, uniform_f64, NormalSource};
    use approx::assert_abs_diff_eq;

    fn random_window(
        n: usize,
        m: usize,
        s: f64,
        flip_prob: f64,
        seed: u64,
    ) -> (Vec<i8>, Vec<i8>, Vec<f64>) {
        let mut rng = stream(seed, "gaussian-test", 0);
        let sites = n * m;
        let start: Vec<i8> = (0..sites)
            .map(|_| if uniform_f64(&mut rng) < 0.5 { 1 } else { -1 })
            .collect();
        let end: Vec<i8> = start
            .iter()
            .map(|&v| {
                if uniform_f64(&mut rng) < flip_prob {
                    -v
                } else {
                    v
                }
            })
            .collect();
        let fields: Vec<f64> = (0..sites)
            .map(|_| uniform_f64(&mut rng) * 2.0 - 1.0)
            .collect();
        let _ = s;
        (start, end, fields)
    }

    #[test]
    fn direct_and_reduced_means_agree_for_free_fields() {
        // For s < 1 the identity holds with arbitrary field values.
        for (case, &s) in [0.0, 0.37, 0.8].iter().enumerate() {
            let (n, m) = (10, 2);
            let (start, end, fields) = random_window(n, m, s, 0.3, 40 + case as u64);
            let w = StepWindow {
                n,
                m,
                sigma_start: &start,
                sigma_end: &end,
                fields_start: &fields,
                s,
            };
            let direct = conditional_mean_direct(&w).unwrap();
            let reduced = conditional_mean_reduced(&w).unwrap();
            assert_eq!(direct.dropped, 0, "s < 1 covariance must be regular");
            let err = direct
                .mean
                .iter()
                .zip(&reduced)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-11, "s = {s}: direct vs reduced {err}");
        }
    }

    #[test]
    fn direct_and_reduced_means_agree_for_exact_symmetric_fields() {
        // At s = 1 the field covariance is singular; realizable fields lie
        // in its range and the identity persists through the pseudo-inverse.
        let (n, m) = (12, 3);
        let s = 1.0;
        let couplings = sample_couplings(n, s, 77).unwrap();
        let (start, end, _) = random_window(n, m, s, 0.25, 78);
        let fields = couplings.field(&start, m);
        let w = StepWindow {
            n,
            m,
            sigma_start: &start,
            sigma_end: &end,
            fields_start: &fields,
            s,
        };
        let direct = conditional_mean_direct(&w).unwrap();
        assert!(direct.dropped > 0, "s = 1 covariance should be singular");
        let reduced = conditional_mean_reduced(&w).unwrap();
        let err = direct
            .mean
            .iter()
            .zip(&reduced)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "direct vs reduced at s = 1: {err}");
    }

    #[test]
    fn frozen_window_has_zero_increment_structure() {
        let (n, m) = (8, 2);
        let (start, _, fields) = random_window(n, m, 0.5, 0.0, 3);
        let w = StepWindow {
            n,
            m,
            sigma_start: &start,
            sigma_end: &start,
            fields_start: &fields,
            s: 0.5,
        };
        let blocks = assemble_blocks(&w).unwrap();
        assert!(blocks.incr.iter().all(|&v| v == 0.0));
        assert!(blocks.cross.iter().all(|&v| v == 0.0));
        let direct = conditional_mean_direct(&w).unwrap();
        assert!(direct.mean.iter().all(|&v| v == 0.0));
        let cond = conditional_covariance(&w).unwrap();
        assert!(cond.cov.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn scalar_case_matches_closed_form() {
        // n = m = 1: Cov(G) = 1 + s, Cross = (1 + s) eta sig, so the
        // conditional mean is eta sig g for any s < 1.
        for &s in &[0.0, 0.4, 0.9] {
            let start = [1i8];
            let end = [-1i8];
            let g = [0.63];
            let w = StepWindow {
                n: 1,
                m: 1,
                sigma_start: &start,
                sigma_end: &end,
                fields_start: &g,
                s,
            };
            let eta = -2.0;
            let expect = eta * 1.0 * g[0];
            let direct = conditional_mean_direct(&w).unwrap();
            assert_abs_diff_eq!(direct.mean[0], expect, epsilon = 1e-13);
            let reduced = conditional_mean_reduced(&w).unwrap();
            assert_abs_diff_eq!(reduced[0], expect, epsilon = 1e-13);
            let blocks = assemble_blocks(&w).unwrap();
            assert_abs_diff_eq!(blocks.start[0], 1.0 + s, epsilon = 1e-15);
            assert_abs_diff_eq!(blocks.incr[0], 4.0 * (1.0 + s), epsilon = 1e-15);
            assert_abs_diff_eq!(blocks.cross[0], (1.0 + s) * eta, epsilon = 1e-15);
            // Conditional variance: incr - cross^2 / start = 0 here (the
            // increment is a deterministic multiple of the field).
            let cond = conditional_covariance(&w).unwrap();
            assert!(cond.cov[0].abs() < 1e-12);
        }
    }

    #[test]
    fn blocks_match_monte_carlo_covariances() {
        // Draw couplings repeatedly for fixed spins; empirical covariances
        // of fields and increments must match the assembled blocks, and the
        // regression residual must be uncorrelated with the fields with
        // covariance matching the conditional covariance.
        let n = 2;
        let m = 1;
        let s = 0.6;
        let start = [1i8, -1];
        let end = [-1i8, -1];
        let trials = 600_000usize;
        let nm = n * m;
        let mut mean_g = vec![0.0; nm];
        let mut mean_f = vec![0.0; nm];
        let mut cov_gg = vec![0.0; nm * nm];
        let mut cov_ff = vec![0.0; nm * nm];
        let mut cov_fg = vec![0.0; nm * nm];
        for t in 0..trials {
            let c = sample_couplings(n, s, 1_000_000 + t as u64).unwrap();
            let g = c.field(&start, m);
            let f_end = c.field(&end, m);
            // Simulator layout i*n+j with m = 1 equals flat j*m+i.
            for a in 0..nm {
                let fa = f_end[a] - g[a];
                mean_g[a] += g[a];
                mean_f[a] += fa;
                for b in 0..nm {
                    let fb = f_end[b] - g[b];
                    cov_gg[a * nm + b] += g[a] * g[b];
                    cov_ff[a * nm + b] += fa * fb;
                    cov_fg[a * nm + b] += fa * g[b];
                }
            }
        }
        let inv = 1.0 / trials as f64;
        for v in [&mut mean_g, &mut mean_f, &mut cov_gg, &mut cov_ff, &mut cov_fg] {
            v.iter_mut().for_each(|e| *e *= inv);
        }
        let w = StepWindow {
            n,
            m,
            sigma_start: &start,
            sigma_end: &end,
            fields_start: &[0.0; 2], // unused by assemble_blocks covariances
            s,
        };
        let blocks = assemble_blocks(&w).unwrap();
        let tol = 1.2e-2;
        for a in 0..nm {
            assert!(mean_g[a].abs() < tol);
            assert!(mean_f[a].abs() < tol);
            for b in 0..nm {
                assert!(
                    (cov_gg[a * nm + b] - blocks.start[a * nm + b]).abs() < tol,
                    "start block ({a},{b})"
                );
                assert!(
                    (cov_ff[a * nm + b] - blocks.incr[a * nm + b]).abs() < tol,
                    "incr block ({a},{b})"
                );
                assert!(
                    (cov_fg[a * nm + b] - blocks.cross[a * nm + b]).abs() < tol,
                    "cross block ({a},{b})"
                );
            }
        }
        let cond = conditional_covariance(&w).unwrap();
        // Residual covariance: Cov(F) - Cross Cov(G)^{-1} Cross^T from the
        // empirical matrices, compared entrywise with the analytic one.
        let gg = DMatrix::from_row_slice(nm, nm, &cov_gg);
        let fg = DMatrix::from_row_slice(nm, nm, &cov_fg);
        let ff = DMatrix::from_row_slice(nm, nm, &cov_ff);
        let emp_cond = &ff - &fg * gg.try_inverse().unwrap() * fg.transpose();
        for a in 0..nm {
            for b in 0..nm {
                assert!(
                    (emp_cond[(a, b)] - cond.cov[a * nm + b]).abs() < 3.0 * tol,
                    "conditional covariance ({a},{b})"
                );
            }
        }
    }

    #[test]
    fn norm_bounds_hold_on_random_windows() {
        let mut checked = 0;
        for (case, &(s, flip)) in [(0.0, 0.2), (0.5, 0.35), (0.9, 0.05), (1.0, 0.25)]
            .iter()
            .enumerate()
        {
            let (n, m) = (14, 2);
            let (start, end, free_fields) = random_window(n, m, s, flip, 90 + case as u64);
            // At s = 1 use exact symmetric fields; elsewhere free values.
            let fields = if s == 1.0 {
                sample_couplings(n, s, 91).unwrap().field(&start, m)
            } else {
                free_fields
            };
            let w = StepWindow {
                n,
                m,
                sigma_start: &start,
                sigma_end: &end,
                fields_start: &fields,
                s,
            };
            let rep = norm_bounds_check(&w).unwrap();
            assert!(
                rep.all_hold,
                "bounds failed at s = {s}: {rep:?}"
            );
            checked += 1;
        }
        assert_eq!(checked, 4);
    }

    #[test]
    fn collinear_replicas_are_rejected_by_reduced_path() {
        let n = 6;
        let m = 2;
        let mut rng = stream(5, "gaussian-test", 1);
        let row: Vec<i8> = (0..n)
            .map(|_| if uniform_f64(&mut rng) < 0.5 { 1 } else { -1 })
            .collect();
        let mut start = row.clone();
        start.extend_from_slice(&row); // second replica identical
        let end = start.clone();
        let mut src = NormalSource::new(stream(5, "gaussian-test", 2));
        let fields: Vec<f64> = (0..n * m).map(|_| src.draw()).collect();
        let w = StepWindow {
            n,
            m,
            sigma_start: &start,
            sigma_end: &end,
            fields_start: &fields,
            s: 0.5,
        };
        assert!(matches!(
            conditional_mean_reduced(&w),
            Err(GaussianError::SingularOverlap(_))
        ));
    }

    #[test]
    fn step_matrices_by_hand() {
        // n = 2, m = 1, start (+1, -1), end (-1, -1), fields (0.5, -0.25).
        let start = [1i8, -1];
        let end = [-1i8, -1];
        let fields = [0.5, -0.25];
        let w = StepWindow {
            n: 2,
            m: 1,
            sigma_start: &start,
            sigma_end: &end,
            fields_start: &fields,
            s: 0.7,
        };
        let sm = step_matrices(&w).unwrap();
        // k = (1*1 + (-1)(-1)) / 2 = 1
        assert_abs_diff_eq!(sm.k[0], 1.0, epsilon = 1e-15);
        // drop = start - end = (2, 0); l = (1*2 + (-1)*0) / 2 = 1
        assert_abs_diff_eq!(sm.l[0], 1.0, epsilon = 1e-15);
        // kappa = (0.5*2 + (-0.25)*0) / 2 = 0.5
        assert_abs_diff_eq!(sm.kappa[0], 0.5, epsilon = 1e-15);
        // upsilon = (1*0.5 + (-1)(-0.25)) / 2 = 0.375
        assert_abs_diff_eq!(sm.upsilon[0], 0.375, epsilon = 1e-15);
    }
}
