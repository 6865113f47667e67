//! Gaussian coupling matrices and the fields they induce.
//!
//! The couplings are centered Gaussians with
//! `E[J_{jk} J_{lm}] = d(j,l) d(k,m) + s d(j,m) d(k,l)`:
//! unit-variance entries, correlation `s` between `J_{jk}` and `J_{kj}`, and
//! diagonal variance `1 + s`. Sampling realizes this as
//! `J_{jk} = sqrt(s) S_{jk} + sqrt(1-s) A_{jk}` off the diagonal, with `S`
//! symmetric and `A` independent entries; `s = 1` therefore produces a
//! bit-exactly symmetric matrix.
//!
//! The field of replica `i` at site `j` is `G_{i,j} = N^{-1/2} sum_k J_{jk} sigma_{i,k}`.

use crate::model::EmpiricalMeasure;
use crate::rng::{stream, NormalSource};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// Magic bytes of the binary dump format.
const MAGIC: [u8; 4] = *b"GFJ1";

/// A sampled coupling matrix, row-major: `data[j * n + k] = J_{jk}`.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingMatrix {
    n: usize,
    s: f64,
    data: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum CouplingError {
    #[error("symmetry parameter must lie in [0, 1], got {0}")]
    BadSymmetry(f64),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes in coupling file")]
    BadMagic,
    #[error("coupling file truncated or oversized: expected {expected} data bytes, found {found}")]
    BadLength { expected: usize, found: usize },
    #[error("symmetry parameter in file is invalid: {0}")]
    BadStoredSymmetry(f64),
}

/// Draw a coupling matrix for `n` sites with symmetry parameter `s`.
///
/// Draw order (fixed, part of the reproducibility contract): diagonal entries
/// `j = 0..n`, then for each pair `j < k` the symmetric part `S_{jk}` (if
/// `s > 0`) followed by `A_{jk}, A_{kj}` (if `s < 1`).
pub fn sample_couplings(n: usize, s: f64, seed: u64) -> Result<CouplingMatrix, CouplingError> {
    if !(0.0..=1.0).contains(&s) {
        return Err(CouplingError::BadSymmetry(s));
    }
    let mut src = NormalSource::new(stream(seed, "couplings", 0));
    let mut data = vec![0.0; n * n];
    let diag_sd = (1.0 + s).sqrt();
    for j in 0..n {
        data[j * n + j] = diag_sd * src.draw();
    }
    let sym_sd = s.sqrt();
    let asym_sd = (1.0 - s).sqrt();
    for j in 0..n {
        for k in j + 1..n {
            let mut jk = 0.0;
            let mut kj = 0.0;
            if s > 0.0 {
                let shared = sym_sd * src.draw();
                jk += shared;
                kj += shared;
            }
            if s < 1.0 {
                jk += asym_sd * src.draw();
                kj += asym_sd * src.draw();
            }
            data[j * n + k] = jk;
            data[k * n + j] = kj;
        }
    }
    Ok(CouplingMatrix { n, s, data })
}

impl CouplingMatrix {
    /// Wrap raw entries (row-major, length `n * n`).
    pub fn from_raw(n: usize, s: f64, data: Vec<f64>) -> Result<Self, CouplingError> {
        if !(0.0..=1.0).contains(&s) {
            return Err(CouplingError::BadSymmetry(s));
        }
        assert_eq!(data.len(), n * n);
        Ok(Self { n, s, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn entry(&self, j: usize, k: usize) -> f64 {
        self.data[j * self.n + k]
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    /// Fields for all replicas: `out[i * n + j] = n^{-1/2} sum_k J_{jk} sigma[i * n + k]`.
    pub fn field(&self, sigma: &[i8], m: usize) -> Vec<f64> {
        let n = self.n;
        assert_eq!(sigma.len(), n * m);
        let inv_sqrt_n = 1.0 / (n as f64).sqrt();
        let mut out = vec![0.0; n * m];
        for i in 0..m {
            let spins = &sigma[i * n..(i + 1) * n];
            for j in 0..n {
                let row = &self.data[j * n..(j + 1) * n];
                let mut acc = 0.0;
                for k in 0..n {
                    acc += row[k] * f64::from(spins[k]);
                }
                out[i * n + j] = acc * inv_sqrt_n;
            }
        }
        out
    }

    /// Update fields of replica `i` in place after site `j` of that replica
    /// flipped away from `old_spin`:
    /// `G_{i,l} <- G_{i,l} - 2 old_spin n^{-1/2} J_{lj}` for every `l`.
    pub fn field_flip_update(&self, fields: &mut [f64], i: usize, j: usize, old_spin: i8) {
        let n = self.n;
        debug_assert!(j < n && fields.len() >= (i + 1) * n);
        let factor = -2.0 * f64::from(old_spin) / (n as f64).sqrt();
        let row = &mut fields[i * n..(i + 1) * n];
        for (l, f) in row.iter_mut().enumerate() {
            *f += factor * self.data[l * n + j];
        }
    }

    /// Largest singular value of `n^{-1/2} J`, by power iteration on
    /// `(n^{-1/2} J)^T (n^{-1/2} J)` with a fixed internal start vector:
    /// at most 200 iterations, relative tolerance `1e-8`.
    pub fn operator_norm_scaled(&self) -> f64 {
        let n = self.n;
        if n == 0 {
            return 0.0;
        }
        let mut src = NormalSource::new(stream(0x6f70_6e6f_726d, "opnorm-init", 0));
        let mut v: Vec<f64> = (0..n).map(|_| src.draw()).collect();
        normalize(&mut v);
        let mut w = vec![0.0; n];
        let mut u = vec![0.0; n];
        let mut lambda_prev = 0.0;
        let inv_n = 1.0 / n as f64;
        for _ in 0..200 {
            // w = J v  (rows of J dotted with v)
            for j in 0..n {
                let row = &self.data[j * n..(j + 1) * n];
                w[j] = row.iter().zip(&v).map(|(a, b)| a * b).sum();
            }
            // u = J^T w, accumulated row-wise for cache friendliness.
            u.iter_mut().for_each(|x| *x = 0.0);
            for j in 0..n {
                let wj = w[j];
                if wj == 0.0 {
                    continue;
                }
                let row = &self.data[j * n..(j + 1) * n];
                for k in 0..n {
                    u[k] += wj * row[k];
                }
            }
            // u now holds J^T J v; include both n^{-1/2} scalings.
            u.iter_mut().for_each(|x| *x *= inv_n);
            let lambda: f64 = v.iter().zip(&u).map(|(a, b)| a * b).sum();
            let norm = normalize(&mut u);
            if norm == 0.0 {
                return 0.0;
            }
            std::mem::swap(&mut v, &mut u);
            if (lambda - lambda_prev).abs() <= 1e-8 * lambda.abs().max(1e-300) {
                return lambda.max(0.0).sqrt();
            }
            lambda_prev = lambda;
        }
        lambda_prev.max(0.0).sqrt()
    }

    /// Binary dump. 16-byte header: magic `GFJ1`, `u32` little-endian `n`,
    /// `u32` reserved (zero), `f32` little-endian symmetry parameter; then the
    /// `n * n` entries as little-endian `f64`, row-major.
    pub fn save(&self, path: &Path) -> Result<(), CouplingError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&MAGIC)?;
        f.write_all(&(self.n as u32).to_le_bytes())?;
        f.write_all(&0u32.to_le_bytes())?;
        f.write_all(&(self.s as f32).to_le_bytes())?;
        for &x in &self.data {
            f.write_all(&x.to_le_bytes())?;
        }
        f.flush()?;
        Ok(())
    }

    /// Load a matrix written by [`CouplingMatrix::save`].
    pub fn load(path: &Path) -> Result<Self, CouplingError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut header = [0u8; 16];
        f.read_exact(&mut header)?;
        if header[0..4] != MAGIC {
            return Err(CouplingError::BadMagic);
        }
        let n = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let s = f64::from(f32::from_le_bytes(header[12..16].try_into().unwrap()));
        if !(0.0..=1.0).contains(&s) {
            return Err(CouplingError::BadStoredSymmetry(s));
        }
        let expected = n * n * 8;
        let mut bytes = Vec::with_capacity(expected);
        f.read_to_end(&mut bytes)?;
        if bytes.len() != expected {
            return Err(CouplingError::BadLength {
                expected,
                found: bytes.len(),
            });
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { n, s, data })
    }
}

/// Largest per-replica second moment of the fields of a measure:
/// `max_i n^{-1} sum_j x_{i,j}^2`. When the scaled coupling norm is below 3
/// this stays below 3 along simulated trajectories; the norm event test
/// checks exactly that.
pub fn max_field_second_moment(measure: &EmpiricalMeasure) -> f64 {
    let m = measure.m;
    let n = measure.len().max(1) as f64;
    (0..m)
        .map(|i| measure.atoms.iter().map(|a| a.x[i] * a.x[i]).sum::<f64>() / n)
        .fold(0.0, f64::max)
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rejects_bad_symmetry() {
        assert!(sample_couplings(4, 1.2, 0).is_err());
        assert!(sample_couplings(4, -0.1, 0).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let a = sample_couplings(12, 0.5, 9).unwrap();
        let b = sample_couplings(12, 0.5, 9).unwrap();
        let c = sample_couplings(12, 0.5, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn symmetric_case_is_bit_exact() {
        let j = sample_couplings(40, 1.0, 3).unwrap();
        for a in 0..40 {
            for b in 0..40 {
                assert_eq!(j.entry(a, b).to_bits(), j.entry(b, a).to_bits());
            }
        }
    }

    #[test]
    fn entry_moments_match_law() {
        // Aggregate over many small matrices: off-diagonal variance 1,
        // diagonal variance 1 + s, cross-correlation s.
        for &s in &[0.0, 0.5, 1.0] {
            let mut sum_off = 0.0;
            let mut sum_off2 = 0.0;
            let mut sum_cross = 0.0;
            let mut sum_diag2 = 0.0;
            let mut n_off = 0.0;
            let mut n_diag = 0.0;
            for seed in 0..400 {
                let j = sample_couplings(20, s, seed).unwrap();
                for a in 0..20 {
                    sum_diag2 += j.entry(a, a) * j.entry(a, a);
                    n_diag += 1.0;
                    for b in a + 1..20 {
                        sum_off += j.entry(a, b) + j.entry(b, a);
                        sum_off2 += j.entry(a, b) * j.entry(a, b) + j.entry(b, a) * j.entry(b, a);
                        sum_cross += j.entry(a, b) * j.entry(b, a);
                        n_off += 1.0;
                    }
                }
            }
            let mean = sum_off / (2.0 * n_off);
            let var = sum_off2 / (2.0 * n_off);
            let cross = sum_cross / n_off;
            let diag_var = sum_diag2 / n_diag;
            assert!(mean.abs() < 0.01, "s={s} mean {mean}");
            assert!((var - 1.0).abs() < 0.02, "s={s} var {var}");
            assert!((cross - s).abs() < 0.02, "s={s} cross {cross}");
            assert!((diag_var - (1.0 + s)).abs() < 0.05, "s={s} diag {diag_var}");
        }
    }

    #[test]
    fn field_matches_hand_example() {
        // N = 2, one replica, sigma = (+1, -1):
        // G_0 = (J_00 - J_01)/sqrt(2), G_1 = (J_10 - J_11)/sqrt(2).
        let j = CouplingMatrix::from_raw(2, 0.0, vec![0.3, -1.2, 0.7, 2.0]).unwrap();
        let g = j.field(&[1, -1], 1);
        let r = 2.0f64.sqrt();
        assert_abs_diff_eq!(g[0], (0.3 + 1.2) / r, epsilon = 1e-15);
        assert_abs_diff_eq!(g[1], (0.7 - 2.0) / r, epsilon = 1e-15);
    }

    #[test]
    fn flip_update_equals_recomputation() {
        let n = 17;
        let m = 3;
        let j = sample_couplings(n, 0.5, 21).unwrap();
        let mut rng = crate::rng::stream(22, "couplings-test", 0);
        let mut sigma: Vec<i8> = (0..n * m)
            .map(|_| if crate::rng::uniform_f64(&mut rng) < 0.5 { 1 } else { -1 })
            .collect();
        let mut fields = j.field(&sigma, m);
        for _ in 0..200 {
            let site = (crate::rng::uniform_f64(&mut rng) * (n * m) as f64) as usize;
            let (i, jj) = (site / n, site % n);
            let old = sigma[site];
            sigma[site] = -old;
            j.field_flip_update(&mut fields, i, jj, old);
        }
        let fresh = j.field(&sigma, m);
        let drift = fields
            .iter()
            .zip(&fresh)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(drift < 1e-12, "drift {drift}");
    }

    #[test]
    fn operator_norm_exact_on_diagonal_matrix() {
        // J = diag(c * sqrt(n)) has scaled norm exactly c.
        let n = 8;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 2.5 * (n as f64).sqrt() * if i == 3 { 1.0 } else { 0.4 };
        }
        let j = CouplingMatrix::from_raw(n, 0.0, data).unwrap();
        assert_abs_diff_eq!(j.operator_norm_scaled(), 2.5, epsilon = 1e-6);
    }

    #[test]
    fn operator_norm_near_two_for_large_symmetric_matrices() {
        // Semicircle edge: scaled norm approaches 2 with small fluctuations.
        let j = sample_couplings(600, 1.0, 77).unwrap();
        let norm = j.operator_norm_scaled();
        assert!((norm - 2.0).abs() < 0.2, "norm {norm}");
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.gfj");
        let j = sample_couplings(9, 0.5, 5).unwrap();
        j.save(&path).unwrap();
        let loaded = CouplingMatrix::load(&path).unwrap();
        assert_eq!(j.n(), loaded.n());
        assert_eq!(j.raw(), loaded.raw());
        assert_abs_diff_eq!(j.s(), loaded.s(), epsilon = 1e-7);

        let meta = std::fs::metadata(&path).unwrap();
        assert_eq!(meta.len(), 16 + 81 * 8);
    }

    #[test]
    fn load_rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.gfj");
        std::fs::write(&path, b"NOPE0000000000000000").unwrap();
        assert!(matches!(
            CouplingMatrix::load(&path),
            Err(CouplingError::BadMagic)
        ));

        let path2 = dir.path().join("short.gfj");
        let j = sample_couplings(4, 0.0, 1).unwrap();
        j.save(&path2).unwrap();
        let mut bytes = std::fs::read(&path2).unwrap();
        bytes.truncate(bytes.len() - 8);
        std::fs::write(&path2, bytes).unwrap();
        assert!(matches!(
            CouplingMatrix::load(&path2),
            Err(CouplingError::BadLength { .. })
        ));
    }
}
