//! Small dense symmetric linear algebra.
//!
//! The moment matrices of this crate are M x M with M at most 8, so the
//! eigensolver is a cyclic Jacobi iteration: slow asymptotically, robust and
//! dependency-free in the regime that matters here. Matrices are row-major
//! `Vec<f64>` slices of length `n * n`.

/// Eigendecomposition of a symmetric matrix. `values` ascending,
/// `vectors[r * n + c]` is component `r` of the eigenvector for `values[c]`.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub n: usize,
    pub values: Vec<f64>,
    pub vectors: Vec<f64>,
}

/// Cyclic Jacobi eigensolver for symmetric input. Sweeps until all
/// off-diagonal mass is annihilated to `1e-14` relative or 50 sweeps pass.
pub fn sym_eigen(a: &[f64], n: usize) -> SymEigen {
    assert_eq!(a.len(), n * n, "matrix size mismatch");
    let mut m = a.to_vec();
    let mut v = identity(n);
    if n > 1 {
        let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        for _sweep in 0..50 {
            let mut off = 0.0;
            for p in 0..n - 1 {
                for q in p + 1..n {
                    off += m[p * n + q] * m[p * n + q];
                }
            }
            if off.sqrt() <= 1e-14 * scale {
                break;
            }
            for p in 0..n - 1 {
                for q in p + 1..n {
                    let apq = m[p * n + q];
                    if apq == 0.0 {
                        continue;
                    }
                    let app = m[p * n + p];
                    let aqq = m[q * n + q];
                    let theta = (aqq - app) / (2.0 * apq);
                    // Stable tangent of the rotation angle.
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let mkp = m[k * n + p];
                        let mkq = m[k * n + q];
                        m[k * n + p] = c * mkp - s * mkq;
                        m[k * n + q] = s * mkp + c * mkq;
                    }
                    for k in 0..n {
                        let mpk = m[p * n + k];
                        let mqk = m[q * n + k];
                        m[p * n + k] = c * mpk - s * mqk;
                        m[q * n + k] = s * mpk + c * mqk;
                    }
                    for k in 0..n {
                        let vkp = v[k * n + p];
                        let vkq = v[k * n + q];
                        v[k * n + p] = c * vkp - s * vkq;
                        v[k * n + q] = s * vkp + c * vkq;
                    }
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[i * n + i].partial_cmp(&m[j * n + j]).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (c, &i) in order.iter().enumerate() {
        for r in 0..n {
            vectors[r * n + c] = v[r * n + i];
        }
    }
    SymEigen { n, values, vectors }
}

/// `V diag(f(lambda)) V^T` for a symmetric matrix given by its decomposition.
/// Used to form inverses and shifted inverses on the same eigenbasis.
pub fn sym_apply_spectral(eig: &SymEigen, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let n = eig.n;
    let mut out = vec![0.0; n * n];
    for c in 0..n {
        let fv = f(eig.values[c]);
        for r in 0..n {
            let vr = eig.vectors[r * n + c];
            for r2 in 0..n {
                out[r * n + r2] += fv * vr * eig.vectors[r2 * n + c];
            }
        }
    }
    out
}

pub fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

pub fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

pub fn matvec(a: &[f64], x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            acc += a[i * n + j] * x[j];
        }
        out[i] = acc;
    }
    out
}

pub fn transpose(a: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[j * n + i] = a[i * n + j];
        }
    }
    out
}

/// Largest absolute entry, for max-norm comparisons in tests and checks.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Spectral norm of a symmetric matrix.
pub fn sym_spectral_norm(a: &[f64], n: usize) -> f64 {
    sym_eigen(a, n)
        .values
        .iter()
        .map(|v| v.abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn eigen_of_diagonal() {
        let a = vec![3.0, 0.0, 0.0, -1.0];
        let e = sym_eigen(&a, 2);
        assert_abs_diff_eq!(e.values[0], -1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(e.values[1], 3.0, epsilon = 1e-14);
    }

    #[test]
    fn eigen_of_known_2x2() {
        // [[2,1],[1,2]] has eigenvalues 1 and 3 with vectors (1,-1), (1,1).
        let a = vec![2.0, 1.0, 1.0, 2.0];
        let e = sym_eigen(&a, 2);
        assert_abs_diff_eq!(e.values[0], 1.0, epsilon = 1e-13);
        assert_abs_diff_eq!(e.values[1], 3.0, epsilon = 1e-13);
        let ratio = e.vectors[0] / e.vectors[2];
        assert_abs_diff_eq!(ratio, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn eigen_reconstructs_random_symmetric() {
        let mut rng = crate::rng::stream(11, "linalg-test", 0);
        for n in [1usize, 2, 3, 5, 8] {
            let mut a = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..=i {
                    let x = crate::rng::uniform_f64(&mut rng) * 2.0 - 1.0;
                    a[i * n + j] = x;
                    a[j * n + i] = x;
                }
            }
            let e = sym_eigen(&a, n);
            // Rebuild A = V diag(lambda) V^T.
            let rebuilt = sym_apply_spectral(&e, |v| v);
            assert!(max_abs_diff(&a, &rebuilt) < 1e-12, "n = {n}");
            // Orthonormality.
            let vt = transpose(&e.vectors, n);
            let gram = matmul(&vt, &e.vectors, n);
            assert!(max_abs_diff(&gram, &identity(n)) < 1e-12, "n = {n}");
            // Ascending order.
            for k in 1..n {
                assert!(e.values[k] >= e.values[k - 1]);
            }
        }
    }

    #[test]
    fn spectral_inverse_matches_direct_solve() {
        let a = vec![4.0, 1.0, 0.5, 1.0, 3.0, 0.25, 0.5, 0.25, 2.0];
        let e = sym_eigen(&a, 3);
        let inv = sym_apply_spectral(&e, |v| 1.0 / v);
        let prod = matmul(&a, &inv, 3);
        assert!(max_abs_diff(&prod, &identity(3)) < 1e-12);
    }

    #[test]
    fn spectral_norm_of_known_matrix() {
        let a = vec![0.0, 2.0, 2.0, 0.0];
        assert_abs_diff_eq!(sym_spectral_norm(&a, 2), 2.0, epsilon = 1e-12);
    }
}
