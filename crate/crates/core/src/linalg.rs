//! Small dense linear algebra: Cholesky SPD solve, cyclic Jacobi
//! eigendecomposition, power-iteration spectral norms, the exact polar
//! factor oracle and stable rank.
//!
//! The Jacobi path is the test-scale oracle (matrices up to a few dozen
//! rows); production paths use power iteration so no general SVD is needed.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Solve `A x = b` for symmetric positive definite `A` by Cholesky
/// factorization. Fails with the offending pivot index when a pivot is
/// non-positive.
pub fn spd_solve(a: &Tensor<f64>, b: &[f64]) -> Result<Vec<f64>> {
    let d = a.rows();
    if a.cols() != d || b.len() != d {
        return Err(Error::shape(format!(
            "spd_solve wants square A and matching b, got {:?} and {}",
            a.dims(),
            b.len()
        )));
    }
    // Lower-triangular factor, packed row-major.
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a.at(i, j);
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::NotSpd { index: i, value: s });
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    // Forward then back substitution.
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * d + k] * y[k];
        }
        y[i] = s / l[i * d + i];
    }
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        let mut s = y[i];
        for k in (i + 1)..d {
            s -= l[k * d + i] * x[k];
        }
        x[i] = s / l[i * d + i];
    }
    Ok(x)
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns `(eigenvalues, eigenvectors)` with `A = V diag(w) V^T`; columns
/// of `V` are the eigenvectors. Intended for test-scale matrices (d <= 64).
pub fn jacobi_eigh(a: &Tensor<f64>) -> Result<(Vec<f64>, Tensor<f64>)> {
    let d = a.rows();
    if a.cols() != d {
        return Err(Error::shape("jacobi_eigh wants a square matrix"));
    }
    let mut m = a.clone();
    let mut v = Tensor::zeros(&[d, d]);
    for i in 0..d {
        v.set(i, i, 1.0);
    }
    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                off += m.at(i, j) * m.at(i, j);
            }
        }
        if off.sqrt() <= 1e-14 * (1.0 + m.frob_norm()) {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m.at(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m.at(p, p);
                let aqq = m.at(q, q);
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Rotate rows/columns p and q of m and columns of v.
                for k in 0..d {
                    let mkp = m.at(k, p);
                    let mkq = m.at(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..d {
                    let mpk = m.at(p, k);
                    let mqk = m.at(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..d {
                    let vkp = v.at(k, p);
                    let vkq = v.at(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let w = (0..d).map(|i| m.at(i, i)).collect();
    Ok((w, v))
}

/// Singular values of a (test-scale) matrix via Jacobi on the Gram matrix
/// of the smaller side. Sorted descending.
pub fn singular_values_jacobi(b: &Tensor<f64>) -> Result<Vec<f64>> {
    let gram = if b.rows() >= b.cols() {
        b.transpose().matmul(b)
    } else {
        b.matmul(&b.transpose())
    };
    let (mut w, _) = jacobi_eigh(&gram)?;
    for x in &mut w {
        *x = x.max(0.0).sqrt();
    }
    w.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(w)
}

/// Exact polar factor `U V^T` of a full-rank matrix, computed as
/// `B (B^T B)^{-1/2}` through a Jacobi eigendecomposition of the Gram
/// matrix. Test oracle only; callers keep `min(m, n) <= 32`.
pub fn polar_oracle(b: &Tensor<f64>) -> Result<Tensor<f64>> {
    if b.rows() < b.cols() {
        // Polar of the transpose, transposed back, shares the factor U V^T.
        return Ok(polar_oracle(&b.transpose())?.transpose());
    }
    let gram = b.transpose().matmul(b);
    let (w, v) = jacobi_eigh(&gram)?;
    let max_sv = w.iter().cloned().fold(0.0_f64, f64::max).sqrt();
    if max_sv == 0.0 {
        return Err(Error::ZeroMatrix("polar_oracle"));
    }
    let tol = 1e-10;
    for &x in &w {
        let sv = x.max(0.0).sqrt();
        if sv <= tol * max_sv {
            return Err(Error::RankDeficient {
                ratio: sv / max_sv,
                tol,
            });
        }
    }
    // (B^T B)^{-1/2} = V diag(1/sqrt(w)) V^T
    let n = gram.rows();
    let mut inv_sqrt = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += v.at(i, k) * v.at(j, k) / w[k].sqrt();
            }
            inv_sqrt.set(i, j, s);
        }
    }
    Ok(b.matmul(&inv_sqrt))
}

/// Symmetric PSD inverse square root via Jacobi, with eigenvalues clamped
/// at `floor` before inversion. Used by the whitening diagnostics.
pub fn inv_sqrt_psd(a: &Tensor<f64>, floor: f64) -> Result<Tensor<f64>> {
    let d = a.rows();
    let (w, v) = jacobi_eigh(a)?;
    let mut out = Tensor::zeros(&[d, d]);
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                let lam = w[k].max(floor);
                s += v.at(i, k) * v.at(j, k) / lam.sqrt();
            }
            out.set(i, j, s);
        }
    }
    Ok(out)
}

/// Squared spectral norm of `x` by power iteration on the Gram matrix of
/// the smaller side, to relative tolerance 1e-6 and at most 500 iterations.
pub fn spectral_norm_sq(x: &Tensor<f64>) -> Result<f64> {
    let gram = if x.rows() >= x.cols() {
        x.transpose().matmul(x)
    } else {
        x.matmul(&x.transpose())
    };
    let d = gram.rows();
    if x.frob_norm() == 0.0 {
        return Err(Error::ZeroMatrix("spectral_norm"));
    }
    // Deterministic start vector with all spectral components populated.
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.01 * (i as f64 + 1.0).sin()).collect();
    let n = (v.iter().map(|a| a * a).sum::<f64>()).sqrt();
    for e in &mut v {
        *e /= n;
    }
    let mut lambda = 0.0;
    for _ in 0..500 {
        let mut w = vec![0.0; d];
        for i in 0..d {
            w[i] = crate::tensor::dot(gram.row(i), &v);
        }
        let wn = (w.iter().map(|a| a * a).sum::<f64>()).sqrt();
        if wn == 0.0 {
            // Start vector fell in the null space; reseed orthogonally.
            for (i, e) in v.iter_mut().enumerate() {
                *e = ((i * 2654435761) % 97) as f64 / 97.0 + 0.1;
            }
            continue;
        }
        let next = w.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
        for (e, val) in v.iter_mut().zip(&w) {
            *e = val / wn;
        }
        if (next - lambda).abs() <= 1e-6 * next.abs().max(1e-300) {
            return Ok(next.max(0.0));
        }
        lambda = next;
    }
    Ok(lambda.max(0.0))
}

/// Stable rank `||X||_F^2 / ||X||_2^2`. Errors on the zero matrix.
pub fn stable_rank(x: &Tensor<f64>) -> Result<f64> {
    let f2 = x.frob_norm().powi(2);
    if f2 == 0.0 {
        return Err(Error::ZeroMatrix("stable_rank"));
    }
    let s2 = spectral_norm_sq(x)?;
    Ok(f2 / s2)
}
