//! Dependency-free dense linear algebra on rank-2 tensors.

use crate::error::{Result, SgaError};
use crate::tensor::Tensor;

/// Standard matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(SgaError::shape("matmul requires rank-2 operands".to_string()));
    }
    let (m, ka) = (a.dims()[0], a.dims()[1]);
    let (kb, n) = (b.dims()[0], b.dims()[1]);
    if ka != kb {
        return Err(SgaError::shape(format!(
            "matmul inner dims disagree: {m}x{ka} * {kb}x{n}"
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    matmul_into(a.data(), b.data(), out.data_mut(), m, ka, n);
    Ok(out)
}

/// C += A * B on raw row-major slices; i-k-j order so the inner loop streams
/// contiguous rows of B and C.
pub fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

/// C += A^T * B with A m x k interpreted transposed (k x m result rows).
pub fn matmul_at_b_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    // result is k x n: C[p, j] += sum_i A[i, p] * B[i, j]
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.dims()[0], a.dims()[1]);
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..m {
        for j in 0..n {
            out.data_mut()[j * m + i] = a.data()[i * n + j];
        }
    }
    out
}

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_OFFDIAG_EPS: f64 = 1e-12;

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues in non-increasing order and the matching orthonormal
/// eigenvectors as columns of the second tensor. Input is symmetrized as
/// (S + S^T)/2 before iteration; asymmetry beyond 1e-8 is rejected.
pub fn sym_eig(s: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    if s.rank() != 2 || s.dims()[0] != s.dims()[1] {
        return Err(SgaError::shape("sym_eig requires a square matrix".to_string()));
    }
    let n = s.dims()[0];
    let mut asym: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((s.data()[i * n + j] - s.data()[j * n + i]).abs());
        }
    }
    let scale = s.norm().max(1.0);
    if asym > 1e-8 * scale {
        return Err(SgaError::contract(format!(
            "sym_eig input asymmetric: max |S - S^T| = {asym:.3e}"
        )));
    }

    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = 0.5 * (s.data()[i * n + j] + s.data()[j * n + i]);
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let norm = s.norm().max(f64::MIN_POSITIVE);
    let mut converged = false;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off.sqrt() <= JACOBI_OFFDIAG_EPS * norm {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                // rotate rows/cols p, q of a
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - sn * akq;
                    a[k * n + q] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - sn * aqk;
                    a[q * n + k] = sn * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - sn * vkq;
                    v[k * n + q] = sn * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off.sqrt() > 1e-9 * norm {
            return Err(SgaError::numeric(format!(
                "sym_eig failed to converge after {JACOBI_MAX_SWEEPS} sweeps; \
                 off-diagonal residual {:.3e}",
                off.sqrt()
            )));
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].partial_cmp(&a[i * n + i]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = Tensor::zeros(&[n, n]);
    for (col, &src) in order.iter().enumerate() {
        for row in 0..n {
            vectors.data_mut()[row * n + col] = v[row * n + src];
        }
    }
    Ok((eigenvalues, vectors))
}

/// Thin SVD of an m x n matrix via sym_eig of the Gram of the thinner side.
///
/// Returns (U, sigma non-increasing, V) with m = U diag(sigma) V^T.
pub fn svd(m: &Tensor) -> Result<(Tensor, Vec<f64>, Tensor)> {
    if m.rank() != 2 {
        return Err(SgaError::shape("svd requires a rank-2 tensor".to_string()));
    }
    m.assert_finite("svd input")?;
    let (rows, cols) = (m.dims()[0], m.dims()[1]);
    let k = rows.min(cols);

    // Gram of the thinner side keeps the Jacobi problem small.
    let (gram, thin_is_cols) = if cols <= rows {
        (matmul(&transpose(m), m)?, true)
    } else {
        (matmul(m, &transpose(m))?, false)
    };
    let (evals, evecs) = sym_eig(&gram)?;
    let sigmas: Vec<f64> = evals.iter().take(k).map(|&l| l.max(0.0).sqrt()).collect();

    let tiny = 1e-14 * sigmas.first().copied().unwrap_or(0.0).max(1.0);
    let g = gram.dims()[0];
    let mut u = Tensor::zeros(&[rows, k]);
    let mut v = Tensor::zeros(&[cols, k]);
    if thin_is_cols {
        // evecs are right singular vectors
        for j in 0..k {
            for i in 0..cols {
                v.data_mut()[i * k + j] = evecs.data()[i * g + j];
            }
        }
        // u_j = M v_j / sigma_j; complete degenerate directions arbitrarily
        for j in 0..k {
            if sigmas[j] > tiny {
                for i in 0..rows {
                    let mut acc = 0.0;
                    for p in 0..cols {
                        acc += m.data()[i * cols + p] * v.data()[p * k + j];
                    }
                    u.data_mut()[i * k + j] = acc / sigmas[j];
                }
            }
        }
        complete_orthonormal_columns(&mut u, &sigmas, tiny);
    } else {
        for j in 0..k {
            for i in 0..rows {
                u.data_mut()[i * k + j] = evecs.data()[i * g + j];
            }
        }
        for j in 0..k {
            if sigmas[j] > tiny {
                for i in 0..cols {
                    let mut acc = 0.0;
                    for p in 0..rows {
                        acc += m.data()[p * cols + i] * u.data()[p * k + j];
                    }
                    v.data_mut()[i * k + j] = acc / sigmas[j];
                }
            }
        }
        complete_orthonormal_columns(&mut v, &sigmas, tiny);
    }
    Ok((u, sigmas, v))
}

/// Fills columns whose singular value vanished with vectors orthonormal to
/// the rest (Gram-Schmidt over the standard basis).
fn complete_orthonormal_columns(mat: &mut Tensor, sigmas: &[f64], tiny: f64) {
    let (rows, k) = (mat.dims()[0], mat.dims()[1]);
    for j in 0..k {
        if sigmas[j] > tiny {
            continue;
        }
        'candidates: for cand in 0..rows {
            let mut col = vec![0.0; rows];
            col[cand] = 1.0;
            // project out every already-valid column: nonzero-sigma ones and
            // zero-sigma ones completed in earlier iterations
            for jj in 0..k {
                let valid = sigmas[jj] > tiny || jj < j;
                if jj == j || !valid {
                    continue;
                }
                let mut dot = 0.0;
                for i in 0..rows {
                    dot += col[i] * mat.data()[i * k + jj];
                }
                for i in 0..rows {
                    col[i] -= dot * mat.data()[i * k + jj];
                }
            }
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for i in 0..rows {
                    mat.data_mut()[i * k + j] = col[i] / norm;
                }
                break 'candidates;
            }
        }
    }
}

/// Determinant via LU decomposition with partial pivoting (test oracle).
pub fn det(m: &Tensor) -> Result<f64> {
    if m.rank() != 2 || m.dims()[0] != m.dims()[1] {
        return Err(SgaError::shape("det requires a square matrix".to_string()));
    }
    let n = m.dims()[0];
    let mut a = m.data().to_vec();
    let mut sign = 1.0;
    let mut d = 1.0;
    for col in 0..n {
        let mut pivot = col;
        for row in (col + 1)..n {
            if a[row * n + col].abs() > a[pivot * n + col].abs() {
                pivot = row;
            }
        }
        if a[pivot * n + col] == 0.0 {
            return Ok(0.0);
        }
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
            }
            sign = -sign;
        }
        d *= a[col * n + col];
        for row in (col + 1)..n {
            let f = a[row * n + col] / a[col * n + col];
            for j in col..n {
                a[row * n + j] -= f * a[col * n + j];
            }
        }
    }
    Ok(sign * d)
}

/// Projects mean-centered features onto their top-k principal directions.
///
/// Returns an N x k tensor; column variances are non-increasing.
pub fn pca_project(features: &Tensor, k: usize) -> Result<Tensor> {
    if features.rank() != 2 {
        return Err(SgaError::shape("pca_project requires rank-2 input".to_string()));
    }
    let (n, c) = (features.dims()[0], features.dims()[1]);
    if n < 2 {
        return Err(SgaError::shape("pca_project requires N >= 2".to_string()));
    }
    if k == 0 || k > n.min(c) {
        return Err(SgaError::shape(format!(
            "pca component count {k} outside 1..=min({n},{c})"
        )));
    }
    let mut centered = features.clone();
    for j in 0..c {
        let mut mean = 0.0;
        for i in 0..n {
            mean += features.data()[i * c + j];
        }
        mean /= n as f64;
        for i in 0..n {
            centered.data_mut()[i * c + j] -= mean;
        }
    }
    let cov = matmul(&transpose(&centered), &centered)?.scale(1.0 / (n as f64 - 1.0));
    let (_evals, evecs) = sym_eig(&cov)?;
    let mut basis = Tensor::zeros(&[c, k]);
    for j in 0..k {
        for i in 0..c {
            basis.data_mut()[i * k + j] = evecs.data()[i * c + j];
        }
    }
    matmul(&centered, &basis)
}
