//! One-sided (Hestenes) Jacobi SVD for small dense matrices.
//!
//! Only singular values are produced. Columns of a working copy are rotated
//! pairwise until mutually orthogonal; the column norms are then the
//! singular values. Rotations are orthogonal, so the Frobenius norm is
//! preserved to rounding.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 80;

/// Singular values of a 2-D tensor in descending order.
pub fn svd_singular_values(m: &Tensor) -> Result<Vec<f64>> {
    if m.rank() != 2 {
        return Err(Error::dim("svd", format!("expected a matrix, got {:?}", m.shape())));
    }
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    singular_values(m.data(), rows, cols)
}

/// Singular values of a row-major `rows×cols` slice, descending.
pub fn singular_values(data: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    // Work column-major on the orientation with fewer columns.
    let (m, n, mut a) = if cols <= rows {
        let mut a = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                a[j * rows + i] = data[i * cols + j];
            }
        }
        (rows, cols, a)
    } else {
        (cols, rows, data.to_vec())
    };
    let tol = f64::EPSILON * m as f64;

    let mut converged = false;
    let mut residual = 0.0;
    for _ in 0..MAX_SWEEPS {
        residual = 0.0f64;
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let cp = &a[p * m..(p + 1) * m];
                    let cq = &a[q * m..(q + 1) * m];
                    let mut al = 0.0;
                    let mut be = 0.0;
                    let mut ga = 0.0;
                    for (x, y) in cp.iter().zip(cq) {
                        al += x * x;
                        be += y * y;
                        ga += x * y;
                    }
                    (al, be, ga)
                };
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(off);
                if off <= tol {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = a.split_at_mut(q * m);
                let cp = &mut left[p * m..(p + 1) * m];
                let cq = &mut right[..m];
                for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdConvergence {
            sweeps: MAX_SWEEPS,
            residual,
        });
    }
    let mut sv: Vec<f64> = (0..n)
        .map(|j| a[j * m..(j + 1) * m].iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    Ok(sv)
}
