//! Singular values via cyclic Jacobi on the Gram matrix.
//!
//! The matrices that need spectra here are small (proxy banks, adapter
//! deltas up to 64x64), so a dependency-free Jacobi sweep is plenty and
//! keeps the reduction order deterministic.

use crate::error::{Fl2tError, Result};
use crate::numerics::Matrix;

const MAX_SWEEPS: usize = 64;

/// Eigenvalues of a symmetric matrix, descending.
///
/// Cyclic Jacobi rotations; iterates until the off-diagonal Frobenius mass
/// falls below 1e-14 of the total or the sweep budget runs out.
pub fn symmetric_eigenvalues(m: &Matrix) -> Result<Vec<f64>> {
    if m.rows() != m.cols() {
        return Err(Fl2tError::Shape {
            op: "symmetric_eigenvalues",
            left_rows: m.rows(),
            left_cols: m.cols(),
            right_rows: m.rows(),
            right_cols: m.rows(),
        });
    }
    let n = m.rows();
    if n == 0 {
        return Err(Fl2tError::Domain("eigenvalues of an empty matrix".into()));
    }
    let mut a = m.clone();
    let total = a.frobenius_norm();
    if total == 0.0 {
        return Ok(vec![0.0; n]);
    }
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a.get(p, q) * a.get(p, q);
            }
        }
        if off.sqrt() <= 1e-14 * total {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                // Rotation angle that zeroes a[p][q]; derived from
                // tan(2t) = 2 apq / (app - aqq).
                let t = 0.5 * (2.0 * apq).atan2(app - aqq);
                let (s, c) = t.sin_cos();
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp + s * akq);
                    a.set(k, q, -s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk + s * aqk);
                    a.set(q, k, -s * apk + c * aqk);
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    eig.sort_by(|x, y| y.partial_cmp(x).expect("finite eigenvalues"));
    Ok(eig)
}

/// Singular values of an arbitrary matrix, descending.
///
/// One-sided Jacobi: rotate column pairs until all columns are mutually
/// orthogonal; the singular values are the final column norms. Unlike the
/// Gram-matrix route, this keeps full relative accuracy on tiny singular
/// values, which the adapter rank checks depend on.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Fl2tError::Domain("singular values of an empty matrix".into()));
    }
    // Work on the orientation with fewer columns.
    let mut a = if m.rows() >= m.cols() {
        m.clone()
    } else {
        m.transpose()
    };
    let (rows, cols) = (a.rows(), a.cols());
    let col = |a: &Matrix, j: usize| -> Vec<f64> { (0..rows).map(|i| a.get(i, j)).collect() };
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..rows {
                    let x = a.get(i, p);
                    let y = a.get(i, q);
                    app += x * x;
                    aqq += y * y;
                    apq += x * y;
                }
                if apq == 0.0 || apq.abs() <= 1e-15 * (app * aqq).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let x = a.get(i, p);
                    let y = a.get(i, q);
                    a.set(i, p, c * x - s * y);
                    a.set(i, q, s * x + c * y);
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..cols)
        .map(|j| {
            let c = col(&a, j);
            c.iter().map(|v| v * v).sum::<f64>().sqrt()
        })
        .collect();
    sv.sort_by(|x, y| y.partial_cmp(x).expect("finite singular values"));
    Ok(sv)
}
