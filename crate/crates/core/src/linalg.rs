//! Small dense helpers on top of nalgebra. Everything here works on
//! `m x m` matrices where `m` is the parameter dimension, so clarity wins
//! over blocking or BLAS tricks.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{FleetError, Result};

/// Numerical rank from the singular values, using the usual
/// `max(sv) * max(rows, cols) * eps` cutoff.
pub fn numerical_rank(a: &DMatrix<f64>) -> usize {
    if a.is_empty() {
        return 0;
    }
    let sv = a.clone().singular_values();
    let top = sv.iter().cloned().fold(0.0_f64, f64::max);
    if top == 0.0 {
        return 0;
    }
    let cutoff = top * (a.nrows().max(a.ncols()) as f64) * f64::EPSILON;
    sv.iter().filter(|&&s| s > cutoff).count()
}

/// Cholesky factorization of a symmetric positive definite matrix that
/// reports the numerical rank on failure.
pub fn spd_factor(a: &DMatrix<f64>, context: &str) -> Result<Cholesky<f64, Dyn>> {
    let dim = a.nrows();
    let rank = numerical_rank(a);
    if rank < dim {
        return Err(FleetError::Singular {
            context: context.to_string(),
            rank,
            dim,
        });
    }
    Cholesky::new(a.clone()).ok_or_else(|| FleetError::Singular {
        context: context.to_string(),
        rank,
        dim,
    })
}

/// Lower-triangular factor `L` with `L Lᵀ = a` for a symmetric positive
/// semidefinite `a`. Pivots below `tol * max(1, max diag)` are treated as
/// exact zeros, so a zero covariance yields an exactly zero factor.
pub fn psd_cholesky(a: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(FleetError::domain(format!("{name} is not square")));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(FleetError::domain(format!("{name} has non-finite entries")));
    }
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(1.0_f64, f64::max);
    let tol = 1e-12 * scale;
    for i in 0..n {
        for j in 0..i {
            if (a[(i, j)] - a[(j, i)]).abs() > tol {
                return Err(FleetError::domain(format!("{name} is not symmetric")));
            }
        }
    }
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < -tol {
            return Err(FleetError::domain(format!(
                "{name} is not positive semidefinite (pivot {j} = {d:.3e})"
            )));
        }
        if d <= tol {
            // Zero pivot: the rest of the column must vanish as well.
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                if s.abs() > tol.sqrt() * scale.sqrt() {
                    return Err(FleetError::domain(format!(
                        "{name} is not positive semidefinite (column {j})"
                    )));
                }
            }
            continue;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

pub fn sup_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}
