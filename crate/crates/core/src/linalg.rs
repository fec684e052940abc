//! Guarded inversions for the small dense matrices used by the estimators.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Reciprocal condition numbers below this are treated as singular.
pub const RCOND_MIN: f64 = 1e-12;

fn dependent_columns(direction: &DVector<f64>, names: &[String]) -> Vec<String> {
    let peak = direction.amax();
    direction
        .iter()
        .enumerate()
        .filter(|(_, v)| v.abs() >= 0.2 * peak)
        .map(|(j, _)| names.get(j).cloned().unwrap_or_else(|| format!("#{j}")))
        .collect()
}

/// Inverse of a symmetric matrix through its eigendecomposition. `names`
/// label the rows/columns for the collinearity diagnostic.
pub fn inverse_symmetric(m: &DMatrix<f64>, context: &str, names: &[String]) -> Result<DMatrix<f64>> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::spec(format!("{context}: matrix is not square")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain(format!("{context}: non-finite matrix entry")));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let abs: Vec<f64> = eig.eigenvalues.iter().map(|v| v.abs()).collect();
    let max = abs.iter().cloned().fold(0.0, f64::max);
    let (imin, min) = abs
        .iter()
        .cloned()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
    let rcond = if max > 0.0 { min / max } else { 0.0 };
    if rcond < RCOND_MIN {
        return Err(Error::Singular {
            context: context.into(),
            rcond,
            columns: dependent_columns(&eig.eigenvectors.column(imin).into_owned(), names),
        });
    }
    let inv_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v));
    let inv = &eig.eigenvectors * inv_diag * eig.eigenvectors.transpose();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// Inverse of a general square matrix via SVD.
pub fn inverse_general(m: &DMatrix<f64>, context: &str, names: &[String]) -> Result<DMatrix<f64>> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::spec(format!("{context}: matrix is not square")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain(format!("{context}: non-finite matrix entry")));
    }
    let svd = m.clone().svd(true, true);
    let s = &svd.singular_values;
    let max = s.max();
    let (imin, min) = s.argmin();
    let rcond = if max > 0.0 { min / max } else { 0.0 };
    let v_t = svd.v_t.as_ref().expect("requested");
    if rcond < RCOND_MIN {
        return Err(Error::Singular {
            context: context.into(),
            rcond,
            columns: dependent_columns(&v_t.row(imin).transpose(), names),
        });
    }
    let u = svd.u.as_ref().expect("requested");
    let inv_s = DMatrix::from_diagonal(&s.map(|v| 1.0 / v));
    Ok(v_t.transpose() * inv_s * u.transpose())
}

/// Solves `m x = b` for a general square `m` with the same guard.
pub fn solve_general(m: &DMatrix<f64>, b: &DVector<f64>, context: &str) -> Result<DVector<f64>> {
    let inv = inverse_general(m, context, &[])?;
    Ok(inv * b)
}

/// Symmetric positive semidefinite check with a relative tolerance on the
/// smallest eigenvalue.
pub fn is_symmetric_psd(m: &DMatrix<f64>, tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    if (m - m.transpose()).amax() > tol * scale {
        return false;
    }
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    eig.eigenvalues.iter().all(|&v| v >= -tol * scale)
}
