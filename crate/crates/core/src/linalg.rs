//! Small dense kernels on row-major `f64` slices.
//!
//! The REML objective is evaluated hundreds of thousands of times per
//! simulation study on matrices no larger than ~30×30, so these avoid
//! allocation and generic dispatch. Everything else in the crate uses nalgebra.

use nalgebra::DMatrix;

/// In-place lower Cholesky factor of an `n×n` symmetric matrix (upper part zeroed).
/// Returns the failing pivot index when the matrix is not numerically positive definite.
pub fn cholesky_in_place(a: &mut [f64], n: usize) -> Result<(), usize> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(j);
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
        for i in 0..j {
            a[i * n + j] = 0.0;
        }
    }
    Ok(())
}

/// log|A| from its Cholesky factor.
pub fn chol_log_det(l: &[f64], n: usize) -> f64 {
    (0..n).map(|i| l[i * n + i].ln()).sum::<f64>() * 2.0
}

/// Solve `L Lᵀ x = b` in place.
pub fn chol_solve_in_place(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// `A⁻¹` from the Cholesky factor of `A`, written into `out` (full symmetric).
pub fn chol_inverse(l: &[f64], n: usize, out: &mut [f64]) {
    let mut col = vec![0.0; n];
    for j in 0..n {
        col.iter_mut().for_each(|c| *c = 0.0);
        col[j] = 1.0;
        chol_solve_in_place(l, n, &mut col);
        for i in 0..n {
            out[i * n + j] = col[i];
        }
    }
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (out[i * n + j] + out[j * n + i]);
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
}

/// Columns of a Gram matrix `A = XᵀX` that are (numerically) linear combinations
/// of earlier columns, found by a column-wise Cholesky sweep.
pub fn dependent_columns(a: &[f64], n: usize, rel_tol: f64) -> Vec<usize> {
    let mut accepted: Vec<usize> = Vec::new();
    let mut l: Vec<Vec<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for c in 0..n {
        let acc = a[c * n + c];
        let mut row = Vec::with_capacity(accepted.len());
        for (r, &prev) in accepted.iter().enumerate() {
            let mut s = a[c * n + prev];
            for k in 0..r {
                s -= row[k] * l[r][k];
            }
            row.push(s / l[r][r]);
        }
        let resid = acc - row.iter().map(|v| v * v).sum::<f64>();
        if !(acc > 0.0) || resid <= rel_tol * acc {
            dependent.push(c);
            continue;
        }
        row.push(resid.sqrt());
        accepted.push(c);
        l.push(row);
    }
    dependent
}

/// Cholesky of a nalgebra matrix, symmetrising first.
pub fn cholesky(m: &DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    nalgebra::Cholesky::new(sym)
}

/// Submatrix `m[rows, cols]`.
pub fn select(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    cholesky(m).is_some()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_solve_and_inverse_agree_with_nalgebra() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let mut l: Vec<f64> = m.transpose().as_slice().to_vec();
        cholesky_in_place(&mut l, 3).unwrap();
        let mut inv = vec![0.0; 9];
        chol_inverse(&l, 3, &mut inv);
        let expected = m.clone().try_inverse().unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((inv[i * 3 + j] - expected[(i, j)]).abs() < 1e-12);
            }
        }
        assert!((chol_log_det(&l, 3) - m.determinant().ln()).abs() < 1e-12);
    }

    #[test]
    fn not_pd_reports_pivot() {
        let mut a = vec![1.0, 2.0, 2.0, 1.0];
        assert_eq!(cholesky_in_place(&mut a, 2), Err(1));
    }

    #[test]
    fn dependent_column_detection() {
        // columns: x, 2x, y
        let x = [1.0, 2.0, 3.0];
        let y = [1.0, 0.0, 1.0];
        let cols = [x, [2.0, 4.0, 6.0], y];
        let mut a = vec![0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                a[i * 3 + j] = (0..3).map(|k| cols[i][k] * cols[j][k]).sum();
            }
        }
        assert_eq!(dependent_columns(&a, 3, 1e-10), vec![1]);
    }
}
