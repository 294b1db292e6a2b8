//! Small dense helpers that do not warrant going through faer.

use faer::linalg::solvers::SolveLstsq;
use faer::{Mat, MatRef};

use crate::error::{Error, Result};

/// Cholesky factor of a small SPD matrix stored row-major.
///
/// On failure returns the offending pivot value and its index.
pub fn small_cholesky(a: &[f64], n: usize) -> std::result::Result<Vec<f64>, (f64, usize)> {
    debug_assert_eq!(a.len(), n * n);
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err((d, j));
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / djj;
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ x = b` in place given a row-major lower factor.
pub fn small_cholesky_solve(l: &[f64], n: usize, b: &mut [f64]) {
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

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Builds a matrix from row slices of equal width.
pub fn from_rows(rows: &[Vec<f64>], ncols: usize) -> Mat<f64> {
    Mat::from_fn(rows.len(), ncols, |i, j| rows[i][j])
}

/// Selects the given rows of `m`, in order.
pub fn select_rows(m: &Mat<f64>, rows: &[usize]) -> Mat<f64> {
    Mat::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

/// Least-squares coefficients of `y ≈ X b` via Householder QR.
///
/// Fails when `X` has fewer rows than columns or when a diagonal entry of
/// `R` falls below `1e-10 · max |R_ii|`.
pub fn least_squares(x: MatRef<'_, f64>, y: &[f64]) -> Result<Vec<f64>> {
    let (n, p) = (x.nrows(), x.ncols());
    if y.len() != n {
        return Err(Error::Argument("design and response differ in length".into()));
    }
    if p == 0 {
        return Ok(Vec::new());
    }
    if n < p {
        return Err(Error::RankDeficient(format!("{n} rows for {p} columns")));
    }
    let qr = x.qr();
    let r = qr.thin_R();
    let diag: Vec<f64> = (0..p).map(|i| r[(i, i)].abs()).collect();
    let max = diag.iter().copied().fold(0.0, f64::max);
    if let Some(col) = diag.iter().position(|&v| !(v > 1e-10 * max)) {
        return Err(Error::RankDeficient(format!(
            "column {col} is (numerically) a combination of earlier columns"
        )));
    }
    let rhs = Mat::from_fn(n, 1, |i, _| y[i]);
    let b = qr.solve_lstsq(&rhs);
    Ok((0..p).map(|i| b[(i, 0)]).collect())
}

/// `X b`.
pub fn mat_vec(x: MatRef<'_, f64>, b: &[f64]) -> Vec<f64> {
    (0..x.nrows())
        .map(|i| (0..x.ncols()).map(|j| x[(i, j)] * b[j]).sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_solves_spd_system() {
        let a = [4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0];
        let l = small_cholesky(&a, 3).unwrap();
        let mut x = vec![1.0, -2.0, 0.5];
        let b = x.clone();
        small_cholesky_solve(&l, 3, &mut x);
        for i in 0..3 {
            let ax: f64 = (0..3).map(|j| a[i * 3 + j] * x[j]).sum();
            assert!((ax - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn least_squares_recovers_exact_fit() {
        let x = Mat::from_fn(6, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let y: Vec<f64> = (0..6).map(|i| 2.0 - 0.5 * i as f64).collect();
        let b = least_squares(x.as_ref(), &y).unwrap();
        assert!((b[0] - 2.0).abs() < 1e-12 && (b[1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn least_squares_flags_collinear_columns() {
        let x = Mat::from_fn(5, 2, |i, _| i as f64);
        assert!(matches!(
            least_squares(x.as_ref(), &[1.0; 5]),
            Err(Error::RankDeficient(_))
        ));
    }

    #[test]
    fn cholesky_reports_indefinite_pivot() {
        let a = [1.0, 2.0, 2.0, 1.0];
        let (pivot, index) = small_cholesky(&a, 2).unwrap_err();
        assert_eq!(index, 1);
        assert!(pivot < 0.0);
    }
}
