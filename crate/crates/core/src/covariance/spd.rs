use faer::linalg::solvers::{DenseSolveCore, Llt, Solve};
use faer::{Mat, MatRef, Side};

use crate::error::{Error, Result};

/// Cholesky factorization `Σ = L Lᵀ` of a symmetric positive definite matrix.
pub struct SpdFactor {
    llt: Llt<f64>,
    log_det: f64,
}

impl std::fmt::Debug for SpdFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpdFactor")
            .field("dim", &self.dim())
            .field("log_det", &self.log_det)
            .finish()
    }
}

/// Factorizes `sigma`, which must be symmetric to 1e-12 relative.
///
/// No regularization happens here; a failed factorization is an error.
pub fn factorize(sigma: MatRef<'_, f64>) -> Result<SpdFactor> {
    let n = sigma.nrows();
    if sigma.ncols() != n {
        return Err(Error::Argument(format!(
            "covariance must be square, got {}x{}",
            n,
            sigma.ncols()
        )));
    }
    if n == 0 {
        return Err(Error::Argument("empty covariance".into()));
    }
    let scale = (0..n).map(|i| sigma[(i, i)].abs()).fold(0.0, f64::max);
    for j in 0..n {
        for i in (j + 1)..n {
            let (a, b) = (sigma[(i, j)], sigma[(j, i)]);
            if !a.is_finite() || (a - b).abs() > 1e-12 * scale.max(f64::MIN_POSITIVE) {
                return Err(Error::Argument(format!(
                    "covariance not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let llt = sigma
        .llt(Side::Lower)
        .map_err(|_| Error::NotSpd {
            condition: condition_estimate(sigma),
        })?;
    let l = llt.L();
    let mut log_det = 0.0;
    for i in 0..n {
        let d = l[(i, i)];
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotSpd {
                condition: condition_estimate(sigma),
            });
        }
        log_det += 2.0 * d.ln();
    }
    Ok(SpdFactor { llt, log_det })
}

/// Ratio of extreme eigenvalue magnitudes; infinite when the smallest is zero.
pub fn condition_estimate(sigma: MatRef<'_, f64>) -> f64 {
    match sigma.self_adjoint_eigenvalues(Side::Lower) {
        Ok(ev) if !ev.is_empty() => {
            let max = ev.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let min = ev.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
            if min == 0.0 {
                f64::INFINITY
            } else {
                max / min
            }
        }
        _ => f64::NAN,
    }
}

impl SpdFactor {
    pub fn dim(&self) -> usize {
        self.llt.L().nrows()
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Lower-triangular factor `L`.
    pub fn lower(&self) -> MatRef<'_, f64> {
        self.llt.L()
    }

    /// `Σ⁻¹ v`.
    pub fn solve(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.dim(), "solve: dimension mismatch");
        let mut rhs = Mat::from_fn(v.len(), 1, |i, _| v[i]);
        self.llt.solve_in_place(rhs.as_mut());
        (0..v.len()).map(|i| rhs[(i, 0)]).collect()
    }

    /// `Σ⁻¹ B` for a matrix right-hand side.
    pub fn solve_mat(&self, b: MatRef<'_, f64>) -> Mat<f64> {
        assert_eq!(b.nrows(), self.dim(), "solve_mat: dimension mismatch");
        let mut rhs = b.to_owned();
        self.llt.solve_in_place(rhs.as_mut());
        rhs
    }

    /// `L⁻¹ B`, the whitening transform.
    pub fn whiten(&self, b: MatRef<'_, f64>) -> Mat<f64> {
        let mut rhs = b.to_owned();
        faer::linalg::triangular_solve::solve_lower_triangular_in_place(
            self.llt.L(),
            rhs.as_mut(),
            faer::Par::Seq,
        );
        rhs
    }

    /// `vᵀ Σ⁻¹ v`, computed as `‖L⁻¹ v‖²`.
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        let w = self.whiten(Mat::from_fn(v.len(), 1, |i, _| v[i]).as_ref());
        (0..v.len()).map(|i| w[(i, 0)] * w[(i, 0)]).sum()
    }

    pub fn inverse(&self) -> Mat<f64> {
        let mut inv = self.llt.inverse();
        symmetrize(&mut inv);
        inv
    }

    /// `L Lᵀ`.
    pub fn reconstruct(&self) -> Mat<f64> {
        self.llt.reconstruct()
    }
}

/// Overwrites the strict upper triangle with the lower one.
pub(crate) fn symmetrize(m: &mut Mat<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = m[(i, j)];
            m[(j, i)] = v;
        }
    }
}
