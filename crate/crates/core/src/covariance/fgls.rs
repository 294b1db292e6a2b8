use faer::Mat;
use serde::{Deserialize, Serialize};

use super::{
    build_covariance, empirical_semivariogram, fit_variogram, lwmlr_design, CovarianceFamily,
    CovarianceParams, EmpiricalSemivariogram, LwmlrConfig,
};
use crate::error::{Error, Result};
use crate::linalg::{least_squares, mat_vec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FglsOptions {
    pub max_iter: usize,
    /// Stop once every parameter moves by less than this, relatively.
    pub tol: f64,
    pub n_bins: usize,
    /// `None`: half the largest pairwise distance.
    pub max_dist: Option<f64>,
    /// Remove the LWMLR trend before the variogram step. When off, the
    /// variogram is fitted to the raw residuals in a single pass.
    pub detrend: bool,
}

impl Default for FglsOptions {
    fn default() -> Self {
        Self {
            max_iter: 5,
            tol: 1e-3,
            n_bins: 15,
            max_dist: None,
            detrend: true,
        }
    }
}

impl FglsOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::Validation("fgls.max_iter must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Validation("fgls.tol must be positive".into()));
        }
        if self.n_bins == 0 {
            return Err(Error::Validation("fgls.n_bins must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FglsResult {
    pub params: CovarianceParams,
    /// Trend coefficients `B`; empty when no trend was fitted.
    pub coefficients: Vec<f64>,
    pub iterations: usize,
    /// Semivariogram of the detrended residuals at the last iteration.
    pub variogram: EmpiricalSemivariogram,
}

/// Estimates `Σ_θ` from `residuals` with an LWMLR trend.
pub fn fgls_estimate(
    residuals: &[f64],
    locations: &Mat<f64>,
    cfg: &LwmlrConfig,
    family: CovarianceFamily,
    opts: &FglsOptions,
) -> Result<FglsResult> {
    let design = if opts.detrend {
        lwmlr_design(locations, cfg)?
    } else {
        Mat::zeros(locations.nrows(), 0)
    };
    let opts = if opts.detrend {
        *opts
    } else {
        FglsOptions { max_iter: 1, ..*opts }
    };
    fgls_with_design(residuals, locations, &design, family, &opts)
}

/// FGLS for `r = X B + ε`, `Cov(ε) = Σ_θ`, with an arbitrary trend design.
///
/// Iteration 0 takes `B` from ordinary least squares; later iterations use
/// GLS under the previous `Σ`. Each iteration fits the variogram of
/// `r − X B` and stops when the parameters settle or `max_iter` is reached.
pub fn fgls_with_design(
    response: &[f64],
    locations: &Mat<f64>,
    design: &Mat<f64>,
    family: CovarianceFamily,
    opts: &FglsOptions,
) -> Result<FglsResult> {
    opts.validate()?;
    let n = response.len();
    if locations.nrows() != n || design.nrows() != n {
        return Err(Error::Argument("FGLS inputs differ in length".into()));
    }
    if response.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("FGLS residuals must be finite".into()));
    }
    let p = design.ncols();
    if n <= p {
        return Err(Error::InsufficientData(format!(
            "trend with {p} coefficients is not identifiable from {n} points"
        )));
    }
    let mean_sq = response.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let floor = 1e-12 * if mean_sq > 0.0 { mean_sq } else { 1.0 };

    let mut coefficients = least_squares(design.as_ref(), response)?;
    let mut params: Option<CovarianceParams> = None;
    let mut variogram = None;
    let mut iterations = 0;
    for it in 0..opts.max_iter {
        if it > 0 && p > 0 {
            let cov = build_covariance(params.as_ref().unwrap(), locations)?;
            let xw = cov.factor.whiten(design.as_ref());
            let rw = cov.factor.whiten(Mat::from_fn(n, 1, |i, _| response[i]).as_ref());
            let rw: Vec<f64> = (0..n).map(|i| rw[(i, 0)]).collect();
            coefficients = least_squares(xw.as_ref(), &rw)?;
        }
        let trend = if p > 0 {
            mat_vec(design.as_ref(), &coefficients)
        } else {
            vec![0.0; n]
        };
        let detrended: Vec<f64> = response.iter().zip(&trend).map(|(r, t)| r - t).collect();
        let emp = empirical_semivariogram(&detrended, locations, opts.n_bins, opts.max_dist)?;
        let mut next = if emp.semivariances.iter().all(|&g| g == 0.0) {
            CovarianceParams {
                family,
                nugget: 0.0,
                sill: 0.0,
                range: emp.bin_centers.last().copied().unwrap_or(1.0),
            }
        } else {
            fit_variogram(&emp, family)?
        };
        if next.total_variance() < floor {
            next.nugget += floor - next.total_variance();
        }
        iterations = it + 1;
        variogram = Some(emp);
        let converged = params.is_some_and(|old| relative_change(&old, &next) < opts.tol);
        params = Some(next);
        if converged || p == 0 {
            break;
        }
    }
    Ok(FglsResult {
        params: params.expect("at least one iteration runs"),
        coefficients,
        iterations,
        variogram: variogram.expect("at least one iteration runs"),
    })
}

fn relative_change(old: &CovarianceParams, new: &CovarianceParams) -> f64 {
    let scale = 1e-12 * old.total_variance();
    let rel = |a: f64, b: f64, s: f64| (b - a).abs() / a.abs().max(s);
    rel(old.nugget, new.nugget, scale)
        .max(rel(old.sill, new.sill, scale))
        .max(rel(old.range, new.range, 1e-12 * old.range))
}
