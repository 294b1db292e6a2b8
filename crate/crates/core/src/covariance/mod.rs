//! Spatial error covariance: estimation, representation and factorization.
//!
//! The covariance is isotropic and stationary, `C(h) = sill · ρ(h / range)`
//! off the diagonal and `nugget + sill` on it, with `ρ` Gaussian
//! (`exp(-h²/range²)`) or exponential (`exp(-h/range)`). Its variogram form is
//! `γ(h) = nugget + sill · (1 - ρ(h))` for `h > 0`.

mod fgls;
mod lwmlr;
mod spd;
mod variogram;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use fgls::{fgls_estimate, fgls_with_design, FglsOptions, FglsResult};
pub use lwmlr::{kmeans_centers, lwmlr_design, Basis, LwmlrConfig, LwmlrSettings};
pub use spd::{condition_estimate, factorize, SpdFactor};
pub(crate) use spd::symmetrize;
pub use variogram::{
    cressie_objective, empirical_semivariogram, fit_variogram, EmpiricalSemivariogram,
    VariogramBounds,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceFamily {
    #[default]
    Gaussian,
    Exponential,
}

impl CovarianceFamily {
    /// Correlation at lag `h` for unit range scale.
    pub fn correlation(self, h: f64, range: f64) -> f64 {
        match self {
            CovarianceFamily::Gaussian => {
                let u = h / range;
                (-u * u).exp()
            }
            CovarianceFamily::Exponential => (-h / range).exp(),
        }
    }
}

/// Nugget, partial sill and range of an isotropic covariance model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceParams {
    pub family: CovarianceFamily,
    pub nugget: f64,
    pub sill: f64,
    pub range: f64,
}

impl CovarianceParams {
    pub fn new(family: CovarianceFamily, nugget: f64, sill: f64, range: f64) -> Result<Self> {
        let p = Self {
            family,
            nugget,
            sill,
            range,
        };
        p.validate()?;
        Ok(p)
    }

    /// `σ² I`: pure nugget, unit range.
    pub fn white(variance: f64) -> Self {
        Self {
            family: CovarianceFamily::Gaussian,
            nugget: variance,
            sill: 0.0,
            range: 1.0,
        }
    }

    pub fn identity() -> Self {
        Self::white(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.nugget.is_finite() && self.sill.is_finite() && self.range.is_finite();
        if !finite {
            return Err(Error::Validation(format!("non-finite covariance parameters {self:?}")));
        }
        if self.nugget < 0.0 || self.sill < 0.0 {
            return Err(Error::Validation(format!(
                "nugget and sill must be non-negative, got {self:?}"
            )));
        }
        if !(self.range > 0.0) {
            return Err(Error::Validation(format!("range must be positive, got {}", self.range)));
        }
        if !(self.nugget + self.sill > 0.0) {
            return Err(Error::Validation(
                "nugget + sill must be positive".to_string(),
            ));
        }
        Ok(())
    }

    /// `C(h)`; at `h = 0` this includes the nugget.
    pub fn covariance(&self, h: f64) -> f64 {
        if h == 0.0 {
            self.nugget + self.sill
        } else {
            self.sill * self.family.correlation(h, self.range)
        }
    }

    /// `γ(h)`; zero at the origin, `nugget + sill·(1 − ρ(h))` beyond it.
    pub fn semivariance(&self, h: f64) -> f64 {
        if h == 0.0 {
            0.0
        } else {
            self.nugget + self.sill * (1.0 - self.family.correlation(h, self.range))
        }
    }

    pub fn total_variance(&self) -> f64 {
        self.nugget + self.sill
    }
}

/// An assembled covariance matrix together with its factorization.
#[derive(Debug)]
pub struct SpatialCovariance {
    pub params: CovarianceParams,
    pub matrix: Mat<f64>,
    pub factor: SpdFactor,
    /// Diagonal jitter that was needed for the factorization to succeed.
    pub jitter: f64,
}

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

/// Dense `Σ` for `params` at `locations`.
///
/// Entries are computed once for `i < j` and mirrored, so the result is
/// exactly symmetric.
pub fn covariance_matrix(params: &CovarianceParams, locations: &Mat<f64>) -> Mat<f64> {
    let n = locations.nrows();
    let d = locations.ncols();
    let mut sigma = Mat::<f64>::zeros(n, n);
    let diag = params.nugget + params.sill;
    for j in 0..n {
        sigma[(j, j)] = diag;
        for i in (j + 1)..n {
            let mut h2 = 0.0;
            for k in 0..d {
                let dx = locations[(i, k)] - locations[(j, k)];
                h2 += dx * dx;
            }
            let c = if params.sill == 0.0 {
                0.0
            } else {
                params.sill * params.family.correlation(h2.sqrt(), params.range)
            };
            sigma[(i, j)] = c;
            sigma[(j, i)] = c;
        }
    }
    sigma
}

/// Builds and factorizes `Σ_θ`, escalating diagonal jitter on failure.
///
/// Jitter starts at `1e-10 · tr(Σ)/n` and grows by ×10 up to
/// `1e-4 · tr(Σ)/n`; beyond that the matrix is reported as not SPD.
pub fn build_covariance(
    params: &CovarianceParams,
    locations: &Mat<f64>,
) -> Result<SpatialCovariance> {
    params.validate()?;
    let mut matrix = covariance_matrix(params, locations);
    let n = matrix.nrows();
    let mean_diag = params.total_variance();
    let mut added = 0.0;
    let mut level = 0.0;
    loop {
        match factorize(matrix.as_ref()) {
            Ok(factor) => {
                return Ok(SpatialCovariance {
                    params: *params,
                    matrix,
                    factor,
                    jitter: added,
                })
            }
            Err(Error::NotSpd { condition }) => {
                level = if level == 0.0 { JITTER_START } else { level * 10.0 };
                if level > JITTER_MAX * (1.0 + 1e-9) {
                    return Err(Error::NotSpd { condition });
                }
                let target = level * mean_diag;
                let bump = target - added;
                for i in 0..n {
                    matrix[(i, i)] += bump;
                }
                added = target;
                log::debug!("covariance jitter raised to {target:e}");
            }
            Err(e) => return Err(e),
        }
    }
}
