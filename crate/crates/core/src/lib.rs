//! Gradient boosted regression trees for spatially correlated responses.
//!
//! Each tree is grown against the squared Mahalanobis length of the residual
//! vector, `(y - ŷ)ᵀ Σ⁻¹ (y - ŷ)`, where `Σ` is an isotropic spatial covariance
//! re-estimated between trees by feasible generalized least squares on the
//! current residuals. Because the Hessian `2Σ⁻¹` is dense, the leaf weights of
//! a candidate tree are coupled and come from a `T × T` linear system rather
//! than the per-leaf closed form of classical boosting.
//!
//! Module map:
//!
//! - [`data`]: datasets, CSV ingestion, train/test splits.
//! - [`covariance`]: semivariograms, parametric fits, LWMLR detrending, FGLS,
//!   SPD assembly and factorization.
//! - [`loss`]: Mahalanobis loss, gradient, Hessian and leaf block sums.
//! - [`tree`]: greedy growth of a single coupled-weight regression tree.
//! - [`boosting`]: the outer fit loop, prediction and model files.
//! - [`simulate`]: Gaussian random field ground truth.
//! - [`evaluate`]: metrics, the paired Wilcoxon test, baselines, comparisons.
//! - [`tune`]: MaxPro Latin hypercube exploration of `(λ, γ)`.

pub mod boosting;
pub mod covariance;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod loss;
pub mod simulate;
pub mod tree;
pub mod tune;

pub(crate) mod linalg;
pub(crate) mod rng;
#[cfg(test)]
mod test_support;

pub use boosting::{fit, fit_with_report, predict, CovarianceSource, Ensemble, FitConfig, FitReport};
pub use covariance::{CovarianceFamily, CovarianceParams};
pub use data::{SpatialDataset, SplitIndices};
pub use error::{Error, ErrorClass, Result};
pub use tree::{GrowConfig, SystemForm, Tree};
