//! The outer boosting loop, prediction and model files.
//!
//! `objective_trace` is chained across covariance updates: entry 0 is
//! `ℓ(y; Σ⁽⁰⁾)`, and entry `k` scales entry `k − 1` by the loss ratio tree `k`
//! achieved under the covariance it was grown with. With a fixed `Σ` this is
//! exactly the training loss after each tree; with updates it stays
//! comparable across re-estimated covariances, which rescale the raw loss.

use std::path::Path;
use std::sync::Arc;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::covariance::{
    build_covariance, fgls_estimate, CovarianceFamily, CovarianceParams, EmpiricalSemivariogram,
    FglsOptions, LwmlrConfig, LwmlrSettings, SpdFactor,
};
use crate::data::{SpatialDataset, SplitIndices};
use crate::error::{Error, Result};
use crate::linalg::select_rows;
use crate::loss::{compute_loss_state, dense_hessian, loss_state_with_hessian, DEFAULT_DENSE_CAP};
use crate::tree::{grow_tree_traced, GrowConfig, Tree};

pub const MODEL_VERSION: u64 = 1;

/// Where the covariance comes from.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceSource {
    /// FGLS on the residuals, initially and on the update schedule.
    #[default]
    Estimate,
    /// A fixed covariance, never updated. `CovarianceParams::identity()`
    /// turns the fit into classical second-order boosting.
    Fixed(CovarianceParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    /// Maximum number of trees, `K`.
    pub n_trees: usize,
    pub grow: GrowConfig,
    pub family: CovarianceFamily,
    pub covariance: CovarianceSource,
    pub lwmlr: LwmlrSettings,
    pub fgls: FglsOptions,
    /// Re-estimate `Σ` after every this many trees; 0 never re-estimates.
    pub cov_update_every: usize,
    /// Stop after this many consecutive zero-output trees under an unchanged
    /// `Σ`; 0 disables early stopping.
    pub early_stop_patience: usize,
    /// Seed for the train/test split.
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            n_trees: 50,
            grow: GrowConfig::default(),
            family: CovarianceFamily::Gaussian,
            covariance: CovarianceSource::Estimate,
            lwmlr: LwmlrSettings::default(),
            fgls: FglsOptions::default(),
            cov_update_every: 1,
            early_stop_patience: 3,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::Validation("n_trees must be at least 1".into()));
        }
        self.grow.validate()?;
        self.lwmlr.validate()?;
        self.fgls.validate()?;
        if let CovarianceSource::Fixed(p) = &self.covariance {
            p.validate()?;
        }
        Ok(())
    }

    /// The same configuration with `Σ` fixed to the identity.
    pub fn with_identity_covariance(&self) -> Self {
        Self {
            covariance: CovarianceSource::Fixed(CovarianceParams::identity()),
            cov_update_every: 0,
            ..self.clone()
        }
    }
}

/// A fitted additive model `ŷ = Σ_k f_k(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub config: FitConfig,
    pub feature_names: Vec<String>,
    /// Entry `k` is the covariance tree `k + 1` was grown under; the last
    /// entry is the one in force when fitting ended.
    pub covariance_history: Vec<CovarianceParams>,
    pub objective_trace: Vec<f64>,
    pub trees: Vec<Tree>,
}

/// An ensemble plus the training-time bookkeeping behind it.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub ensemble: Ensemble,
    pub train_index: Vec<usize>,
    /// `y − ŷ` on the training rows after the last tree.
    pub train_residuals: Vec<f64>,
    /// Raw loss before and after each tree, under the covariance it was grown with.
    pub tree_losses: Vec<(f64, f64)>,
    /// Semivariogram behind the initial covariance estimate.
    pub initial_variogram: Option<EmpiricalSemivariogram>,
}

impl Ensemble {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn leaf_counts(&self) -> Vec<usize> {
        self.trees.iter().map(Tree::n_leaves).collect()
    }

    /// Number of trees up to and including the last one with nonzero output.
    pub fn n_trees_effective(&self) -> usize {
        self.trees.iter().rposition(|t| !t.is_zero()).map_or(0, |k| k + 1)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFileRef {
            version: MODEL_VERSION,
            config: &self.config,
            feature_names: &self.feature_names,
            covariance_history: &self.covariance_history,
            objective_trace: &self.objective_trace,
            trees: &self.trees,
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::Format {
            location: "model".into(),
            message: e.to_string(),
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Format {
            location: format!("line {}, column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        let version = value
            .get("version")
            .ok_or_else(|| Error::Format {
                location: "version".into(),
                message: "missing field".into(),
            })?
            .as_u64()
            .ok_or_else(|| Error::Format {
                location: "version".into(),
                message: "not an unsigned integer".into(),
            })?;
        if version != MODEL_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: MODEL_VERSION,
            });
        }
        let file: ModelFile = serde_json::from_value(value).map_err(|e| Error::Format {
            location: "model".into(),
            message: e.to_string(),
        })?;
        if file.covariance_history.len() != file.trees.len() + 1 {
            return Err(Error::Format {
                location: "covariance_history".into(),
                message: format!(
                    "{} entries for {} trees",
                    file.covariance_history.len(),
                    file.trees.len()
                ),
            });
        }
        let m = file.feature_names.len();
        if let Some(f) = file.trees.iter().filter_map(Tree::max_feature).max() {
            if f >= m {
                return Err(Error::Format {
                    location: "trees".into(),
                    message: format!("split on feature {f} but only {m} features"),
                });
            }
        }
        Ok(Self {
            config: file.config,
            feature_names: file.feature_names,
            covariance_history: file.covariance_history,
            objective_trace: file.objective_trace,
            trees: file.trees,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Serialize)]
struct ModelFileRef<'a> {
    version: u64,
    config: &'a FitConfig,
    feature_names: &'a [String],
    covariance_history: &'a [CovarianceParams],
    objective_trace: &'a [f64],
    trees: &'a [Tree],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    #[allow(dead_code)]
    version: u64,
    config: FitConfig,
    feature_names: Vec<String>,
    covariance_history: Vec<CovarianceParams>,
    objective_trace: Vec<f64>,
    trees: Vec<Tree>,
}

/// Sum of tree outputs per row; an empty ensemble predicts zeros.
pub fn predict(ens: &Ensemble, features: &Mat<f64>) -> Result<Vec<f64>> {
    if features.ncols() != ens.n_features() {
        return Err(Error::Argument(format!(
            "model expects {} features, got {}",
            ens.n_features(),
            features.ncols()
        )));
    }
    let mut out = vec![0.0; features.nrows()];
    let mut row = vec![0.0; features.ncols()];
    for (i, o) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = features[(i, j)];
        }
        for t in &ens.trees {
            *o += t.predict_row(&row);
        }
    }
    Ok(out)
}

pub fn fit(ds: &SpatialDataset, split: &SplitIndices, cfg: &FitConfig) -> Result<Ensemble> {
    fit_with_report(ds, split, cfg).map(|r| r.ensemble)
}

/// The current covariance and what is derived from it.
struct ActiveCovariance {
    params: CovarianceParams,
    factor: Arc<SpdFactor>,
    hessian: Option<Arc<Mat<f64>>>,
}

impl ActiveCovariance {
    fn build(params: CovarianceParams, locations: &Mat<f64>) -> Result<Self> {
        let cov = build_covariance(&params, locations)?;
        let factor = Arc::new(cov.factor);
        let hessian = (locations.nrows() <= DEFAULT_DENSE_CAP).then(|| Arc::new(dense_hessian(&factor)));
        Ok(Self {
            params,
            factor,
            hessian,
        })
    }
}

pub fn fit_with_report(ds: &SpatialDataset, split: &SplitIndices, cfg: &FitConfig) -> Result<FitReport> {
    cfg.validate()?;
    let train = &split.train;
    if train.is_empty() {
        return Err(Error::InsufficientData("training set is empty".into()));
    }
    if let Some(&i) = train.iter().find(|&&i| i >= ds.n()) {
        return Err(Error::Argument(format!("training index {i} out of range")));
    }
    let locations = select_rows(ds.locations(), train);
    let features = select_rows(ds.features(), train);
    let y: Vec<f64> = train.iter().map(|&i| ds.response()[i]).collect();

    let (lwmlr, params0, initial_variogram) = match cfg.covariance {
        CovarianceSource::Estimate => {
            let lw = cfg.lwmlr.resolve(&locations)?;
            let est = fgls_estimate(&y, &locations, &lw, cfg.family, &cfg.fgls)?;
            (Some(lw), est.params, Some(est.variogram))
        }
        CovarianceSource::Fixed(p) => (None, p, None),
    };
    let mut active = ActiveCovariance::build(params0, &locations)?;
    log::info!("initial covariance {:?}", active.params);

    let mut residual = y;
    let mut trees = Vec::new();
    let mut history = vec![active.params];
    let mut trace = vec![active.factor.quad_form(&residual)];
    let mut tree_losses = Vec::new();
    let mut dirty = false;
    let mut frozen = false;
    let mut zero_run = 0;

    for k in 1..=cfg.n_trees {
        let state = match &active.hessian {
            Some(h) => loss_state_with_hessian(&residual, active.factor.clone(), h.clone())?,
            None => compute_loss_state(&residual, active.factor.clone())?,
        };
        let outcome = grow_tree_traced(&state, &features, &cfg.grow)?;
        let before = state.loss_value();
        let after = if outcome.retained {
            for (r, f) in residual.iter_mut().zip(outcome.tree.predict(&features)) {
                *r -= f;
            }
            dirty = true;
            active.factor.quad_form(&residual)
        } else {
            before
        };
        let last = *trace.last().expect("trace starts nonempty");
        trace.push(if before > 0.0 { last * (after / before) } else { last });
        tree_losses.push((before, after));
        zero_run = if outcome.tree.is_zero() { zero_run + 1 } else { 0 };
        log::debug!(
            "tree {k}: {} leaves, loss {before:.6e} -> {after:.6e}",
            outcome.tree.n_leaves()
        );
        trees.push(outcome.tree);

        let due = cfg.cov_update_every > 0 && k % cfg.cov_update_every == 0 && k < cfg.n_trees;
        if let (Some(lw), true, true, false) = (&lwmlr, due, dirty, frozen) {
            match update_covariance(&residual, &locations, lw, cfg) {
                Ok(next) => {
                    dirty = false;
                    if next.params != active.params {
                        active = next;
                        zero_run = 0;
                    }
                }
                Err(e) => {
                    log::warn!("covariance update after tree {k} failed, keeping previous estimate: {e}");
                    frozen = true;
                }
            }
        }
        history.push(active.params);
        if cfg.early_stop_patience > 0 && zero_run >= cfg.early_stop_patience {
            log::info!("early stop after {k} trees");
            break;
        }
    }

    Ok(FitReport {
        ensemble: Ensemble {
            config: cfg.clone(),
            feature_names: ds.feature_names().to_vec(),
            covariance_history: history,
            objective_trace: trace,
            trees,
        },
        train_index: train.clone(),
        train_residuals: residual,
        tree_losses,
        initial_variogram,
    })
}

fn update_covariance(
    residual: &[f64],
    locations: &Mat<f64>,
    lw: &LwmlrConfig,
    cfg: &FitConfig,
) -> Result<ActiveCovariance> {
    let est = fgls_estimate(residual, locations, lw, cfg.family, &cfg.fgls)?;
    ActiveCovariance::build(est.params, locations)
}
