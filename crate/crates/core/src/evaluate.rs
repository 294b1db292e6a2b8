//! Out-of-sample metrics, the paired one-sided Wilcoxon test, the two
//! baselines and the replicate comparison study.

use std::path::Path;

use faer::Mat;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::boosting::{fit, predict, Ensemble, FitConfig};
use crate::covariance::{build_covariance, fgls_with_design, CovarianceFamily, CovarianceParams, FglsOptions};
use crate::data::{split_n, SpatialDataset, SplitIndices};
use crate::error::{Error, Result};
use crate::linalg::{least_squares, mat_vec, select_rows};
use crate::simulate::{simulate, SimSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Mean absolute error.
    pub mge: f64,
    pub re_percent: f64,
    pub rmse: f64,
    pub n_test: usize,
}

/// How the relative error is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelativeError {
    /// `100 Σ|e| / Σ|y|`.
    #[default]
    Aggregate,
    /// `100 mean(|e_i| / |y_i|)`.
    PerPoint,
}

pub fn metrics(y_true: &[f64], y_pred: &[f64]) -> Result<MetricReport> {
    metrics_with(y_true, y_pred, RelativeError::Aggregate)
}

pub fn metrics_with(y_true: &[f64], y_pred: &[f64], re: RelativeError) -> Result<MetricReport> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Argument(format!(
            "{} truths for {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::Argument("no predictions to score".into()));
    }
    let n = y_true.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut y_abs = 0.0;
    let mut ratio = 0.0;
    for (&y, &p) in y_true.iter().zip(y_pred) {
        let e = (y - p).abs();
        abs += e;
        sq += e * e;
        y_abs += y.abs();
        if re == RelativeError::PerPoint && e > 0.0 {
            if y == 0.0 {
                return Err(Error::UndefinedRelativeError);
            }
            ratio += e / y.abs();
        }
    }
    let re_percent = match re {
        RelativeError::Aggregate if abs == 0.0 => 0.0,
        RelativeError::Aggregate if y_abs == 0.0 => return Err(Error::UndefinedRelativeError),
        RelativeError::Aggregate => 100.0 * abs / y_abs,
        RelativeError::PerPoint => 100.0 * ratio / n,
    };
    Ok(MetricReport {
        mge: abs / n,
        re_percent,
        rmse: (sq / n).sqrt(),
        n_test: y_true.len(),
    })
}

/// Nonzero paired differences with their doubled mid-ranks.
struct SignedRanks {
    doubled_ranks: Vec<u64>,
    positive: Vec<bool>,
    tie_sizes: Vec<usize>,
}

fn signed_ranks(a: &[f64], b: &[f64]) -> Result<SignedRanks> {
    if a.len() != b.len() {
        return Err(Error::Argument("paired samples differ in length".into()));
    }
    if a.len() < 5 {
        return Err(Error::Argument(format!("need at least 5 pairs, got {}", a.len())));
    }
    let mut d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    if d.is_empty() {
        return Err(Error::Degenerate("all paired differences are zero".into()));
    }
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("paired differences must be finite".into()));
    }
    d.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    let n = d.len();
    let mut doubled_ranks = vec![0; n];
    let mut tie_sizes = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && d[j].abs() == d[i].abs() {
            j += 1;
        }
        // Ranks i+1..=j share (i+1+j)/2; doubled that is an integer.
        for r in &mut doubled_ranks[i..j] {
            *r = (i + 1 + j) as u64;
        }
        tie_sizes.push(j - i);
        i = j;
    }
    Ok(SignedRanks {
        doubled_ranks,
        positive: d.iter().map(|v| *v > 0.0).collect(),
        tie_sizes,
    })
}

impl SignedRanks {
    fn doubled_w_plus(&self) -> u64 {
        self.doubled_ranks
            .iter()
            .zip(&self.positive)
            .filter(|(_, p)| **p)
            .map(|(r, _)| r)
            .sum()
    }

    /// `P(W⁺ ≤ observed)` over all `2ⁿ` equally likely sign assignments.
    fn exact(&self) -> f64 {
        let n = self.doubled_ranks.len();
        let total: u64 = self.doubled_ranks.iter().sum();
        let obs = self.doubled_w_plus() as usize;
        // Distribution of the doubled statistic by subset-sum counting.
        let mut counts = vec![0u64; total as usize + 1];
        counts[0] = 1;
        for &r in &self.doubled_ranks {
            for s in (r as usize..=total as usize).rev() {
                counts[s] += counts[s - r as usize];
            }
        }
        let le: u64 = counts[..=obs].iter().sum();
        le as f64 / 2f64.powi(n as i32)
    }

    fn normal(&self) -> f64 {
        let n = self.doubled_ranks.len() as f64;
        let w = self.doubled_w_plus() as f64 / 2.0;
        let mean = n * (n + 1.0) / 4.0;
        let ties: f64 = self.tie_sizes.iter().map(|&t| (t * t * t - t) as f64).sum();
        let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - ties / 48.0;
        if !(var > 0.0) {
            return if w <= mean { 1.0 } else { 0.0 };
        }
        let z = (w - mean + 0.5) / var.sqrt();
        Normal::standard().cdf(z)
    }
}

/// Upper bound on nonzero differences for which the exact null is used.
pub const WILCOXON_EXACT_MAX: usize = 12;

/// One-sided paired signed-rank test of `a < b`.
///
/// Zero differences are dropped and tied magnitudes get mid-ranks. The p-value
/// is `P(W⁺ ≤ w⁺_obs)`, exact for at most 12 nonzero differences and from the
/// tie- and continuity-corrected normal approximation above that.
pub fn wilcoxon_one_sided(a: &[f64], b: &[f64]) -> Result<f64> {
    let sr = signed_ranks(a, b)?;
    Ok(if sr.doubled_ranks.len() <= WILCOXON_EXACT_MAX {
        sr.exact()
    } else {
        sr.normal()
    })
}

/// As [`wilcoxon_one_sided`], always by exact enumeration.
pub fn wilcoxon_exact(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(signed_ranks(a, b)?.exact())
}

/// As [`wilcoxon_one_sided`], always by the normal approximation.
pub fn wilcoxon_normal(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(signed_ranks(a, b)?.normal())
}

/// Boosting with `Σ` fixed to the identity: classical second-order boosting.
pub fn baseline_identity_boosting(ds: &SpatialDataset, split: &SplitIndices, cfg: &FitConfig) -> Result<Ensemble> {
    fit(ds, split, &cfg.with_identity_covariance())
}

/// How the linear-regression baseline treats the error covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GlsMode {
    Ols,
    Fgls {
        family: CovarianceFamily,
        options: FglsOptions,
    },
    Fixed(CovarianceParams),
}

#[derive(Debug, Clone)]
pub struct LinearFit {
    /// Intercept first, then one coefficient per feature.
    pub coefficients: Vec<f64>,
    pub covariance: Option<CovarianceParams>,
    /// Predictions on the test rows, from covariates only.
    pub predictions: Vec<f64>,
}

fn with_intercept(x: &Mat<f64>) -> Mat<f64> {
    Mat::from_fn(x.nrows(), x.ncols() + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] })
}

/// Linear regression of `y` on `[1, features]`.
pub fn baseline_gls_regression(ds: &SpatialDataset, split: &SplitIndices, mode: GlsMode) -> Result<LinearFit> {
    let design = with_intercept(&select_rows(ds.features(), &split.train));
    let y: Vec<f64> = split.train.iter().map(|&i| ds.response()[i]).collect();
    let locations = select_rows(ds.locations(), &split.train);
    let (coefficients, covariance) = match mode {
        GlsMode::Ols => (least_squares(design.as_ref(), &y)?, None),
        GlsMode::Fgls { family, options } => {
            let est = fgls_with_design(&y, &locations, &design, family, &options)?;
            (est.coefficients, Some(est.params))
        }
        GlsMode::Fixed(params) => {
            let cov = build_covariance(&params, &locations)?;
            let xw = cov.factor.whiten(design.as_ref());
            let yw = cov.factor.whiten(Mat::from_fn(y.len(), 1, |i, _| y[i]).as_ref());
            let yw: Vec<f64> = (0..y.len()).map(|i| yw[(i, 0)]).collect();
            (least_squares(xw.as_ref(), &yw)?, Some(params))
        }
    };
    let test = with_intercept(&select_rows(ds.features(), &split.test));
    Ok(LinearFit {
        predictions: mat_vec(test.as_ref(), &coefficients),
        coefficients,
        covariance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    BoostS,
    IdentityBoosting,
    GlsRegression,
    OlsRegression,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::BoostS,
        Method::IdentityBoosting,
        Method::GlsRegression,
        Method::OlsRegression,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::BoostS => "boost_s",
            Method::IdentityBoosting => "identity_boosting",
            Method::GlsRegression => "gls_regression",
            Method::OlsRegression => "ols_regression",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mge,
    Re,
    Rmse,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Mge, Metric::Re, Metric::Rmse];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Mge => "mge",
            Metric::Re => "re",
            Metric::Rmse => "rmse",
        }
    }

    fn of(self, r: &MetricReport) -> f64 {
        match self {
            Metric::Mge => r.mge,
            Metric::Re => r.re_percent,
            Metric::Rmse => r.rmse,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    pub replicates: usize,
    /// Replicate `r` simulates with `sim.seed + r` and splits with `fit.seed + r`.
    pub sim: SimSpec,
    pub train_fraction: f64,
    pub fit: FitConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            replicates: 20,
            sim: SimSpec::default(),
            train_fraction: 0.15,
            fit: FitConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReplicateResult {
    pub replicate: usize,
    /// Indexed like [`Method::ALL`].
    pub metrics: [MetricReport; 4],
}

#[derive(Debug, Clone)]
pub struct StudyResult {
    pub replicates: Vec<ReplicateResult>,
}

impl StudyResult {
    pub fn column(&self, method: Method, metric: Metric) -> Vec<f64> {
        let k = Method::ALL.iter().position(|&m| m == method).expect("known method");
        self.replicates.iter().map(|r| metric.of(&r.metrics[k])).collect()
    }

    /// One-sided p-value for the spatial booster having the smaller `metric` than `method`.
    pub fn wilcoxon_against(&self, method: Method, metric: Metric) -> Result<f64> {
        wilcoxon_one_sided(&self.column(Method::BoostS, metric), &self.column(method, metric))
    }

    /// Fraction of replicates where the spatial booster has the strictly smaller `metric`.
    pub fn win_rate(&self, method: Method, metric: Metric) -> f64 {
        let a = self.column(Method::BoostS, metric);
        let b = self.column(method, metric);
        a.iter().zip(&b).filter(|(x, y)| x < y).count() as f64 / a.len() as f64
    }

    /// One row per replicate, one column per method, then a `wilcoxon_p` row
    /// against the spatial booster (empty in the `boost_s` column).
    pub fn to_csv(&self, metric: Metric) -> String {
        let mut out = String::from("replicate");
        for m in Method::ALL {
            out.push(',');
            out.push_str(m.name());
        }
        out.push('\n');
        let cols: Vec<Vec<f64>> = Method::ALL.iter().map(|&m| self.column(m, metric)).collect();
        for (i, r) in self.replicates.iter().enumerate() {
            out.push_str(&r.replicate.to_string());
            for c in &cols {
                out.push_str(&format!(",{}", c[i]));
            }
            out.push('\n');
        }
        out.push_str("wilcoxon_p,,");
        let ps: Vec<String> = Method::ALL[1..]
            .iter()
            .map(|&m| match self.wilcoxon_against(m, metric) {
                Ok(p) => p.to_string(),
                Err(_) => "NaN".into(),
            })
            .collect();
        out.push_str(&ps.join(","));
        out.push('\n');
        out
    }

    pub fn write_csv(&self, metric: Metric, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv(metric)).map_err(|e| Error::io(path, e))
    }
}

/// Runs one replicate of the comparison.
pub fn run_replicate(cfg: &StudyConfig, replicate: usize) -> Result<ReplicateResult> {
    let spec = SimSpec {
        seed: cfg.sim.seed.wrapping_add(replicate as u64),
        ..cfg.sim.clone()
    };
    let ds = simulate(&spec)?.dataset;
    let split = split_n(ds.n(), cfg.train_fraction, cfg.fit.seed.wrapping_add(replicate as u64))?;
    let x_test = select_rows(ds.features(), &split.test);
    let y_test: Vec<f64> = split.test.iter().map(|&i| ds.response()[i]).collect();
    let score = |pred: Vec<f64>| metrics(&y_test, &pred);

    let boost = fit(&ds, &split, &cfg.fit)?;
    let ident = baseline_identity_boosting(&ds, &split, &cfg.fit)?;
    let gls = baseline_gls_regression(
        &ds,
        &split,
        GlsMode::Fgls {
            family: cfg.fit.family,
            options: cfg.fit.fgls,
        },
    )?;
    let ols = baseline_gls_regression(&ds, &split, GlsMode::Ols)?;
    Ok(ReplicateResult {
        replicate,
        metrics: [
            score(predict(&boost, &x_test)?)?,
            score(predict(&ident, &x_test)?)?,
            score(gls.predictions)?,
            score(ols.predictions)?,
        ],
    })
}

/// Runs every replicate; results are in replicate order regardless of workers.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyResult> {
    if cfg.replicates == 0 {
        return Err(Error::Validation("replicates must be at least 1".into()));
    }
    let replicates = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| run_replicate(cfg, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(StudyResult { replicates })
}
