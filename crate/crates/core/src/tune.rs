//! Space-filling exploration of `(λ, γ)` with leaf-count diagnostics.
//!
//! Designs are Latin hypercubes on stratum midpoints; among `R` random ones
//! the one with the smallest maximum projection criterion
//! `Σ_{i<j} Π_k (u_ik − u_jk)⁻²` (on unit-cube coordinates) is kept.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boosting::{fit, predict, FitConfig};
use crate::data::{split_n, SpatialDataset, SplitIndices};
use crate::error::{Error, Result};
use crate::evaluate::metrics;
use crate::linalg::select_rows;
use crate::rng;

pub const DEFAULT_CANDIDATES: usize = 2000;

/// A design on the unit square, one `[u_λ, u_γ]` per run.
pub type UnitDesign = Vec<[f64; 2]>;

/// `R` random midpoint Latin hypercubes with `n_runs` points each.
pub fn lhd_candidates(n_runs: usize, count: usize, seed: u64) -> Vec<UnitDesign> {
    let mut r = rng::seeded(seed);
    let mid = |k: usize| (k as f64 + 0.5) / n_runs as f64;
    (0..count)
        .map(|_| {
            let mut a: Vec<usize> = (0..n_runs).collect();
            let mut b: Vec<usize> = (0..n_runs).collect();
            a.shuffle(&mut r);
            b.shuffle(&mut r);
            a.iter().zip(&b).map(|(&i, &j)| [mid(i), mid(j)]).collect()
        })
        .collect()
}

pub fn maxpro_score(design: &[[f64; 2]]) -> f64 {
    let mut s = 0.0;
    for i in 0..design.len() {
        for j in 0..i {
            let d0 = design[i][0] - design[j][0];
            let d1 = design[i][1] - design[j][1];
            s += 1.0 / (d0 * d0 * d1 * d1);
        }
    }
    s
}

fn check_range(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if !lo.is_finite() || !hi.is_finite() || lo > hi || lo < 0.0 {
        return Err(Error::Validation(format!(
            "{name} range must satisfy 0 <= lo <= hi, got [{lo}, {hi}]"
        )));
    }
    if lo == hi {
        log::warn!("{name} range is degenerate; {name} is fixed at {lo}");
    }
    Ok(())
}

/// `n_runs` `(λ, γ)` pairs from the best of [`DEFAULT_CANDIDATES`] designs.
pub fn space_filling_design(
    n_runs: usize,
    lambda_range: (f64, f64),
    gamma_range: (f64, f64),
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    space_filling_design_with(n_runs, lambda_range, gamma_range, seed, DEFAULT_CANDIDATES)
}

pub fn space_filling_design_with(
    n_runs: usize,
    lambda_range: (f64, f64),
    gamma_range: (f64, f64),
    seed: u64,
    candidates: usize,
) -> Result<Vec<(f64, f64)>> {
    if n_runs == 0 || candidates == 0 {
        return Err(Error::Validation("n_runs and candidates must be positive".into()));
    }
    check_range("lambda", lambda_range)?;
    check_range("gamma", gamma_range)?;
    let cands = lhd_candidates(n_runs, candidates, seed);
    let mut best = 0;
    let mut best_score = f64::INFINITY;
    for (k, c) in cands.iter().enumerate() {
        let s = maxpro_score(c);
        if s < best_score {
            best = k;
            best_score = s;
        }
    }
    let map = |u: f64, (lo, hi): (f64, f64)| lo + u * (hi - lo);
    Ok(cands[best]
        .iter()
        .map(|u| (map(u[0], lambda_range), map(u[1], gamma_range)))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignPoint {
    pub lambda: f64,
    pub gamma: f64,
    /// 25th, 50th and 75th percentiles of the per-tree leaf counts.
    pub leaf_count_quartiles: (f64, f64, f64),
    pub n_trees_effective: usize,
    pub objective_final: f64,
    pub val_rmse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneOptions {
    /// Admissible range of the median leaf count.
    pub leaf_window: (f64, f64),
    /// Fraction of the training rows used for fitting; the rest validate.
    pub inner_fraction: f64,
    /// Runs in the refinement design over the top three points; 0 skips it.
    pub refine_runs: usize,
    pub seed: u64,
}

impl Default for TuneOptions {
    fn default() -> Self {
        Self {
            leaf_window: (4.0, 16.0),
            inner_fraction: 0.8,
            refine_runs: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuneResult {
    /// Evaluated points: the design, then any refinement points.
    pub points: Vec<DesignPoint>,
    pub recommended: (f64, f64),
    pub recommended_index: usize,
    /// False when no point met the leaf-count window.
    pub window_satisfied: bool,
}

/// Percentile by linear interpolation between order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn evaluate_point(
    ds: &SpatialDataset,
    inner: &SplitIndices,
    base: &FitConfig,
    (lambda, gamma): (f64, f64),
) -> Result<DesignPoint> {
    let mut cfg = base.clone();
    cfg.grow.lambda = lambda;
    cfg.grow.gamma = gamma;
    let ens = fit(ds, inner, &cfg)?;
    let pred = predict(&ens, &select_rows(ds.features(), &inner.test))?;
    let y: Vec<f64> = inner.test.iter().map(|&i| ds.response()[i]).collect();
    let mut leaves: Vec<f64> = ens.leaf_counts().iter().map(|&c| c as f64).collect();
    leaves.sort_by(f64::total_cmp);
    Ok(DesignPoint {
        lambda,
        gamma,
        leaf_count_quartiles: (quantile(&leaves, 0.25), quantile(&leaves, 0.5), quantile(&leaves, 0.75)),
        n_trees_effective: ens.n_trees_effective(),
        objective_final: *ens.objective_trace.last().expect("trace is nonempty"),
        val_rmse: metrics(&y, &pred)?.rmse,
    })
}

/// Lowest validation RMSE inside the window, else overall.
fn recommend(points: &[DesignPoint], window: (f64, f64)) -> (usize, bool) {
    let pick = |admissible: &dyn Fn(&DesignPoint) -> bool| {
        points
            .iter()
            .enumerate()
            .filter(|(_, p)| admissible(p))
            .min_by(|a, b| a.1.val_rmse.total_cmp(&b.1.val_rmse).then(a.0.cmp(&b.0)))
            .map(|(k, _)| k)
    };
    let in_window = |p: &DesignPoint| {
        let q50 = p.leaf_count_quartiles.1;
        q50 >= window.0 && q50 <= window.1
    };
    match pick(&in_window) {
        Some(k) => (k, true),
        None => {
            log::warn!("no design point has a median leaf count in {window:?}; ignoring the window");
            (pick(&|_| true).expect("design is nonempty"), false)
        }
    }
}

/// Fits one ensemble per design point on an inner split of the training rows.
pub fn tune(
    ds: &SpatialDataset,
    split: &SplitIndices,
    base: &FitConfig,
    design: &[(f64, f64)],
    opts: &TuneOptions,
) -> Result<TuneResult> {
    if design.is_empty() {
        return Err(Error::Validation("design is empty".into()));
    }
    let local = split_n(split.train.len(), opts.inner_fraction, opts.seed)?;
    let inner = SplitIndices {
        seed: opts.seed,
        fraction: opts.inner_fraction,
        train: local.train.iter().map(|&k| split.train[k]).collect(),
        test: local.test.iter().map(|&k| split.train[k]).collect(),
    };
    let run = |pts: &[(f64, f64)]| -> Result<Vec<DesignPoint>> {
        pts.par_iter().map(|&p| evaluate_point(ds, &inner, base, p)).collect()
    };
    let mut points = run(design)?;

    if opts.refine_runs > 0 && points.len() > 1 {
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&a, &b| points[a].val_rmse.total_cmp(&points[b].val_rmse).then(a.cmp(&b)));
        let top = &order[..order.len().min(3)];
        let span = |f: fn(&DesignPoint) -> f64| {
            let v = top.iter().map(|&k| f(&points[k]));
            (v.clone().fold(f64::INFINITY, f64::min), v.fold(f64::NEG_INFINITY, f64::max))
        };
        let refined = space_filling_design(
            opts.refine_runs,
            span(|p| p.lambda),
            span(|p| p.gamma),
            opts.seed.wrapping_add(1),
        )?;
        points.extend(run(&refined)?);
    }

    let (k, window_satisfied) = recommend(&points, opts.leaf_window);
    Ok(TuneResult {
        recommended: (points[k].lambda, points[k].gamma),
        recommended_index: k,
        points,
        window_satisfied,
    })
}

pub fn design_csv(points: &[DesignPoint]) -> String {
    let mut out = String::from("lambda,gamma,q25,q50,q75,n_trees_effective,val_rmse\n");
    for p in points {
        let (a, b, c) = p.leaf_count_quartiles;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            p.lambda, p.gamma, a, b, c, p.n_trees_effective, p.val_rmse
        ));
    }
    out
}

pub fn write_design_csv(points: &[DesignPoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, design_csv(points)).map_err(|e| Error::io(path, e))
}
