//! Locally weighted mixture of linear regressions, used to detrend residuals.
//!
//! The trend is `Σ_j π_j(s) k_j(s)ᵀ β_j` with normalised Gaussian kernels
//! `π_j(s) ∝ v_j^{-d} exp(-‖s − μ_j‖² / (2 v_j²))`, which is linear in the
//! stacked coefficients `B` once the design `X = [diag(π_1) X_1, …]` is built.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::euclidean;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Basis {
    /// `k(s) = (1)`.
    Constant,
    /// `k(s) = (1, s_1, …, s_d)`.
    #[default]
    Linear,
}

impl Basis {
    pub fn len(self, d: usize) -> usize {
        match self {
            Basis::Constant => 1,
            Basis::Linear => 1 + d,
        }
    }
}

/// Resolved kernel mixture: centers `μ_j`, isotropic scales `v_j`, basis.
#[derive(Debug, Clone, PartialEq)]
pub struct LwmlrConfig {
    centers: Vec<Vec<f64>>,
    scales: Vec<f64>,
    basis: Basis,
}

impl LwmlrConfig {
    pub fn new(centers: Vec<Vec<f64>>, scales: Vec<f64>, basis: Basis) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::Argument("LWMLR needs at least one component".into()));
        }
        if scales.len() != centers.len() {
            return Err(Error::Argument("one kernel scale per center required".into()));
        }
        let d = centers[0].len();
        if centers.iter().any(|c| c.len() != d || c.iter().any(|v| !v.is_finite())) {
            return Err(Error::Argument("kernel centers must be finite and equal width".into()));
        }
        if scales.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Argument("kernel scales must be positive".into()));
        }
        Ok(Self {
            centers,
            scales,
            basis,
        })
    }

    /// Default construction: `k`-means centers (seed 0) and a common scale
    /// equal to the median nearest-other-center distance, unless `scale`
    /// overrides it.
    pub fn auto(locations: &Mat<f64>, components: usize, basis: Basis, scale: Option<f64>) -> Result<Self> {
        let centers = kmeans_centers(locations, components, 0)?;
        let v = match scale {
            Some(v) => v,
            None => default_scale(locations, &centers),
        };
        Self::new(centers, vec![v; components], basis)
    }

    pub fn components(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn basis(&self) -> Basis {
        self.basis
    }

    /// Number of design columns, `J · q`.
    pub fn width(&self) -> usize {
        self.components() * self.basis.len(self.centers[0].len())
    }
}

/// User-facing LWMLR knobs, resolved against training locations at fit time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LwmlrSettings {
    pub components: usize,
    pub basis: Basis,
    pub scale: Option<f64>,
}

impl Default for LwmlrSettings {
    fn default() -> Self {
        Self {
            components: 4,
            basis: Basis::Linear,
            scale: None,
        }
    }
}

impl LwmlrSettings {
    pub fn resolve(&self, locations: &Mat<f64>) -> Result<LwmlrConfig> {
        LwmlrConfig::auto(locations, self.components, self.basis, self.scale)
    }

    pub fn validate(&self) -> Result<()> {
        if self.components == 0 {
            return Err(Error::Validation("lwmlr.components must be at least 1".into()));
        }
        if let Some(v) = self.scale {
            if !(v > 0.0) {
                return Err(Error::Validation("lwmlr.scale must be positive".into()));
            }
        }
        Ok(())
    }
}

fn default_scale(locations: &Mat<f64>, centers: &[Vec<f64>]) -> f64 {
    let mut nearest: Vec<f64> = centers
        .iter()
        .enumerate()
        .filter_map(|(i, c)| {
            centers
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, o)| euclidean(c, o))
                .filter(|h| *h > 0.0)
                .min_by(f64::total_cmp)
        })
        .collect();
    if !nearest.is_empty() {
        nearest.sort_by(f64::total_cmp);
        let m = nearest.len();
        return if m % 2 == 1 {
            nearest[m / 2]
        } else {
            0.5 * (nearest[m / 2 - 1] + nearest[m / 2])
        };
    }
    // Single (or coincident) centers: RMS spread of the points around them.
    let n = locations.nrows();
    let c = &centers[0];
    let ms = (0..n)
        .map(|i| {
            (0..locations.ncols())
                .map(|k| (locations[(i, k)] - c[k]).powi(2))
                .sum::<f64>()
        })
        .sum::<f64>()
        / n as f64;
    if ms > 0.0 {
        ms.sqrt()
    } else {
        1.0
    }
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans_centers(locations: &Mat<f64>, k: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let n = locations.nrows();
    let d = locations.ncols();
    if k == 0 || k > n {
        return Err(Error::Argument(format!(
            "cannot place {k} centers on {n} points"
        )));
    }
    let points: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..d).map(|j| locations[(i, j)]).collect())
        .collect();
    let mut r = rng::seeded(seed);
    let first = ((rng::uniform(&mut r) * n as f64) as usize).min(n - 1);
    let mut centers = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng::uniform(&mut r) * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, w) in d2.iter().enumerate() {
                acc += w;
                if acc > target {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            centers.len()
        };
        centers.push(points[next].clone());
        let c = centers.last().unwrap();
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, c));
        }
    }

    let mut assignment = vec![usize::MAX; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b])))
                .unwrap();
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[assignment[i]] += 1;
            for j in 0..d {
                sums[assignment[i]][j] += p[j];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    centers[c][j] = sums[c][j] / counts[c] as f64;
                }
            }
        }
    }
    Ok(centers)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Normalised kernel weights `π_j(s_i)` for one location.
pub(crate) fn kernel_weights(s: &[f64], cfg: &LwmlrConfig, row: usize) -> Result<Vec<f64>> {
    let d = s.len() as i32;
    let raw: Vec<f64> = cfg
        .centers
        .iter()
        .zip(&cfg.scales)
        .map(|(mu, &v)| v.powi(-d) * (-sq_dist(s, mu) / (2.0 * v * v)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::DegenerateKernel { row });
    }
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// `n × (J·q)` design matrix with column block `j` equal to `diag(π_j) X_j`.
pub fn lwmlr_design(locations: &Mat<f64>, cfg: &LwmlrConfig) -> Result<Mat<f64>> {
    let n = locations.nrows();
    let d = locations.ncols();
    if cfg.centers[0].len() != d {
        return Err(Error::Argument(format!(
            "kernel centers have dimension {}, locations {d}",
            cfg.centers[0].len()
        )));
    }
    let q = cfg.basis.len(d);
    let mut x = Mat::<f64>::zeros(n, cfg.width());
    let mut s = vec![0.0; d];
    for i in 0..n {
        for (k, v) in s.iter_mut().enumerate() {
            *v = locations[(i, k)];
        }
        let pi = kernel_weights(&s, cfg, i)?;
        for (j, &w) in pi.iter().enumerate() {
            let base = j * q;
            x[(i, base)] = w;
            if cfg.basis == Basis::Linear {
                for k in 0..d {
                    x[(i, base + 1 + k)] = w * s[k];
                }
            }
        }
    }
    Ok(x)
}
