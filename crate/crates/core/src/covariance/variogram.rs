use std::io::Write;
use std::path::Path;

use faer::Mat;

use super::{CovarianceFamily, CovarianceParams};
use crate::error::{Error, Result};

/// Distance-binned semivariances of a residual field.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalSemivariogram {
    /// Mean pair distance within each retained bin.
    pub bin_centers: Vec<f64>,
    pub semivariances: Vec<f64>,
    pub pair_counts: Vec<u64>,
}

impl EmpiricalSemivariogram {
    pub fn new(bin_centers: Vec<f64>, semivariances: Vec<f64>, pair_counts: Vec<u64>) -> Result<Self> {
        let b = bin_centers.len();
        if semivariances.len() != b || pair_counts.len() != b {
            return Err(Error::Argument("variogram vectors differ in length".into()));
        }
        if bin_centers.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Argument("bin centers must be strictly increasing".into()));
        }
        if semivariances.iter().any(|g| !g.is_finite() || *g < 0.0) {
            return Err(Error::Argument("semivariances must be finite and non-negative".into()));
        }
        if pair_counts.iter().any(|&c| c == 0) {
            return Err(Error::Argument("every retained bin needs at least one pair".into()));
        }
        Ok(Self {
            bin_centers,
            semivariances,
            pair_counts,
        })
    }

    pub fn len(&self) -> usize {
        self.bin_centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bin_centers.is_empty()
    }

    /// Writes `bin_center,semivariance,pair_count` rows.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("bin_center,semivariance,pair_count\n");
        for i in 0..self.len() {
            out.push_str(&format!(
                "{},{},{}\n",
                self.bin_centers[i], self.semivariances[i], self.pair_counts[i]
            ));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

/// Classical (Matheron) estimator over equal-width distance bins.
///
/// Bin `b` covers `[b·w, (b+1)·w)` with `w = max_dist / n_bins`; the last bin
/// also takes pairs at exactly `max_dist`. `max_dist = None` uses half the
/// largest pairwise distance. Empty bins are dropped.
pub fn empirical_semivariogram(
    residuals: &[f64],
    locations: &Mat<f64>,
    n_bins: usize,
    max_dist: Option<f64>,
) -> Result<EmpiricalSemivariogram> {
    let n = residuals.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "variogram needs at least 2 points, got {n}"
        )));
    }
    if locations.nrows() != n {
        return Err(Error::Argument("residuals and locations differ in length".into()));
    }
    if n_bins == 0 {
        return Err(Error::Argument("n_bins must be at least 1".into()));
    }
    let d = locations.ncols();
    let dist = |i: usize, j: usize| -> f64 {
        let mut s = 0.0;
        for k in 0..d {
            let dx = locations[(i, k)] - locations[(j, k)];
            s += dx * dx;
        }
        s.sqrt()
    };
    let max_dist = match max_dist {
        Some(m) => m,
        None => {
            let mut m: f64 = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    m = m.max(dist(i, j));
                }
            }
            0.5 * m
        }
    };
    if !(max_dist > 0.0) {
        return Err(Error::EmptyVariogram { max_dist });
    }
    let width = max_dist / n_bins as f64;
    let mut sq = vec![0.0; n_bins];
    let mut hs = vec![0.0; n_bins];
    let mut counts = vec![0u64; n_bins];
    for i in 0..n {
        for j in (i + 1)..n {
            let h = dist(i, j);
            if h > max_dist {
                continue;
            }
            let b = ((h / width) as usize).min(n_bins - 1);
            let diff = residuals[i] - residuals[j];
            sq[b] += diff * diff;
            hs[b] += h;
            counts[b] += 1;
        }
    }
    let mut centers = Vec::new();
    let mut gammas = Vec::new();
    let mut kept = Vec::new();
    for b in 0..n_bins {
        if counts[b] > 0 {
            let c = counts[b] as f64;
            centers.push(hs[b] / c);
            gammas.push(sq[b] / (2.0 * c));
            kept.push(counts[b]);
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyVariogram { max_dist });
    }
    Ok(EmpiricalSemivariogram {
        bin_centers: centers,
        semivariances: gammas,
        pair_counts: kept,
    })
}

/// Cressie-weighted least squares: `Σ_b N_b (γ̂_b / γ(h_b) − 1)²`.
pub fn cressie_objective(emp: &EmpiricalSemivariogram, params: &CovarianceParams) -> f64 {
    let mut total = 0.0;
    for b in 0..emp.len() {
        let model = params.semivariance(emp.bin_centers[b]);
        if !(model > 0.0) {
            return f64::INFINITY;
        }
        let ratio = emp.semivariances[b] / model - 1.0;
        total += emp.pair_counts[b] as f64 * ratio * ratio;
    }
    total
}

/// Box the parametric fit searches in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariogramBounds {
    pub nugget_max: f64,
    pub sill_max: f64,
    pub range_min: f64,
    pub range_max: f64,
}

impl VariogramBounds {
    /// Nugget and sill in `[0, 2·max γ̂]`; range in
    /// `[first lag / 10, 10 · last lag]`.
    pub fn for_empirical(emp: &EmpiricalSemivariogram) -> Self {
        let gmax = emp.semivariances.iter().copied().fold(0.0, f64::max);
        let h_first = emp.bin_centers[0];
        let h_last = *emp.bin_centers.last().unwrap();
        Self {
            nugget_max: 2.0 * gmax,
            sill_max: 2.0 * gmax,
            range_min: 0.1 * h_first,
            range_max: 10.0 * h_last,
        }
    }

    fn decode(&self, family: CovarianceFamily, x: &[f64; 3]) -> CovarianceParams {
        let (lo, hi) = (self.range_min.ln(), self.range_max.ln());
        CovarianceParams {
            family,
            nugget: x[0] * self.nugget_max,
            sill: x[1] * self.sill_max,
            range: (lo + x[2] * (hi - lo)).exp(),
        }
    }
}

const MULTISTARTS: usize = 8;

/// Fits `(nugget, sill, range)` of `family` to `emp`.
///
/// Runs a box-projected Nelder–Mead from eight starts log-spaced in range
/// (nugget and sill initialised by weighted linear least squares at that
/// range), polishes the winner, and lets a pure-nugget model win ties.
pub fn fit_variogram(emp: &EmpiricalSemivariogram, family: CovarianceFamily) -> Result<CovarianceParams> {
    if emp.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "variogram fit needs at least 3 bins, got {}",
            emp.len()
        )));
    }
    let bounds = VariogramBounds::for_empirical(emp);
    if !(bounds.sill_max > 0.0) || !(bounds.range_min > 0.0) {
        return Err(Error::FitFailure { best: None });
    }
    let objective = |x: &[f64; 3]| cressie_objective(emp, &bounds.decode(family, x));

    let mut best: Option<([f64; 3], f64)> = None;
    let consider = |x: [f64; 3], f: f64, best: &mut Option<([f64; 3], f64)>| {
        if f.is_finite() && best.is_none_or(|(_, bf)| f < bf) {
            *best = Some((x, f));
        }
    };
    for k in 0..MULTISTARTS {
        let xr = (k as f64 + 0.5) / MULTISTARTS as f64;
        let range = bounds.decode(family, &[0.0, 0.0, xr]).range;
        let (nugget, sill) = linear_start(emp, family, range);
        let x0 = [
            (nugget / bounds.nugget_max).clamp(0.0, 1.0),
            (sill / bounds.sill_max).clamp(0.0, 1.0),
            xr,
        ];
        let (x, f) = nelder_mead_box(&objective, x0, 0.1, 4000);
        consider(x, f, &mut best);
    }
    let Some((mut x, mut f)) = best else {
        return Err(Error::FitFailure { best: None });
    };
    // Restart from the incumbent until a restart stops paying off.
    for _ in 0..5 {
        let (x2, f2) = nelder_mead_box(&objective, x, 0.05, 4000);
        if f2 < f {
            let gain = f - f2;
            x = x2;
            f = f2;
            if gain <= 1e-14 * (1.0 + f) {
                break;
            }
        } else {
            break;
        }
    }
    let mut params = bounds.decode(family, &x);

    // Pure nugget: for a constant model c the objective is minimised at
    // c = Σ N γ̂² / Σ N γ̂.
    let (num, den) = (0..emp.len()).fold((0.0, 0.0), |(a, b), i| {
        let w = emp.pair_counts[i] as f64;
        let g = emp.semivariances[i];
        (a + w * g * g, b + w * g)
    });
    if den > 0.0 {
        let nugget_only = CovarianceParams {
            family,
            nugget: num / den,
            sill: 0.0,
            range: params.range,
        };
        let fn_only = cressie_objective(emp, &nugget_only);
        if fn_only <= f + 1e-12 * (1.0 + f) {
            params = nugget_only;
            f = fn_only;
        }
    }
    if !f.is_finite() || params.validate().is_err() {
        return Err(Error::FitFailure { best: Some(params) });
    }
    Ok(params)
}

/// Weighted least squares of `γ̂_b ≈ a + c·(1 − ρ(h_b))` with weights
/// `N_b / γ̂_b²`, clamped to non-negative values.
fn linear_start(emp: &EmpiricalSemivariogram, family: CovarianceFamily, range: f64) -> (f64, f64) {
    let (mut s00, mut s01, mut s11, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mean = emp.semivariances.iter().sum::<f64>() / emp.len() as f64;
    for b in 0..emp.len() {
        let g = emp.semivariances[b];
        let w = emp.pair_counts[b] as f64 / (g * g).max(1e-300 + (1e-6 * mean).powi(2));
        let z = 1.0 - family.correlation(emp.bin_centers[b], range);
        s00 += w;
        s01 += w * z;
        s11 += w * z * z;
        t0 += w * g;
        t1 += w * g * z;
    }
    let det = s00 * s11 - s01 * s01;
    if det.abs() <= 1e-12 * (s00 * s11).abs() {
        return (mean, 0.0);
    }
    let a = (s11 * t0 - s01 * t1) / det;
    let c = (s00 * t1 - s01 * t0) / det;
    match (a >= 0.0, c >= 0.0) {
        (true, true) => (a, c),
        (false, true) => (0.0, (t1 / s11).max(0.0)),
        _ => (mean, 0.0),
    }
}

/// Nelder–Mead on the unit cube; trial points are projected onto the box.
fn nelder_mead_box<F>(f: &F, x0: [f64; 3], step: f64, max_evals: usize) -> ([f64; 3], f64)
where
    F: Fn(&[f64; 3]) -> f64,
{
    let clamp = |mut x: [f64; 3]| {
        for v in &mut x {
            *v = v.clamp(0.0, 1.0);
        }
        x
    };
    let eval = |x: &[f64; 3]| {
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut simplex: Vec<([f64; 3], f64)> = Vec::with_capacity(4);
    let x0 = clamp(x0);
    simplex.push((x0, eval(&x0)));
    for k in 0..3 {
        let mut x = x0;
        // Step inward when at the upper face.
        x[k] = if x[k] + step <= 1.0 { x[k] + step } else { x[k] - step };
        let x = clamp(x);
        simplex.push((x, eval(&x)));
    }
    let mut evals = 4;
    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (fb, fw) = (simplex[0].1, simplex[3].1);
        let size = (1..4)
            .map(|i| {
                (0..3)
                    .map(|k| (simplex[i].0[k] - simplex[0].0[k]).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if (fw - fb).abs() <= 1e-15 * (fb.abs() + 1e-300) && size < 1e-12 {
            break;
        }
        if size < 1e-14 {
            break;
        }
        let mut centroid = [0.0; 3];
        for (x, _) in &simplex[..3] {
            for k in 0..3 {
                centroid[k] += x[k] / 3.0;
            }
        }
        let worst = simplex[3].0;
        let along = |t: f64| {
            let mut x = [0.0; 3];
            for k in 0..3 {
                x[k] = centroid[k] + t * (worst[k] - centroid[k]);
            }
            clamp(x)
        };
        let xr = along(-1.0);
        let fr = eval(&xr);
        evals += 1;
        if fr < simplex[0].1 {
            let xe = along(-2.0);
            let fe = eval(&xe);
            evals += 1;
            simplex[3] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[2].1 {
            simplex[3] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[3].1 {
                let xc = along(-0.5);
                (xc, eval(&xc))
            } else {
                let xc = along(0.5);
                (xc, eval(&xc))
            };
            evals += 1;
            if fc < simplex[3].1.min(fr) {
                simplex[3] = (xc, fc);
            } else {
                let best = simplex[0].0;
                for item in simplex.iter_mut().skip(1) {
                    let mut x = [0.0; 3];
                    for k in 0..3 {
                        x[k] = best[k] + 0.5 * (item.0[k] - best[k]);
                    }
                    *item = (x, eval(&x));
                }
                evals += 3;
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex[0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_field(n: usize, seed: u64) -> (Vec<f64>, Mat<f64>) {
        let mut r = rng::seeded(seed);
        let locs = Mat::from_fn(n, 2, |_, _| 10.0 * rng::uniform(&mut r));
        let mut z = vec![0.0; n];
        rng::fill_standard_normal(&mut r, &mut z);
        (z, locs)
    }

    #[test]
    fn constant_field_has_zero_semivariance() {
        let (_, locs) = random_field(20, 1);
        let emp = empirical_semivariogram(&[3.0; 20], &locs, 5, None).unwrap();
        assert!(emp.semivariances.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_pair() {
        let locs = Mat::from_fn(2, 1, |i, _| i as f64);
        let emp = empirical_semivariogram(&[0.0, 2.0], &locs, 1, Some(1.0)).unwrap();
        assert_eq!(emp.semivariances, vec![2.0]);
        assert_eq!(emp.pair_counts, vec![1]);
        assert_eq!(emp.bin_centers, vec![1.0]);
    }

    #[test]
    fn matches_pair_enumeration_bitwise() {
        for seed in 0..3 {
            let (r, locs) = random_field(50 + 25 * seed as usize, seed);
            let n = r.len();
            let n_bins = 15;
            let emp = empirical_semivariogram(&r, &locs, n_bins, None).unwrap();

            // Oracle: list every pair with its distance, then aggregate per bin.
            let mut pairs = Vec::new();
            for i in 0..n {
                for j in (i + 1)..n {
                    let h = ((locs[(i, 0)] - locs[(j, 0)]).powi(2)
                        + (locs[(i, 1)] - locs[(j, 1)]).powi(2))
                    .sqrt();
                    pairs.push((h, (r[i] - r[j]).powi(2)));
                }
            }
            let max_dist = 0.5 * pairs.iter().map(|p| p.0).fold(0.0, f64::max);
            let width = max_dist / n_bins as f64;
            let mut out = Vec::new();
            for b in 0..n_bins {
                let in_bin: Vec<&(f64, f64)> = pairs
                    .iter()
                    .filter(|(h, _)| *h <= max_dist && ((h / width) as usize).min(n_bins - 1) == b)
                    .collect();
                if in_bin.is_empty() {
                    continue;
                }
                let mut s = 0.0;
                let mut hs = 0.0;
                for (h, sq) in &in_bin {
                    s += sq;
                    hs += h;
                }
                let c = in_bin.len() as f64;
                out.push((hs / c, s / (2.0 * c), in_bin.len() as u64));
            }
            assert_eq!(out.len(), emp.len());
            for (b, (h, g, c)) in out.into_iter().enumerate() {
                assert_eq!(h.to_bits(), emp.bin_centers[b].to_bits());
                assert_eq!(g.to_bits(), emp.semivariances[b].to_bits());
                assert_eq!(c, emp.pair_counts[b]);
            }
        }
    }

    #[test]
    fn errors() {
        let locs = Mat::from_fn(1, 1, |_, _| 0.0);
        assert!(matches!(
            empirical_semivariogram(&[1.0], &locs, 3, None),
            Err(Error::InsufficientData(_))
        ));
        let locs = Mat::from_fn(2, 1, |i, _| 5.0 * i as f64);
        assert!(matches!(
            empirical_semivariogram(&[1.0, 2.0], &locs, 3, Some(1.0)),
            Err(Error::EmptyVariogram { .. })
        ));
    }

    fn model_curve(p: &CovarianceParams, bins: usize, h_max: f64) -> EmpiricalSemivariogram {
        let centers: Vec<f64> = (1..=bins).map(|b| h_max * b as f64 / bins as f64).collect();
        let gammas = centers.iter().map(|&h| p.semivariance(h)).collect();
        EmpiricalSemivariogram::new(centers, gammas, vec![100; bins]).unwrap()
    }

    #[test]
    fn recovers_noiseless_gaussian() {
        let truth = CovarianceParams::new(CovarianceFamily::Gaussian, 0.1, 1.0, 2.0).unwrap();
        let emp = model_curve(&truth, 15, 6.0);
        let fit = fit_variogram(&emp, CovarianceFamily::Gaussian).unwrap();
        assert!(((fit.nugget - 0.1) / 0.1).abs() < 1e-4, "{fit:?}");
        assert!(((fit.sill - 1.0) / 1.0).abs() < 1e-4, "{fit:?}");
        assert!(((fit.range - 2.0) / 2.0).abs() < 1e-4, "{fit:?}");
    }

    #[test]
    fn recovers_noiseless_exponential() {
        let truth = CovarianceParams::new(CovarianceFamily::Exponential, 0.2, 0.8, 1.5).unwrap();
        let emp = model_curve(&truth, 15, 6.0);
        let fit = fit_variogram(&emp, CovarianceFamily::Exponential).unwrap();
        assert!(((fit.sill - 0.8) / 0.8).abs() < 1e-4, "{fit:?}");
        assert!(((fit.range - 1.5) / 1.5).abs() < 1e-4, "{fit:?}");
    }

    #[test]
    fn flat_variogram_is_pure_nugget() {
        let emp = EmpiricalSemivariogram::new(
            (1..=10).map(|b| b as f64).collect(),
            vec![0.7; 10],
            vec![50; 10],
        )
        .unwrap();
        let fit = fit_variogram(&emp, CovarianceFamily::Gaussian).unwrap();
        assert!(fit.sill < 1e-6, "{fit:?}");
        assert!((fit.nugget - 0.7).abs() < 1e-6, "{fit:?}");
    }

    #[test]
    fn beats_dense_grid() {
        for seed in 0..3 {
            let (r, locs) = random_field(120, 10 + seed);
            let emp = empirical_semivariogram(&r, &locs, 15, None).unwrap();
            let fit = fit_variogram(&emp, CovarianceFamily::Gaussian).unwrap();
            let f_fit = cressie_objective(&emp, &fit);

            let b = VariogramBounds::for_empirical(&emp);
            let logspace = |lo: f64, hi: f64, k: usize| (lo.ln() + (hi.ln() - lo.ln()) * k as f64 / 49.0).exp();
            let mut best = f64::INFINITY;
            for i in 0..50 {
                for j in 0..50 {
                    for k in 0..50 {
                        let p = CovarianceParams {
                            family: CovarianceFamily::Gaussian,
                            nugget: logspace(1e-4 * b.nugget_max, b.nugget_max, i),
                            sill: logspace(1e-4 * b.sill_max, b.sill_max, j),
                            range: logspace(b.range_min, b.range_max, k),
                        };
                        best = best.min(cressie_objective(&emp, &p));
                    }
                }
            }
            assert!(f_fit <= best, "seed {seed}: fit {f_fit} grid {best}");
        }
    }

    #[test]
    fn too_few_bins() {
        let emp = EmpiricalSemivariogram::new(vec![1.0, 2.0], vec![0.5, 0.6], vec![3, 3]).unwrap();
        assert!(matches!(
            fit_variogram(&emp, CovarianceFamily::Gaussian),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn csv_export() {
        let emp = EmpiricalSemivariogram::new(vec![1.0, 2.0], vec![0.5, 0.25], vec![3, 4]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.csv");
        emp.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "bin_center,semivariance,pair_count\n1,0.5,3\n2,0.25,4\n");
    }
}
