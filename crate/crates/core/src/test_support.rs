use faer::Mat;

use crate::covariance::symmetrize;
use crate::rng;

/// `A Aᵀ + 0.1 n I` for a standard normal `A`.
pub(crate) fn random_spd(n: usize, seed: u64) -> Mat<f64> {
    let mut r = rng::seeded(seed);
    let mut z = vec![0.0; n * n];
    rng::fill_standard_normal(&mut r, &mut z);
    let a = Mat::from_fn(n, n, |i, j| z[i * n + j]);
    let mut s = &a * a.transpose();
    for i in 0..n {
        s[(i, i)] += n as f64 * 0.1;
    }
    symmetrize(&mut s);
    s
}

pub(crate) fn random_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::seeded(seed);
    let mut z = vec![0.0; n];
    rng::fill_standard_normal(&mut r, &mut z);
    z
}
