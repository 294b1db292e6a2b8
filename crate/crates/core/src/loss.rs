//! Mahalanobis loss `ℓ(ŷ) = (y − ŷ)ᵀ Σ⁻¹ (y − ŷ)` and the per-leaf sums the
//! tree solver works from.
//!
//! The loss carries no ½ factor, so `g = −2 Σ⁻¹ r` and `H = 2 Σ⁻¹`. Under
//! `Σ = I` both are twice the classical squared-error quantities, which means
//! `λ` here plays the role of `λ/2` in the usual boosting convention.

use std::sync::Arc;

use faer::Mat;

use crate::covariance::{symmetrize, SpdFactor};
use crate::error::{Error, Result};

/// Above this many rows the Hessian is not materialized.
pub const DEFAULT_DENSE_CAP: usize = 4096;

/// Gradient, Hessian and loss value at the current residual.
#[derive(Debug, Clone)]
pub struct LossState {
    residual: Vec<f64>,
    gradient: Vec<f64>,
    loss_value: f64,
    factor: Arc<SpdFactor>,
    hessian: Option<Arc<Mat<f64>>>,
}

/// `2 Σ⁻¹`, exactly symmetric. Reusable across states sharing one `Σ`.
pub fn dense_hessian(factor: &SpdFactor) -> Mat<f64> {
    let mut h = factor.inverse();
    for j in 0..h.ncols() {
        for i in 0..h.nrows() {
            h[(i, j)] *= 2.0;
        }
    }
    symmetrize(&mut h);
    h
}

pub fn compute_loss_state(residual: &[f64], factor: Arc<SpdFactor>) -> Result<LossState> {
    compute_loss_state_with_cap(residual, factor, DEFAULT_DENSE_CAP)
}

pub fn compute_loss_state_with_cap(
    residual: &[f64],
    factor: Arc<SpdFactor>,
    dense_cap: usize,
) -> Result<LossState> {
    let n = residual.len();
    let hessian = if n <= dense_cap {
        if factor.dim() != n {
            return Err(dim_error(n, factor.dim()));
        }
        Some(Arc::new(dense_hessian(&factor)))
    } else {
        None
    };
    LossState::assemble(residual, factor, hessian)
}

/// Builds a state with a precomputed dense Hessian (`2 Σ⁻¹` for `factor`).
pub fn loss_state_with_hessian(
    residual: &[f64],
    factor: Arc<SpdFactor>,
    hessian: Arc<Mat<f64>>,
) -> Result<LossState> {
    if hessian.nrows() != factor.dim() || hessian.ncols() != factor.dim() {
        return Err(dim_error(hessian.nrows(), factor.dim()));
    }
    LossState::assemble(residual, factor, Some(hessian))
}

fn dim_error(n: usize, dim: usize) -> Error {
    Error::Argument(format!("residual has {n} entries but covariance is {dim}x{dim}"))
}

impl LossState {
    fn assemble(
        residual: &[f64],
        factor: Arc<SpdFactor>,
        hessian: Option<Arc<Mat<f64>>>,
    ) -> Result<Self> {
        let n = residual.len();
        if factor.dim() != n {
            return Err(dim_error(n, factor.dim()));
        }
        if residual.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("residual contains non-finite values".into()));
        }
        let (gradient, loss_value) = match &hessian {
            // g = −H r keeps the identity exact in the dense case.
            Some(h) => {
                let g: Vec<f64> = (0..n)
                    .map(|i| -(0..n).map(|j| h[(i, j)] * residual[j]).sum::<f64>())
                    .collect();
                let loss = -0.5 * g.iter().zip(residual).map(|(a, b)| a * b).sum::<f64>();
                (g, loss)
            }
            None => {
                let s = factor.solve(residual);
                let loss = s.iter().zip(residual).map(|(a, b)| a * b).sum::<f64>();
                (s.iter().map(|v| -2.0 * v).collect(), loss)
            }
        };
        Ok(Self {
            residual: residual.to_vec(),
            gradient,
            loss_value: loss_value.max(0.0),
            factor,
            hessian,
        })
    }

    pub fn n(&self) -> usize {
        self.residual.len()
    }

    pub fn residual(&self) -> &[f64] {
        &self.residual
    }

    pub fn gradient(&self) -> &[f64] {
        &self.gradient
    }

    /// `rᵀ Σ⁻¹ r`.
    pub fn loss_value(&self) -> f64 {
        self.loss_value
    }

    pub fn factor(&self) -> &Arc<SpdFactor> {
        &self.factor
    }

    /// The dense Hessian, if it was materialized.
    pub fn hessian(&self) -> Option<&Arc<Mat<f64>>> {
        self.hessian.as_ref()
    }

    /// `H 1_cols`, i.e. row sums of `H` restricted to `cols`.
    pub fn hessian_indicator(&self, cols: &[usize]) -> Vec<f64> {
        let n = self.n();
        match &self.hessian {
            Some(h) => (0..n).map(|i| cols.iter().map(|&j| h[(i, j)]).sum()).collect(),
            None => {
                let mut e = vec![0.0; n];
                for &j in cols {
                    e[j] = 1.0;
                }
                self.factor.solve(&e).into_iter().map(|v| 2.0 * v).collect()
            }
        }
    }

    /// The sub-block `H[rows, cols]`, row-major.
    pub fn hessian_block(&self, rows: &[usize], cols: &[usize]) -> Vec<f64> {
        match &self.hessian {
            Some(h) => rows
                .iter()
                .flat_map(|&i| cols.iter().map(move |&j| h[(i, j)]))
                .collect(),
            None => {
                let n = self.n();
                let e = Mat::from_fn(n, cols.len(), |i, k| if cols[k] == i { 1.0 } else { 0.0 });
                let x = self.factor.solve_mat(e.as_ref());
                let x = &x;
                rows.iter()
                    .flat_map(|&i| (0..cols.len()).map(move |k| 2.0 * x[(i, k)]))
                    .collect()
            }
        }
    }

    /// `Σ_{i∈rows} Σ_{j∈cols} h_ij`, summed row by row in the given order.
    pub fn block_sum(&self, rows: &[usize], cols: &[usize]) -> f64 {
        match &self.hessian {
            Some(h) => rows
                .iter()
                .map(|&i| cols.iter().map(|&j| h[(i, j)]).sum::<f64>())
                .sum(),
            None => {
                let c = self.hessian_indicator(cols);
                rows.iter().map(|&i| c[i]).sum()
            }
        }
    }
}

/// Gradient and Hessian sums over the leaves of a partition.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafBlocks {
    leaves: Vec<Vec<usize>>,
    g_sum: Vec<f64>,
    /// `T × T`, row-major, exactly symmetric.
    s: Vec<f64>,
}

impl LeafBlocks {
    pub fn n_leaves(&self) -> usize {
        self.leaves.len()
    }

    /// Index set of each leaf, sorted ascending.
    pub fn leaves(&self) -> &[Vec<usize>] {
        &self.leaves
    }

    /// `G̃_p`.
    pub fn g_sums(&self) -> &[f64] {
        &self.g_sum
    }

    /// `S_{p,q}`.
    pub fn s(&self, p: usize, q: usize) -> f64 {
        self.s[p * self.leaves.len() + q]
    }

    /// `S` as a row-major `T × T` slice.
    pub fn s_matrix(&self) -> &[f64] {
        &self.s
    }

    /// Builds blocks directly from sums; used by tests and the split search.
    pub fn from_parts(leaves: Vec<Vec<usize>>, g_sum: Vec<f64>, s: Vec<f64>) -> Result<Self> {
        let t = leaves.len();
        if t == 0 || g_sum.len() != t || s.len() != t * t {
            return Err(Error::Argument("leaf block dimensions disagree".into()));
        }
        Ok(Self { leaves, g_sum, s })
    }
}

fn check_partition(n: usize, partition: &[Vec<usize>]) -> Result<()> {
    let mut seen = vec![false; n];
    for (p, leaf) in partition.iter().enumerate() {
        if leaf.is_empty() {
            return Err(Error::Partition(format!("leaf {p} is empty")));
        }
        for &i in leaf {
            if i >= n {
                return Err(Error::Partition(format!("index {i} out of range for n = {n}")));
            }
            if seen[i] {
                return Err(Error::Partition(format!("index {i} appears more than once")));
            }
            seen[i] = true;
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Partition(format!("index {i} is not covered")));
    }
    Ok(())
}

/// `S_{p,q}` for `p ≤ q` summed with `I_p` as rows; mirrored below the diagonal.
fn block_entry(state: &LossState, leaves: &[Vec<usize>], p: usize, q: usize) -> f64 {
    let (a, b) = if p <= q { (p, q) } else { (q, p) };
    state.block_sum(&leaves[a], &leaves[b])
}

pub fn extract_blocks(state: &LossState, partition: &[Vec<usize>]) -> Result<LeafBlocks> {
    check_partition(state.n(), partition)?;
    let leaves: Vec<Vec<usize>> = partition
        .iter()
        .map(|l| {
            let mut l = l.clone();
            l.sort_unstable();
            l
        })
        .collect();
    let t = leaves.len();
    let g = state.gradient();
    let g_sum = leaves.iter().map(|l| l.iter().map(|&i| g[i]).sum()).collect();
    let mut s = vec![0.0; t * t];
    for p in 0..t {
        for q in p..t {
            let v = block_entry(state, &leaves, p, q);
            s[p * t + q] = v;
            s[q * t + p] = v;
        }
    }
    Ok(LeafBlocks { leaves, g_sum, s })
}

/// Splits leaf `p` into `left` (kept at index `p`) and the remainder
/// (appended as the last leaf).
///
/// Only entries involving the two new leaves are recomputed; they are summed
/// in the same order [`extract_blocks`] uses, so the result equals a full
/// re-extraction exactly.
pub fn split_blocks(
    state: &LossState,
    blocks: &LeafBlocks,
    p: usize,
    left: &[usize],
) -> Result<LeafBlocks> {
    let t = blocks.n_leaves();
    if p >= t {
        return Err(Error::Argument(format!("leaf {p} does not exist")));
    }
    let parent = &blocks.leaves[p];
    let mut left = left.to_vec();
    left.sort_unstable();
    left.dedup();
    if left.is_empty() || left.len() >= parent.len() {
        return Err(Error::Argument(
            "left subset must be a proper nonempty subset of the leaf".into(),
        ));
    }
    if left.iter().any(|i| parent.binary_search(i).is_err()) {
        return Err(Error::Argument("left subset is not contained in the leaf".into()));
    }
    let right: Vec<usize> = parent
        .iter()
        .copied()
        .filter(|i| left.binary_search(i).is_err())
        .collect();

    let mut leaves = blocks.leaves.clone();
    leaves[p] = left;
    leaves.push(right);
    let t1 = t + 1;
    let g = state.gradient();
    let mut g_sum = blocks.g_sum.clone();
    g_sum[p] = leaves[p].iter().map(|&i| g[i]).sum();
    g_sum.push(leaves[t].iter().map(|&i| g[i]).sum());

    let mut s = vec![0.0; t1 * t1];
    for a in 0..t {
        for b in 0..t {
            s[a * t1 + b] = blocks.s[a * t + b];
        }
    }
    for q in 0..t1 {
        for new in [p, t] {
            let v = block_entry(state, &leaves, new, q);
            s[new * t1 + q] = v;
            s[q * t1 + new] = v;
        }
    }
    Ok(LeafBlocks {
        leaves,
        g_sum,
        s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::factorize;
    use crate::test_support::{random_spd, random_vec};
    use proptest::prelude::*;

    fn state(sigma: &Mat<f64>, r: &[f64]) -> LossState {
        compute_loss_state(r, Arc::new(factorize(sigma.as_ref()).unwrap())).unwrap()
    }

    fn loss(sigma_inv: &Mat<f64>, r: &[f64]) -> f64 {
        let n = r.len();
        (0..n)
            .map(|i| (0..n).map(|j| r[i] * sigma_inv[(i, j)] * r[j]).sum::<f64>())
            .sum()
    }

    #[test]
    fn identity_covariance() {
        let s = state(&Mat::identity(2, 2), &[1.0, -2.0]);
        assert_eq!(s.gradient(), &[-2.0, 4.0]);
        assert_eq!(s.loss_value(), 5.0);
        let h = s.hessian().unwrap();
        assert_eq!((h[(0, 0)], h[(0, 1)], h[(1, 1)]), (2.0, 0.0, 2.0));
    }

    #[test]
    fn zero_residual() {
        let s = state(&random_spd(5, 1), &[0.0; 5]);
        assert!(s.gradient().iter().all(|&v| v == 0.0));
        assert_eq!(s.loss_value(), 0.0);
    }

    #[test]
    fn gradient_and_hessian_match_finite_differences() {
        let n = 15;
        let sigma = random_spd(n, 2);
        let inv = factorize(sigma.as_ref()).unwrap().inverse();
        let r = random_vec(n, 3);
        let st = state(&sigma, &r);
        // ℓ as a function of ŷ with y = r (ŷ = 0 at the state).
        let ell = |yhat: &[f64]| {
            let e: Vec<f64> = r.iter().zip(yhat).map(|(a, b)| a - b).collect();
            loss(&inv, &e)
        };
        let step = 1e-5;
        let h = st.hessian().unwrap();
        for i in 0..n {
            let mut up = vec![0.0; n];
            let mut dn = vec![0.0; n];
            up[i] = step;
            dn[i] = -step;
            let fd = (ell(&up) - ell(&dn)) / (2.0 * step);
            assert!((fd - st.gradient()[i]).abs() < 1e-6, "g[{i}]");
            for j in 0..n {
                let at = |a: f64, b: f64| {
                    let mut v = vec![0.0; n];
                    v[i] += a;
                    v[j] += b;
                    ell(&v)
                };
                let sd = (at(step, step) - at(step, -step) - at(-step, step) + at(-step, -step))
                    / (4.0 * step * step);
                assert!((sd - h[(i, j)]).abs() < 1e-4, "H[{i},{j}]: {sd} vs {}", h[(i, j)]);
            }
        }
    }

    #[test]
    fn gradient_is_minus_h_r() {
        let sigma = random_spd(30, 4);
        let r = random_vec(30, 5);
        let st = state(&sigma, &r);
        let h = st.hessian().unwrap();
        for i in 0..30 {
            let hr: f64 = (0..30).map(|j| h[(i, j)] * r[j]).sum();
            assert!((st.gradient()[i] + hr).abs() < 1e-10);
        }
    }

    #[test]
    fn factor_only_state_agrees_with_dense() {
        let sigma = random_spd(12, 6);
        let r = random_vec(12, 7);
        let f = Arc::new(factorize(sigma.as_ref()).unwrap());
        let dense = compute_loss_state(&r, f.clone()).unwrap();
        let sparse = compute_loss_state_with_cap(&r, f, 0).unwrap();
        assert!(sparse.hessian().is_none());
        assert!((dense.loss_value() - sparse.loss_value()).abs() < 1e-10);
        let part = vec![vec![0, 3, 5, 9], vec![1, 2, 4], vec![6, 7, 8, 10, 11]];
        let a = extract_blocks(&dense, &part).unwrap();
        let b = extract_blocks(&sparse, &part).unwrap();
        for p in 0..3 {
            assert!((a.g_sums()[p] - b.g_sums()[p]).abs() < 1e-10);
            for q in 0..3 {
                assert!((a.s(p, q) - b.s(p, q)).abs() < 1e-10);
            }
        }
        let blk = sparse.hessian_block(&[1, 4], &[0, 2, 11]);
        let h = dense.hessian().unwrap();
        for (k, (i, j)) in [(1, 0), (1, 2), (1, 11), (4, 0), (4, 2), (4, 11)].into_iter().enumerate() {
            assert!((blk[k] - h[(i, j)]).abs() < 1e-10);
        }
    }

    #[test]
    fn seven_point_block_layout() {
        let sigma = random_spd(7, 8);
        let st = state(&sigma, &random_vec(7, 9));
        // 1-based {1,2,6} and {3,4}; the rest go to a third leaf.
        let part = vec![vec![0, 1, 5], vec![2, 3], vec![4, 6]];
        let b = extract_blocks(&st, &part).unwrap();
        let g = st.gradient();
        assert_eq!(b.g_sums()[0], g[0] + g[1] + g[5]);
        let h = st.hessian().unwrap();
        let mut sub = 0.0;
        for i in [0, 1, 5] {
            for j in [2, 3] {
                sub += h[(i, j)];
            }
        }
        assert!((b.s(0, 1) - sub).abs() < 1e-13);
        assert_eq!(st.hessian_block(&[0, 1, 5], &[2, 3]).len(), 6);
    }

    #[test]
    fn single_leaf_totals() {
        let st = state(&random_spd(9, 10), &random_vec(9, 11));
        let b = extract_blocks(&st, &[(0..9).collect()]).unwrap();
        let g: f64 = st.gradient().iter().sum();
        let h = st.hessian().unwrap();
        let total: f64 = (0..9).map(|i| (0..9).map(|j| h[(i, j)]).sum::<f64>()).sum();
        assert_eq!(b.g_sums()[0], g);
        assert_eq!(b.s(0, 0), total);
    }

    #[test]
    fn partition_errors() {
        let st = state(&random_spd(4, 1), &[1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(extract_blocks(&st, &[vec![0, 1], vec![1, 2, 3]]), Err(Error::Partition(_))));
        assert!(matches!(extract_blocks(&st, &[vec![0, 1], vec![2]]), Err(Error::Partition(_))));
        let b = extract_blocks(&st, &[vec![0, 1, 2, 3]]).unwrap();
        assert!(split_blocks(&st, &b, 0, &[]).is_err());
        assert!(split_blocks(&st, &b, 0, &[0, 1, 2, 3]).is_err());
    }

    #[test]
    fn singleton_split() {
        let st = state(&random_spd(6, 12), &random_vec(6, 13));
        let b = extract_blocks(&st, &[(0..6).collect()]).unwrap();
        let s = split_blocks(&st, &b, 0, &[4]).unwrap();
        assert_eq!(s.g_sums()[0], st.gradient()[4]);
        assert_eq!(s.s(0, 0), st.hessian().unwrap()[(4, 4)]);
    }

    fn random_partition(n: usize, t: usize, seed: u64) -> Vec<Vec<usize>> {
        let z = random_vec(n, seed);
        let mut part = vec![Vec::new(); t];
        for i in 0..n {
            let p = if i < t { i } else { ((z[i].abs() * 1000.0) as usize) % t };
            part[p].push(i);
        }
        part
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn blocks_match_brute_force(seed in 0u64..10_000, t in 1usize..5) {
            let n = 12;
            let st = state(&random_spd(n, seed), &random_vec(n, seed + 1));
            let part = random_partition(n, t, seed + 2);
            let b = extract_blocks(&st, &part).unwrap();
            let h = st.hessian().unwrap();
            let mut total = 0.0;
            for p in 0..t {
                for q in 0..t {
                    let mut brute = 0.0;
                    for &i in &part[p] {
                        for &j in &part[q] {
                            brute += h[(i, j)];
                        }
                    }
                    prop_assert!((b.s(p, q) - brute).abs() < 1e-11);
                    prop_assert_eq!(b.s(p, q), b.s(q, p));
                    total += b.s(p, q);
                }
            }
            let all: f64 = (0..n).map(|i| (0..n).map(|j| h[(i, j)]).sum::<f64>()).sum();
            prop_assert!((total - all).abs() < 1e-10 * all.abs().max(1.0));
            let gs: f64 = b.g_sums().iter().sum();
            let gt: f64 = st.gradient().iter().sum();
            prop_assert!((gs - gt).abs() < 1e-10 * gt.abs().max(1.0));
        }

        #[test]
        fn split_equals_reextraction(seed in 0u64..10_000, t in 1usize..4, mask in 1u32..4095) {
            let n = 12;
            let st = state(&random_spd(n, seed), &random_vec(n, seed + 1));
            let part = random_partition(n, t, seed + 2);
            let b = extract_blocks(&st, &part).unwrap();
            let p = (seed as usize) % t;
            let leaf = b.leaves()[p].clone();
            let left: Vec<usize> = leaf.iter().enumerate()
                .filter(|(k, _)| mask & (1 << k) != 0).map(|(_, &i)| i).collect();
            prop_assume!(!left.is_empty() && left.len() < leaf.len());
            let refined = split_blocks(&st, &b, p, &left).unwrap();
            let mut part2: Vec<Vec<usize>> = b.leaves().to_vec();
            let right: Vec<usize> = leaf.iter().copied().filter(|i| !left.contains(i)).collect();
            part2[p] = left.clone();
            part2.push(right);
            let direct = extract_blocks(&st, &part2).unwrap();
            prop_assert_eq!(&refined, &direct);

            // Merging back recovers the parent sums.
            let g_merge = refined.g_sums()[p] + refined.g_sums()[t];
            prop_assert!((g_merge - b.g_sums()[p]).abs() < 1e-12 * b.g_sums()[p].abs().max(1.0));
            let s_merge = refined.s(p, p) + 2.0 * refined.s(p, t) + refined.s(t, t);
            prop_assert!((s_merge - b.s(p, p)).abs() < 1e-12 * b.s(p, p).abs().max(1.0));
        }

        #[test]
        fn quadratic_expansion_is_exact(seed in 0u64..10_000, n in 2usize..40) {
            let sigma = random_spd(n, seed);
            let f = Arc::new(factorize(sigma.as_ref()).unwrap());
            let r = random_vec(n, seed + 1);
            let step = random_vec(n, seed + 2);
            let st = compute_loss_state(&r, f.clone()).unwrap();
            let after: Vec<f64> = r.iter().zip(&step).map(|(a, b)| a - b).collect();
            let lhs = f.quad_form(&after) - st.loss_value();
            let h = st.hessian().unwrap();
            let gf: f64 = st.gradient().iter().zip(&step).map(|(a, b)| a * b).sum();
            let fhf: f64 = (0..n).map(|i| (0..n).map(|j| step[i] * h[(i, j)] * step[j]).sum::<f64>()).sum();
            let rhs = gf + 0.5 * fhf;
            let scale = st.loss_value() + f.quad_form(&after);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * scale, "{} vs {}", lhs, rhs);
        }
    }
}
