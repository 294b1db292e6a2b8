//! Greedy growth of one regression tree with coupled leaf weights.
//!
//! For a fixed structure the reduced objective is
//! `Σ_p G̃_p w_p + ½ Σ_{p,q} w_p S_{p,q} w_q + γT + ½λ‖w‖²`, minimized by
//! `(S + λI) w = −G̃`. Growth is best-first over leaves: every candidate split
//! of every leaf is scored by re-solving the full system, and the single best
//! one is applied if it lowers the objective.

use faer::Mat;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::linalg::{small_cholesky, small_cholesky_solve};
use crate::loss::{extract_blocks, split_blocks, LeafBlocks, LossState};

/// How the `T × T` leaf system is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemForm {
    /// `(S + λI) w = −G̃`, the stationarity condition of the objective.
    #[default]
    Consistent,
    /// Diagonal `λ + S_pp`, off-diagonal `½(λ + S_pq)`.
    SharedOffDiagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrowConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub max_leaves: usize,
    pub min_leaf_size: usize,
    pub system_form: SystemForm,
    /// Multiplier on the solved weights. Not part of the base method; 1 disables it.
    pub learning_rate: f64,
}

impl Default for GrowConfig {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            gamma: 0.0,
            max_leaves: 64,
            min_leaf_size: 5,
            system_form: SystemForm::Consistent,
            learning_rate: 1.0,
        }
    }
}

impl GrowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Validation(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Validation(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.max_leaves == 0 || self.min_leaf_size == 0 {
            return Err(Error::Validation("max_leaves and min_leaf_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Validation(format!(
                "learning_rate must be in (0, 1], got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// `x[feature] < threshold` goes left.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    pub feature: usize,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Leaf {
        weight: f64,
    },
    Internal {
        split: Split,
        left: usize,
        right: usize,
    },
}

/// A binary tree stored as an arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    /// Root-only tree with the given output.
    pub fn leaf(weight: f64) -> Self {
        Self {
            nodes: vec![Node::Leaf { weight }],
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    pub fn is_root_only(&self) -> bool {
        self.nodes.len() == 1
    }

    /// True for a root-only tree whose output is exactly zero.
    pub fn is_zero(&self) -> bool {
        matches!(self.nodes.as_slice(), [Node::Leaf { weight }] if *weight == 0.0)
    }

    fn leaf_node(&self, x: &[f64]) -> usize {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { .. } => return at,
                Node::Internal { split, left, right } => {
                    at = if x[split.feature] < split.threshold {
                        *left
                    } else {
                        *right
                    };
                }
            }
        }
    }

    pub fn predict_row(&self, x: &[f64]) -> f64 {
        match self.nodes[self.leaf_node(x)] {
            Node::Leaf { weight } => weight,
            Node::Internal { .. } => unreachable!(),
        }
    }

    pub fn predict(&self, features: &Mat<f64>) -> Vec<f64> {
        let mut row = vec![0.0; features.ncols()];
        (0..features.nrows())
            .map(|i| {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = features[(i, j)];
                }
                self.predict_row(&row)
            })
            .collect()
    }

    /// Largest feature index used by any split, if any.
    pub fn max_feature(&self) -> Option<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Internal { split, .. } => Some(split.feature),
                Node::Leaf { .. } => None,
            })
            .max()
    }

    fn to_repr(&self, at: usize) -> NodeRepr {
        match &self.nodes[at] {
            Node::Leaf { weight } => NodeRepr::Leaf { weight: *weight },
            Node::Internal { split, left, right } => NodeRepr::Internal {
                feature: split.feature,
                threshold: split.threshold,
                left: Box::new(self.to_repr(*left)),
                right: Box::new(self.to_repr(*right)),
            },
        }
    }

    /// Renumbers the arena in pre-order, the layout deserialization produces.
    fn canonical(self) -> Tree {
        let mut nodes = Vec::with_capacity(self.nodes.len());
        Self::push_repr(&mut nodes, &self.to_repr(0));
        Tree { nodes }
    }

    fn push_repr(nodes: &mut Vec<Node>, repr: &NodeRepr) -> usize {
        let at = nodes.len();
        match repr {
            NodeRepr::Leaf { weight } => nodes.push(Node::Leaf { weight: *weight }),
            NodeRepr::Internal {
                feature,
                threshold,
                left,
                right,
            } => {
                nodes.push(Node::Leaf { weight: 0.0 });
                let l = Self::push_repr(nodes, left);
                let r = Self::push_repr(nodes, right);
                nodes[at] = Node::Internal {
                    split: Split {
                        feature: *feature,
                        threshold: *threshold,
                    },
                    left: l,
                    right: r,
                };
            }
        }
        at
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum NodeRepr {
    Internal {
        feature: usize,
        threshold: f64,
        left: Box<NodeRepr>,
        right: Box<NodeRepr>,
    },
    Leaf {
        weight: f64,
    },
}

impl Serialize for Tree {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_repr(0).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Tree {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = NodeRepr::deserialize(d)?;
        let mut nodes = Vec::new();
        Tree::push_repr(&mut nodes, &repr);
        Ok(Tree { nodes })
    }
}

fn system_matrix(s: &[f64], t: usize, lambda: f64, form: SystemForm) -> Vec<f64> {
    let mut a = s.to_vec();
    match form {
        SystemForm::Consistent => {
            for p in 0..t {
                a[p * t + p] += lambda;
            }
        }
        SystemForm::SharedOffDiagonal => {
            for p in 0..t {
                for q in 0..t {
                    a[p * t + q] = if p == q {
                        lambda + s[p * t + q]
                    } else {
                        0.5 * (lambda + s[p * t + q])
                    };
                }
            }
        }
    }
    a
}

fn solve_system(g: &[f64], s: &[f64], lambda: f64, form: SystemForm) -> Result<Vec<f64>> {
    let t = g.len();
    let a = system_matrix(s, t, lambda, form);
    if t == 1 {
        // A single division, so `Σ = I, λ = 0` reproduces the mean exactly.
        if !(a[0] > 0.0) || !a[0].is_finite() {
            return Err(Error::Solve { pivot: a[0], index: 0 });
        }
        return Ok(vec![-g[0] / a[0]]);
    }
    let l = small_cholesky(&a, t).map_err(|(pivot, index)| Error::Solve { pivot, index })?;
    let mut w: Vec<f64> = g.iter().map(|v| -v).collect();
    small_cholesky_solve(&l, t, &mut w);
    Ok(w)
}

fn objective_raw(g: &[f64], s: &[f64], w: &[f64], lambda: f64, gamma: f64) -> f64 {
    let t = g.len();
    let mut lin = 0.0;
    let mut quad = 0.0;
    let mut ridge = 0.0;
    for p in 0..t {
        lin += g[p] * w[p];
        ridge += w[p] * w[p];
        for q in 0..t {
            quad += w[p] * s[p * t + q] * w[q];
        }
    }
    lin + 0.5 * quad + gamma * t as f64 + 0.5 * lambda * ridge
}

/// Leaf weights from the `T × T` system of the chosen form.
pub fn solve_leaf_weights(blocks: &LeafBlocks, lambda: f64, form: SystemForm) -> Result<Vec<f64>> {
    solve_system(blocks.g_sums(), blocks.s_matrix(), lambda, form)
}

/// The reduced objective at weights `w`.
pub fn objective(blocks: &LeafBlocks, w: &[f64], lambda: f64, gamma: f64) -> Result<f64> {
    if w.len() != blocks.n_leaves() {
        return Err(Error::Argument(format!(
            "{} weights for {} leaves",
            w.len(),
            blocks.n_leaves()
        )));
    }
    Ok(objective_raw(blocks.g_sums(), blocks.s_matrix(), w, lambda, gamma))
}

/// Midpoint between consecutive distinct values, nudged up to `hi` if
/// rounding would put it on `lo`.
fn midpoint(lo: f64, hi: f64) -> f64 {
    let m = lo + 0.5 * (hi - lo);
    if m > lo {
        m
    } else {
        hi
    }
}

/// Rows of `leaf` ordered by feature value, ties by row index.
fn sorted_by_feature(features: &Mat<f64>, leaf: &[usize], f: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..leaf.len()).collect();
    order.sort_by(|&a, &b| {
        features[(leaf[a], f)]
            .total_cmp(&features[(leaf[b], f)])
            .then(leaf[a].cmp(&leaf[b]))
    });
    order
}

/// All admissible splits of `leaf`, by feature then ascending threshold.
pub fn enumerate_candidates(features: &Mat<f64>, leaf: &[usize], min_leaf_size: usize) -> Vec<Split> {
    let np = leaf.len();
    let mut out = Vec::new();
    if np < 2 * min_leaf_size.max(1) {
        return out;
    }
    for f in 0..features.ncols() {
        let order = sorted_by_feature(features, leaf, f);
        for k in 0..np - 1 {
            let (lo, hi) = (features[(leaf[order[k]], f)], features[(leaf[order[k + 1]], f)]);
            if lo < hi && k + 1 >= min_leaf_size && np - k - 1 >= min_leaf_size {
                out.push(Split {
                    feature: f,
                    threshold: midpoint(lo, hi),
                });
            }
        }
    }
    out
}

/// The result of growing one tree.
#[derive(Debug, Clone)]
pub struct GrowOutcome {
    pub tree: Tree,
    /// Objective of the root structure and after every accepted split.
    pub objectives: Vec<f64>,
    /// Final leaf index sets, in leaf order.
    pub leaves: Vec<Vec<usize>>,
    /// Effective leaf weights (after the learning rate), in leaf order.
    pub weights: Vec<f64>,
    /// False when the grown tree did not lower the objective below zero and
    /// was replaced by a zero-output root.
    pub retained: bool,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    objective: f64,
    leaf: usize,
    split: Split,
}

/// Per-leaf quantities shared by every feature's scan.
struct LeafScan<'a> {
    p: usize,
    idx: &'a [usize],
    /// `H[I_p, I_p]`, row-major.
    hpp: Vec<f64>,
    /// `cross[k * T + q] = Σ_{j∈I_q} h_{idx[k], j}`.
    cross: Vec<f64>,
    bordered: Option<Bordered>,
}

/// Splitting leaf `p` into `L ∪ R` is the current partition plus one extra
/// column `1_L` whose weight `δ` is added on `L`. In those coordinates the
/// consistent system is the current one bordered by a single row, so every
/// candidate's optimum follows from a Schur complement against a fixed
/// `A = S + λI + λ e_p e_pᵀ`.
struct Bordered {
    /// `A⁻¹ G̃`.
    z: Vec<f64>,
    /// `G̃ᵀ A⁻¹ G̃`.
    q0: f64,
    /// `(A⁻¹)_pp`.
    a_pp: f64,
    /// Row `k` is `A⁻¹ cross_k`.
    y: Vec<f64>,
}

impl Bordered {
    fn new(blocks: &LeafBlocks, p: usize, cross: &[f64], lambda: f64) -> Option<Self> {
        let t = blocks.n_leaves();
        let mut a = blocks.s_matrix().to_vec();
        for q in 0..t {
            a[q * t + q] += lambda;
        }
        a[p * t + p] += lambda;
        let l = small_cholesky(&a, t).ok()?;
        let mut z = blocks.g_sums().to_vec();
        small_cholesky_solve(&l, t, &mut z);
        let q0 = z.iter().zip(blocks.g_sums()).map(|(a, b)| a * b).sum();
        let mut ep = vec![0.0; t];
        ep[p] = 1.0;
        small_cholesky_solve(&l, t, &mut ep);
        let mut y = cross.to_vec();
        for row in y.chunks_exact_mut(t) {
            small_cholesky_solve(&l, t, row);
        }
        Some(Self {
            z,
            q0,
            a_pp: ep[p],
            y,
        })
    }
}

fn scan_feature(
    scan: &LeafScan<'_>,
    f: usize,
    features: &Mat<f64>,
    blocks: &LeafBlocks,
    gradient: &[f64],
    cfg: &GrowConfig,
) -> Vec<Candidate> {
    let t = blocks.n_leaves();
    let t1 = t + 1;
    let p = scan.p;
    let np = scan.idx.len();
    let order = sorted_by_feature(features, scan.idx, f);
    let g = blocks.g_sums();
    let s = blocks.s_matrix();

    let mut g_left = 0.0;
    let mut c_left = vec![0.0; t];
    let mut v = vec![0.0; t];
    let mut s_ll = 0.0;
    let mut g_sys = vec![0.0; t1];
    let mut s_sys = vec![0.0; t1 * t1];
    let mut out = Vec::new();
    for k in 0..np - 1 {
        let i = order[k];
        let row = &scan.hpp[i * np..(i + 1) * np];
        let mut inner = 0.0;
        for &j in &order[..k] {
            inner += row[j];
        }
        s_ll += row[i] + 2.0 * inner;
        g_left += gradient[scan.idx[i]];
        for q in 0..t {
            c_left[q] += scan.cross[i * t + q];
        }
        if let Some(b) = &scan.bordered {
            for (vq, yq) in v.iter_mut().zip(&b.y[i * t..(i + 1) * t]) {
                *vq += yq;
            }
        }

        let n_left = k + 1;
        if n_left < cfg.min_leaf_size || np - n_left < cfg.min_leaf_size {
            continue;
        }
        let lo = features[(scan.idx[i], f)];
        let hi = features[(scan.idx[order[k + 1]], f)];
        if !(lo < hi) {
            continue;
        }
        let split = Split {
            feature: f,
            threshold: midpoint(lo, hi),
        };

        if let Some(b) = &scan.bordered {
            let lambda = cfg.lambda;
            let cz: f64 = c_left.iter().zip(&b.z).map(|(c, z)| c * z).sum();
            let cv: f64 = c_left.iter().zip(&v).map(|(c, v)| c * v).sum();
            let c = s_ll + lambda;
            let schur = c - (cv + 2.0 * lambda * v[p] + lambda * lambda * b.a_pp);
            if !(schur > 1e-13 * c) {
                log::debug!("skipping degenerate candidate on leaf {p}, feature {f}");
                continue;
            }
            let d = g_left - (cz + lambda * b.z[p]);
            out.push(Candidate {
                objective: -0.5 * (b.q0 + d * d / schur) + cfg.gamma * t1 as f64,
                leaf: p,
                split,
            });
            continue;
        }

        for a in 0..t {
            g_sys[a] = g[a];
            for b in 0..t {
                s_sys[a * t1 + b] = s[a * t + b];
            }
        }
        g_sys[p] = g_left;
        g_sys[t] = g[p] - g_left;
        for q in 0..t {
            if q == p {
                continue;
            }
            let right = s[p * t + q] - c_left[q];
            s_sys[p * t1 + q] = c_left[q];
            s_sys[q * t1 + p] = c_left[q];
            s_sys[t * t1 + q] = right;
            s_sys[q * t1 + t] = right;
        }
        let s_lr = c_left[p] - s_ll;
        s_sys[p * t1 + p] = s_ll;
        s_sys[p * t1 + t] = s_lr;
        s_sys[t * t1 + p] = s_lr;
        s_sys[t * t1 + t] = s[p * t + p] - s_ll - 2.0 * s_lr;

        match solve_system(&g_sys, &s_sys, cfg.lambda, cfg.system_form) {
            Ok(w) => out.push(Candidate {
                objective: objective_raw(&g_sys, &s_sys, &w, cfg.lambda, cfg.gamma),
                leaf: p,
                split,
            }),
            Err(e) => log::debug!("skipping candidate on leaf {p}, feature {f}: {e}"),
        }
    }
    out
}

fn leaf_scan<'a>(
    state: &LossState,
    blocks: &'a LeafBlocks,
    p: usize,
    col_sums: &[Vec<f64>],
    cfg: &GrowConfig,
) -> LeafScan<'a> {
    let idx = blocks.leaves()[p].as_slice();
    let t = blocks.n_leaves();
    let mut cross = vec![0.0; idx.len() * t];
    for (k, &i) in idx.iter().enumerate() {
        for q in 0..t {
            cross[k * t + q] = col_sums[q][i];
        }
    }
    let bordered = match cfg.system_form {
        SystemForm::Consistent => Bordered::new(blocks, p, &cross, cfg.lambda),
        SystemForm::SharedOffDiagonal => None,
    };
    LeafScan {
        p,
        idx,
        hpp: state.hessian_block(idx, idx),
        cross,
        bordered,
    }
}

/// Picks the lowest objective; near-ties go to the lowest feature, then
/// threshold, then leaf.
fn select(cands: &[Candidate]) -> Option<Candidate> {
    let best = cands.iter().map(|c| c.objective).min_by(f64::total_cmp)?;
    let tol = 1e-12 * best.abs();
    cands
        .iter()
        .filter(|c| c.objective <= best + tol)
        .min_by(|a, b| {
            a.split
                .feature
                .cmp(&b.split.feature)
                .then(a.split.threshold.total_cmp(&b.split.threshold))
                .then(a.leaf.cmp(&b.leaf))
        })
        .copied()
}

/// `col_sums[q]` is `H 1_{I_q}` for every leaf `q` of `blocks`.
fn best_split(
    state: &LossState,
    features: &Mat<f64>,
    blocks: &LeafBlocks,
    col_sums: &[Vec<f64>],
    cfg: &GrowConfig,
) -> Option<Candidate> {
    let t = blocks.n_leaves();
    let splittable: Vec<usize> = (0..t)
        .filter(|&p| blocks.leaves()[p].len() >= 2 * cfg.min_leaf_size)
        .collect();
    if splittable.is_empty() {
        return None;
    }
    let scans: Vec<LeafScan<'_>> = splittable
        .par_iter()
        .map(|&p| leaf_scan(state, blocks, p, col_sums, cfg))
        .collect();
    let m = features.ncols();
    let gradient = state.gradient();
    let cands: Vec<Candidate> = (0..scans.len() * m)
        .into_par_iter()
        .flat_map_iter(|job| scan_feature(&scans[job / m], job % m, features, blocks, gradient, cfg))
        .collect();
    select(&cands)
}

/// Grows one tree on the training rows behind `state`.
pub fn grow_tree(state: &LossState, features: &Mat<f64>, cfg: &GrowConfig) -> Result<Tree> {
    grow_tree_traced(state, features, cfg).map(|o| o.tree)
}

/// As [`grow_tree`], also returning the growth path.
///
/// A tree whose final objective (with the learning rate applied) is not
/// negative would not lower the loss net of its penalty, and is returned as a
/// zero-output root.
pub fn grow_tree_traced(state: &LossState, features: &Mat<f64>, cfg: &GrowConfig) -> Result<GrowOutcome> {
    cfg.validate()?;
    let n = state.n();
    if features.nrows() != n {
        return Err(Error::Argument(format!(
            "{} feature rows for {} residuals",
            features.nrows(),
            n
        )));
    }
    if n == 0 {
        return Err(Error::InsufficientData("no training rows".into()));
    }
    let mut blocks = extract_blocks(state, &[(0..n).collect()])?;
    let mut w = solve_leaf_weights(&blocks, cfg.lambda, cfg.system_form)?;
    let mut current = objective(&blocks, &w, cfg.lambda, cfg.gamma)?;
    let mut objectives = vec![current];
    let mut nodes = vec![Node::Leaf { weight: 0.0 }];
    let mut leaf_nodes = vec![0usize];
    let mut col_sums = vec![state.hessian_indicator(&blocks.leaves()[0])];

    while blocks.n_leaves() < cfg.max_leaves {
        let Some(c) = best_split(state, features, &blocks, &col_sums, cfg) else {
            break;
        };
        if !(c.objective < current - 1e-12 * current.abs()) {
            break;
        }
        let left: Vec<usize> = blocks.leaves()[c.leaf]
            .iter()
            .copied()
            .filter(|&i| features[(i, c.split.feature)] < c.split.threshold)
            .collect();
        let refined = split_blocks(state, &blocks, c.leaf, &left)?;
        let w_new = solve_leaf_weights(&refined, cfg.lambda, cfg.system_form)?;
        let obj = objective(&refined, &w_new, cfg.lambda, cfg.gamma)?;
        if !(obj < current) {
            break;
        }
        let at = leaf_nodes[c.leaf];
        let (l, r) = (nodes.len(), nodes.len() + 1);
        nodes.push(Node::Leaf { weight: 0.0 });
        nodes.push(Node::Leaf { weight: 0.0 });
        nodes[at] = Node::Internal {
            split: c.split,
            left: l,
            right: r,
        };
        leaf_nodes[c.leaf] = l;
        leaf_nodes.push(r);
        col_sums[c.leaf] = state.hessian_indicator(&refined.leaves()[c.leaf]);
        col_sums.push(state.hessian_indicator(&refined.leaves()[refined.n_leaves() - 1]));
        blocks = refined;
        w = w_new;
        current = obj;
        objectives.push(current);
    }

    let weights: Vec<f64> = w.iter().map(|v| v * cfg.learning_rate).collect();
    let retained = objective(&blocks, &weights, cfg.lambda, cfg.gamma)? < 0.0;
    if !retained {
        return Ok(GrowOutcome {
            tree: Tree::leaf(0.0),
            objectives,
            leaves: vec![(0..n).collect()],
            weights: vec![0.0],
            retained,
        });
    }
    for (p, &node) in leaf_nodes.iter().enumerate() {
        nodes[node] = Node::Leaf { weight: weights[p] };
    }
    Ok(GrowOutcome {
        tree: Tree { nodes }.canonical(),
        objectives,
        leaves: blocks.leaves().to_vec(),
        weights,
        retained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::factorize;
    use crate::loss::compute_loss_state;
    use crate::test_support::{random_spd, random_vec};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn state(sigma: &Mat<f64>, r: &[f64]) -> LossState {
        compute_loss_state(r, Arc::new(factorize(sigma.as_ref()).unwrap())).unwrap()
    }

    fn features(n: usize, m: usize, seed: u64) -> Mat<f64> {
        let z = random_vec(n * m, seed);
        Mat::from_fn(n, m, |i, j| z[i * m + j])
    }

    #[test]
    fn identity_single_leaf_is_mean() {
        let st = state(&Mat::identity(2, 2), &[1.0, 3.0]);
        let b = extract_blocks(&st, &[vec![0, 1]]).unwrap();
        let w = solve_leaf_weights(&b, 0.0, SystemForm::Consistent).unwrap();
        assert_eq!(w, vec![2.0]);
        let obj = objective(&b, &w, 0.0, 0.0).unwrap();
        assert_eq!(obj, -8.0);
        // Exact loss drop 10 → 2.
        assert_eq!(st.loss_value(), 10.0);
    }

    #[test]
    fn ridge_limit_shrinks_weights() {
        let st = state(&random_spd(10, 1), &random_vec(10, 2));
        let b = extract_blocks(&st, &[vec![0, 1, 2], vec![3, 4, 5, 6], vec![7, 8, 9]]).unwrap();
        let lambda = 1e9;
        let w = solve_leaf_weights(&b, lambda, SystemForm::Consistent).unwrap();
        for p in 0..3 {
            assert!(w[p].abs() <= b.g_sums()[p].abs() / lambda * (1.0 + 1e-6));
        }
    }

    #[test]
    fn zero_weights_cost_gamma_per_leaf() {
        let st = state(&random_spd(6, 3), &random_vec(6, 4));
        let b = extract_blocks(&st, &[vec![0, 1], vec![2, 3], vec![4, 5]]).unwrap();
        assert_eq!(objective(&b, &[0.0; 3], 0.3, 1.5).unwrap(), 4.5);
        let w = solve_leaf_weights(&b, 0.3, SystemForm::Consistent).unwrap();
        let base = objective(&b, &w, 0.3, 1.5).unwrap();
        let b2 = split_blocks(&st, &b, 0, &[0]).unwrap();
        let mut w2 = w.clone();
        w2.push(w[0]);
        // Splitting a leaf and giving both halves its weight adds exactly γ.
        assert!((objective(&b2, &w2, 0.0, 1.5).unwrap() - objective(&b, &w, 0.0, 1.5).unwrap() - 1.5).abs() < 1e-12);
        assert!(base.is_finite());
    }

    #[test]
    fn shared_off_diagonal_form_layout() {
        let b = LeafBlocks::from_parts(vec![vec![0], vec![1]], vec![1.0, -2.0], vec![4.0, 1.0, 1.0, 3.0]).unwrap();
        let w = solve_leaf_weights(&b, 0.5, SystemForm::SharedOffDiagonal).unwrap();
        // Ξ = [[4.5, 0.75], [0.75, 3.5]].
        let r0 = 4.5 * w[0] + 0.75 * w[1] + 1.0;
        let r1 = 0.75 * w[0] + 3.5 * w[1] - 2.0;
        assert!(r0.abs() < 1e-14 && r1.abs() < 1e-14);
    }

    #[test]
    fn indefinite_system_reports_pivot() {
        let b = LeafBlocks::from_parts(vec![vec![0], vec![1]], vec![1.0, 1.0], vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        let err = solve_leaf_weights(&b, 0.0, SystemForm::Consistent).unwrap_err();
        assert!(matches!(err, Error::Solve { index: 1, .. }));
    }

    #[test]
    fn candidate_thresholds_are_midpoints() {
        let x = Mat::from_fn(3, 1, |i, _| [1.0, 2.0, 4.0][i]);
        let c = enumerate_candidates(&x, &[0, 1, 2], 1);
        let t: Vec<f64> = c.iter().map(|s| s.threshold).collect();
        assert_eq!(t, vec![1.5, 3.0]);
        let flat = Mat::from_fn(4, 1, |_, _| 7.0);
        assert!(enumerate_candidates(&flat, &[0, 1, 2, 3], 1).is_empty());
    }

    #[test]
    fn candidate_count_matches_brute_force() {
        let n = 40;
        let z = random_vec(n * 3, 8);
        // Rounded values create ties.
        let x = Mat::from_fn(n, 3, |i, j| (z[i * 3 + j] * 3.0).round());
        let leaf: Vec<usize> = (0..n).collect();
        for min_leaf in [1, 3, 7] {
            let mut expected = 0;
            for f in 0..3 {
                let mut vals: Vec<f64> = leaf.iter().map(|&i| x[(i, f)]).collect();
                vals.sort_by(f64::total_cmp);
                vals.dedup();
                for w in vals.windows(2) {
                    let thr = 0.5 * (w[0] + w[1]);
                    let left = leaf.iter().filter(|&&i| x[(i, f)] < thr).count();
                    if left >= min_leaf && n - left >= min_leaf {
                        expected += 1;
                    }
                }
            }
            assert_eq!(enumerate_candidates(&x, &leaf, min_leaf).len(), expected);
        }
    }

    #[test]
    fn adjacent_floats_split_correctly() {
        let a = 1.0f64;
        let b = f64::from_bits(a.to_bits() + 1);
        let t = midpoint(a, b);
        assert!(a < t && !(b < t));
    }

    #[test]
    fn constant_residuals_give_root_only_mean() {
        let n = 20;
        let st = state(&Mat::identity(n, n), &vec![1.7; n]);
        let cfg = GrowConfig {
            lambda: 0.0,
            gamma: 0.1,
            min_leaf_size: 1,
            ..Default::default()
        };
        let tree = grow_tree(&st, &features(n, 2, 5), &cfg).unwrap();
        assert!(tree.is_root_only());
        assert!((tree.predict_row(&[0.0, 0.0]) - 1.7).abs() < 1e-14);
    }

    #[test]
    fn huge_gamma_gives_zero_root() {
        let n = 20;
        let st = state(&random_spd(n, 6), &random_vec(n, 7));
        let cfg = GrowConfig {
            gamma: 1e12,
            ..Default::default()
        };
        let out = grow_tree_traced(&st, &features(n, 2, 8), &cfg).unwrap();
        assert!(out.tree.is_zero());
        assert!(!out.retained);
        let zero = state(&random_spd(n, 6), &vec![0.0; n]);
        assert!(grow_tree(&zero, &features(n, 2, 8), &GrowConfig::default()).unwrap().is_zero());
    }

    /// Brute-force reimplementation without block caching: every candidate
    /// partition's sums come straight from `H`.
    fn naive_grow(h: &Mat<f64>, g: &[f64], x: &Mat<f64>, cfg: &GrowConfig) -> (Vec<Vec<usize>>, Vec<f64>) {
        let n = g.len();
        let solve = |part: &[Vec<usize>]| -> Option<(Vec<f64>, f64)> {
            let t = part.len();
            let gs: Vec<f64> = part.iter().map(|l| l.iter().map(|&i| g[i]).sum()).collect();
            let mut s = vec![0.0; t * t];
            for p in 0..t {
                for q in 0..t {
                    for &i in &part[p] {
                        for &j in &part[q] {
                            s[p * t + q] += h[(i, j)];
                        }
                    }
                }
            }
            let w = solve_system(&gs, &s, cfg.lambda, cfg.system_form).ok()?;
            let obj = objective_raw(&gs, &s, &w, cfg.lambda, cfg.gamma);
            Some((w, obj))
        };
        let mut part: Vec<Vec<usize>> = vec![(0..n).collect()];
        let (mut w, mut cur) = solve(&part).unwrap();
        while part.len() < cfg.max_leaves {
            let mut cands = Vec::new();
            for p in 0..part.len() {
                for s in enumerate_candidates(x, &part[p], cfg.min_leaf_size) {
                    let (l, r): (Vec<usize>, Vec<usize>) =
                        part[p].iter().partition(|&&i| x[(i, s.feature)] < s.threshold);
                    let mut next = part.clone();
                    next[p] = l;
                    next.push(r);
                    if let Some((_, obj)) = solve(&next) {
                        cands.push(Candidate { objective: obj, leaf: p, split: s });
                    }
                }
            }
            let Some(c) = select(&cands) else { break };
            if !(c.objective < cur - 1e-12 * cur.abs()) {
                break;
            }
            let (l, r): (Vec<usize>, Vec<usize>) =
                part[c.leaf].iter().partition(|&&i| x[(i, c.split.feature)] < c.split.threshold);
            part[c.leaf] = l;
            part.push(r);
            let (w2, obj) = solve(&part).unwrap();
            w = w2;
            cur = obj;
        }
        (part, w)
    }

    #[test]
    fn matches_naive_reimplementation() {
        for seed in 0..20 {
            let n = 12;
            let sigma = random_spd(n, 100 + seed);
            let st = state(&sigma, &random_vec(n, 200 + seed));
            let x = features(n, 2, 300 + seed);
            let cfg = GrowConfig {
                lambda: 0.1,
                gamma: 0.01,
                min_leaf_size: 2,
                ..Default::default()
            };
            let out = grow_tree_traced(&st, &x, &cfg).unwrap();
            let (part, w) = naive_grow(st.hessian().unwrap(), st.gradient(), &x, &cfg);
            assert_eq!(out.leaves, part, "seed {seed}");
            for (a, b) in out.weights.iter().zip(&w) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn bordered_scan_matches_direct_solves() {
        let n = 40;
        let st = state(&random_spd(n, 21), &random_vec(n, 22));
        let x = features(n, 3, 23);
        let cfg = GrowConfig {
            lambda: 0.3,
            gamma: 0.02,
            min_leaf_size: 2,
            ..Default::default()
        };
        let part = vec![(0..15).collect(), (15..22).collect(), (22..40).collect()];
        let blocks = extract_blocks(&st, &part).unwrap();
        let sums: Vec<Vec<f64>> = part.iter().map(|l| st.hessian_indicator(l)).collect();
        for p in 0..3 {
            let fast = leaf_scan(&st, &blocks, p, &sums, &cfg);
            assert!(fast.bordered.is_some());
            let slow = LeafScan {
                bordered: None,
                ..leaf_scan(&st, &blocks, p, &sums, &cfg)
            };
            for f in 0..3 {
                let a = scan_feature(&fast, f, &x, &blocks, st.gradient(), &cfg);
                let b = scan_feature(&slow, f, &x, &blocks, st.gradient(), &cfg);
                assert_eq!(a.len(), b.len());
                for (ca, cb) in a.iter().zip(&b) {
                    assert_eq!(ca.split, cb.split);
                    assert!((ca.objective - cb.objective).abs() < 1e-10 * cb.objective.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn growth_is_strictly_monotone_and_locally_optimal() {
        let n = 60;
        let st = state(&random_spd(n, 9), &random_vec(n, 10));
        let cfg = GrowConfig {
            lambda: 0.2,
            gamma: 0.05,
            ..Default::default()
        };
        let out = grow_tree_traced(&st, &features(n, 3, 11), &cfg).unwrap();
        assert!(out.objectives.len() > 1);
        for w in out.objectives.windows(2) {
            assert!(w[1] < w[0]);
        }
        let b = extract_blocks(&st, &out.leaves).unwrap();
        let base = objective(&b, &out.weights, cfg.lambda, cfg.gamma).unwrap();
        for p in 0..out.weights.len() {
            for d in [-1e-3, 1e-3] {
                let mut w = out.weights.clone();
                w[p] += d;
                assert!(objective(&b, &w, cfg.lambda, cfg.gamma).unwrap() >= base);
            }
        }
    }

    #[test]
    fn json_shape_round_trips() {
        let tree = Tree {
            nodes: vec![
                Node::Internal {
                    split: Split { feature: 1, threshold: 0.5 },
                    left: 1,
                    right: 2,
                },
                Node::Leaf { weight: -1.25 },
                Node::Leaf { weight: 0.1 + 0.2 },
            ],
        };
        let s = serde_json::to_string(&tree).unwrap();
        assert_eq!(
            s,
            r#"{"feature":1,"threshold":0.5,"left":{"weight":-1.25},"right":{"weight":0.30000000000000004}}"#
        );
        let back: Tree = serde_json::from_str(&s).unwrap();
        assert_eq!(back, tree);
        assert_eq!(back.predict_row(&[0.0, 0.4]), -1.25);
        assert_eq!(back.predict_row(&[0.0, 0.5]), 0.1 + 0.2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn row_permutation_leaves_tree_unchanged(seed in 0u64..1000) {
            let n = 30;
            let sigma = random_spd(n, seed);
            let r = random_vec(n, seed + 1);
            let x = features(n, 2, seed + 2);
            let cfg = GrowConfig { lambda: 0.1, gamma: 0.01, min_leaf_size: 3, ..Default::default() };
            let a = grow_tree(&state(&sigma, &r), &x, &cfg).unwrap();

            let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
            let sigma_p = Mat::from_fn(n, n, |i, j| sigma[(perm[i], perm[j])]);
            let r_p: Vec<f64> = perm.iter().map(|&i| r[i]).collect();
            let x_p = Mat::from_fn(n, 2, |i, j| x[(perm[i], j)]);
            let b = grow_tree(&state(&sigma_p, &r_p), &x_p, &cfg).unwrap();

            prop_assert_eq!(a.nodes().len(), b.nodes().len());
            for (na, nb) in a.nodes().iter().zip(b.nodes()) {
                match (na, nb) {
                    (Node::Leaf { weight: wa }, Node::Leaf { weight: wb }) => {
                        prop_assert!((wa - wb).abs() < 1e-10);
                    }
                    (Node::Internal { split: sa, .. }, Node::Internal { split: sb, .. }) => {
                        prop_assert_eq!(sa, sb);
                    }
                    _ => prop_assert!(false, "structure differs"),
                }
            }
        }
    }
}
