//! Intra-cluster selection and coreset assembly.
//!
//! The default strategy grows a subset greedily, each step adding the member
//! that minimizes the squared maximum mean discrepancy between the cluster
//! and the subset:
//!
//! ```text
//! MMD² = A(C, C) + A(C', C') - 2 A(C, C'),   A(X, Y) = mean of d(p, q) over p ∈ X, q ∈ Y
//! ```
//!
//! [`MmdState`] keeps per-candidate running kernel sums so each step costs
//! one kernel row instead of a full recomputation.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterModel;
use crate::error::{Error, Result};
use crate::feature_store::{write_atomic, DatasetManifest, FeatureMatrix};
use crate::numeric::{cosine, derive_indexed_seed, derive_seed, exact_sum, GaussianKernel};
use crate::scoring::ClusterScores;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "mmd-greedy")]
    MmdGreedy,
    #[serde(rename = "nearest-centroid")]
    NearestCentroid,
    #[serde(rename = "random")]
    Random,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::MmdGreedy => "mmd-greedy",
            Strategy::NearestCentroid => "nearest-centroid",
            Strategy::Random => "random",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mmd-greedy" => Ok(Strategy::MmdGreedy),
            "nearest-centroid" => Ok(Strategy::NearestCentroid),
            "random" => Ok(Strategy::Random),
            other => Err(Error::InvalidArgument(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmdOptions {
    pub kernel: GaussianKernel,
    /// Whether the kernel averages include `p == q` terms. Excluding them
    /// gives the unbiased estimate; the full subset still has MMD² = 0.
    pub self_pairs: bool,
}

impl Default for MmdOptions {
    fn default() -> Self {
        Self {
            kernel: GaussianKernel::default(),
            self_pairs: true,
        }
    }
}

/// `A(X, X)` from the full pair sum (diagonal included) of a set of size `s`.
fn within_term(pair_sum: f64, s: usize, self_pairs: bool) -> f64 {
    let s_f = s as f64;
    if self_pairs {
        pair_sum / (s_f * s_f)
    } else if s == 1 {
        1.0
    } else {
        // every diagonal term is exp(0) = 1
        (pair_sum - s_f) / (s_f * (s_f - 1.0))
    }
}

/// `A(C, C')` from `sum_{q ∈ C'} row_sums[q]`. Without self pairs the
/// `p == q` terms (each exactly 1) are dropped as well.
fn cross_term(row_sum: f64, m: usize, s: usize, self_pairs: bool) -> f64 {
    let (m_f, s_f) = (m as f64, s as f64);
    if self_pairs {
        row_sum / (m_f * s_f)
    } else if m == 1 {
        1.0
    } else {
        (row_sum - s_f) / (s_f * (m_f - 1.0))
    }
}

fn check_subset(m: usize, subset: &[usize]) -> Result<()> {
    if subset.is_empty() {
        return Err(Error::InvalidArgument("MMD² of an empty subset".into()));
    }
    let mut seen = HashSet::with_capacity(subset.len());
    for &i in subset {
        if i >= m {
            return Err(Error::InvalidArgument(format!(
                "subset index {i} outside a cluster of {m}"
            )));
        }
        if !seen.insert(i) {
            return Err(Error::InvalidArgument(format!("subset index {i} repeated")));
        }
    }
    Ok(())
}

/// Direct evaluation of MMD² between all rows of `points` and the rows in `subset`.
pub fn mmd_squared(points: &FeatureMatrix, subset: &[usize], opts: &MmdOptions) -> Result<f64> {
    let m = points.n_samples();
    check_subset(m, subset)?;
    let k = |a: usize, b: usize| opts.kernel.eval(points.row(a), points.row(b));
    let mut full = 0.0;
    for a in 0..m {
        for b in 0..m {
            full += k(a, b);
        }
    }
    let mut sub = 0.0;
    for &a in subset {
        for &b in subset {
            sub += k(a, b);
        }
    }
    let mut cross = 0.0;
    for a in 0..m {
        for &b in subset {
            cross += k(a, b);
        }
    }
    let s = subset.len();
    Ok(
        within_term(full, m, opts.self_pairs) + within_term(sub, s, opts.self_pairs)
            - 2.0 * cross_term(cross, m, s, opts.self_pairs),
    )
}

/// Incrementally maintained MMD² bookkeeping for one cluster.
#[derive(Debug, Clone)]
pub struct MmdState<'a> {
    points: &'a FeatureMatrix,
    opts: MmdOptions,
    selected: Vec<usize>,
    in_subset: Vec<bool>,
    /// `sum_p d(j, p)` over the whole cluster, per member `j`.
    row_sums: Vec<f64>,
    /// `A(C, C)`.
    const_term: f64,
    /// `sum_{p, q ∈ C'} d(p, q)`, diagonal included.
    sum_kernel_selected_pairs: f64,
    /// `sum_{q ∈ C'} d(j, q)` per member `j`.
    sum_kernel_cross: Vec<f64>,
    /// `sum_{q ∈ C'} row_sums[q]`.
    sum_row_selected: f64,
}

impl<'a> MmdState<'a> {
    /// O(m²) setup: one pass of kernel row sums. The kernel matrix itself is
    /// never stored. Sums are exact, so they do not depend on row order.
    pub fn new(points: &'a FeatureMatrix, opts: MmdOptions) -> Self {
        let m = points.n_samples();
        let row_sums: Vec<f64> = (0..m)
            .into_par_iter()
            .map(|j| {
                let rj = points.row(j);
                let terms: Vec<f64> = points.rows().map(|rp| opts.kernel.eval(rj, rp)).collect();
                exact_sum(&terms)
            })
            .collect();
        let total = exact_sum(&row_sums);
        Self {
            points,
            opts,
            selected: Vec::new(),
            in_subset: vec![false; m],
            const_term: within_term(total, m, opts.self_pairs),
            row_sums,
            sum_kernel_selected_pairs: 0.0,
            sum_kernel_cross: vec![0.0; m],
            sum_row_selected: 0.0,
        }
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn cluster_size(&self) -> usize {
        self.row_sums.len()
    }

    pub fn const_term(&self) -> f64 {
        self.const_term
    }

    pub fn sum_kernel_selected_pairs(&self) -> f64 {
        self.sum_kernel_selected_pairs
    }

    pub fn sum_kernel_cross(&self) -> &[f64] {
        &self.sum_kernel_cross
    }

    fn mmd_for(&self, pair_sum: f64, row_sum: f64, s: usize) -> f64 {
        let m = self.cluster_size();
        self.const_term + within_term(pair_sum, s, self.opts.self_pairs)
            - 2.0 * cross_term(row_sum, m, s, self.opts.self_pairs)
    }

    /// MMD² of the current subset; `None` while it is empty.
    pub fn mmd2(&self) -> Option<f64> {
        let s = self.selected.len();
        (s > 0).then(|| self.mmd_for(self.sum_kernel_selected_pairs, self.sum_row_selected, s))
    }

    /// MMD² of the current subset plus candidate `j` (which must not be selected).
    pub fn candidate_mmd2(&self, j: usize) -> f64 {
        let pairs = self.sum_kernel_selected_pairs + 2.0 * self.sum_kernel_cross[j] + 1.0;
        self.mmd_for(pairs, self.sum_row_selected + self.row_sums[j], self.selected.len() + 1)
    }

    /// Unselected member with the lowest candidate MMD², lowest index on ties.
    pub fn best_candidate(&self) -> Option<(usize, f64)> {
        let scores: Vec<(usize, f64)> = (0..self.cluster_size())
            .into_par_iter()
            .filter(|&j| !self.in_subset[j])
            .map(|j| (j, self.candidate_mmd2(j)))
            .collect();
        let mut best: Option<(usize, f64)> = None;
        for (j, v) in scores {
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((j, v));
            }
        }
        best
    }

    pub fn push(&mut self, j: usize) -> Result<()> {
        if j >= self.cluster_size() || self.in_subset[j] {
            return Err(Error::InvalidArgument(format!("cannot add member {j}")));
        }
        self.sum_kernel_selected_pairs += 2.0 * self.sum_kernel_cross[j] + 1.0;
        self.sum_row_selected += self.row_sums[j];
        let points = self.points;
        let kernel = self.opts.kernel;
        let rj = points.row(j);
        self.sum_kernel_cross
            .par_iter_mut()
            .enumerate()
            .for_each(|(q, c)| *c += kernel.eval(points.row(q), rj));
        self.in_subset[j] = true;
        self.selected.push(j);
        Ok(())
    }
}

fn check_n_select(m: usize, n_select: usize) -> Result<()> {
    if n_select == 0 || n_select > m {
        return Err(Error::InvalidArgument(format!(
            "cannot select {n_select} of {m} members"
        )));
    }
    Ok(())
}

/// Greedy MMD² minimization; returns member indices in selection order.
pub fn select_mmd_greedy(points: &FeatureMatrix, n_select: usize, opts: &MmdOptions) -> Result<Vec<usize>> {
    check_n_select(points.n_samples(), n_select)?;
    let mut state = MmdState::new(points, *opts);
    for _ in 0..n_select {
        let (j, _) = state.best_candidate().expect("candidates remain while n_select <= m");
        state.push(j)?;
    }
    Ok(state.selected)
}

/// The `n_select` members most cosine-similar to `centroid`, lowest index on ties.
pub fn select_nearest_centroid(points: &FeatureMatrix, centroid: &[f32], n_select: usize) -> Result<Vec<usize>> {
    check_n_select(points.n_samples(), n_select)?;
    if centroid.len() != points.feature_dim() {
        return Err(Error::DimensionMismatch(format!(
            "centroid dim {} vs feature dim {}",
            centroid.len(),
            points.feature_dim()
        )));
    }
    let sims: Vec<f64> = points.rows().map(|r| cosine(r, centroid)).collect();
    let mut order: Vec<usize> = (0..points.n_samples()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order.truncate(n_select);
    Ok(order)
}

/// Uniform sample without replacement, in draw order.
pub fn select_random(cluster_size: usize, n_select: usize, seed: u64) -> Result<Vec<usize>> {
    check_n_select(cluster_size, n_select)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(index::sample(&mut rng, cluster_size, n_select).into_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoresetSelection {
    /// Global sample indices per cluster, in selection order.
    pub per_cluster: BTreeMap<usize, Vec<usize>>,
    /// All selected global indices, ascending.
    pub merged: Vec<usize>,
    pub strategy: Strategy,
    pub seed: u64,
}

/// Checks the per-cluster lists against the assignment and merges them.
pub fn assemble(
    per_cluster: BTreeMap<usize, Vec<usize>>,
    assignment: &[usize],
    strategy: Strategy,
    seed: u64,
) -> Result<CoresetSelection> {
    let mut seen = HashSet::new();
    let mut merged = Vec::new();
    for (&cluster, list) in &per_cluster {
        for &g in list {
            match assignment.get(g) {
                None => {
                    return Err(Error::Invariant(format!("sample index {g} out of range")));
                }
                Some(&a) if a != cluster => {
                    return Err(Error::Invariant(format!(
                        "sample {g} belongs to cluster {a}, not {cluster}"
                    )));
                }
                _ => {}
            }
            if !seen.insert(g) {
                return Err(Error::Invariant(format!("sample {g} selected twice")));
            }
            merged.push(g);
        }
    }
    merged.sort_unstable();
    Ok(CoresetSelection {
        per_cluster,
        merged,
        strategy,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectConfig {
    pub strategy: Strategy,
    pub mmd: MmdOptions,
    /// Top-level seed; random selection draws from its `select` stream.
    pub seed: u64,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::MmdGreedy,
            mmd: MmdOptions::default(),
            seed: 0,
        }
    }
}

/// Runs the intra-cluster strategy on every cluster with its budget and
/// assembles the coreset.
pub fn select_coreset(
    features: &FeatureMatrix,
    model: &ClusterModel,
    scores: &ClusterScores,
    cfg: &SelectConfig,
) -> Result<CoresetSelection> {
    if scores.budget.len() != model.k {
        return Err(Error::DimensionMismatch(format!(
            "{} budgets for {} clusters",
            scores.budget.len(),
            model.k
        )));
    }
    let members = model.members();
    let stage_seed = derive_seed(cfg.seed, "select");
    let lists = members
        .par_iter()
        .enumerate()
        .map(|(c, idx)| {
            let budget = scores.budget[c];
            if budget > idx.len() {
                return Err(Error::Invariant(format!(
                    "budget {budget} exceeds size {} of cluster {c}",
                    idx.len()
                )));
            }
            if budget == 0 {
                return Ok((c, Vec::new()));
            }
            let local = match cfg.strategy {
                Strategy::Random => select_random(idx.len(), budget, derive_indexed_seed(stage_seed, "cluster", c))?,
                Strategy::NearestCentroid => {
                    select_nearest_centroid(&features.select_rows(idx)?, model.centroid(c), budget)?
                }
                Strategy::MmdGreedy => select_mmd_greedy(&features.select_rows(idx)?, budget, &cfg.mmd)?,
            };
            Ok((c, local.into_iter().map(|l| idx[l]).collect()))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    assemble(lists, &model.assignment, cfg.strategy, cfg.seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedSample {
    pub sample_id: String,
    pub global_index: usize,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoresetCluster {
    pub id: usize,
    pub budget: usize,
    #[serde(rename = "S")]
    pub transfer_proxy: f64,
    #[serde(rename = "D")]
    pub density: f64,
    pub samples: Vec<SelectedSample>,
}

/// On-disk form of a [`CoresetSelection`] with provenance per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoresetFile {
    pub strategy: Strategy,
    pub seed: u64,
    #[serde(rename = "N_core")]
    pub n_core: usize,
    pub clusters: Vec<CoresetCluster>,
    pub merged: Vec<usize>,
}

impl CoresetFile {
    pub fn build(selection: &CoresetSelection, scores: &ClusterScores, manifest: &DatasetManifest) -> Result<Self> {
        let k = scores.budget.len();
        let mut clusters = Vec::with_capacity(k);
        for c in 0..k {
            let list = selection.per_cluster.get(&c).map(Vec::as_slice).unwrap_or(&[]);
            if list.len() != scores.budget[c] {
                return Err(Error::Invariant(format!(
                    "cluster {c} has {} selections for budget {}",
                    list.len(),
                    scores.budget[c]
                )));
            }
            let samples = list
                .iter()
                .enumerate()
                .map(|(rank, &g)| {
                    let sample_id = manifest
                        .sample_ids
                        .get(g)
                        .ok_or_else(|| Error::Invariant(format!("sample index {g} not in manifest")))?
                        .clone();
                    Ok(SelectedSample {
                        sample_id,
                        global_index: g,
                        rank,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            clusters.push(CoresetCluster {
                id: c,
                budget: scores.budget[c],
                transfer_proxy: scores.transfer_proxy[c],
                density: scores.density[c],
                samples,
            });
        }
        if let Some(extra) = selection.per_cluster.keys().find(|&&c| c >= k) {
            return Err(Error::Invariant(format!("selection for unknown cluster {extra}")));
        }
        Ok(Self {
            strategy: selection.strategy,
            seed: selection.seed,
            n_core: selection.merged.len(),
            clusters,
            merged: selection.merged.clone(),
        })
    }

    pub fn to_selection(&self) -> CoresetSelection {
        CoresetSelection {
            per_cluster: self
                .clusters
                .iter()
                .map(|c| (c.id, c.samples.iter().map(|s| s.global_index).collect()))
                .collect(),
            merged: self.merged.clone(),
            strategy: self.strategy,
            seed: self.seed,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}
