//! Per-cluster scores that decide how much of the coreset each cluster gets.
//!
//! * transferability proxy: mean cosine of a centroid to the other centroids
//! * density: mean Gaussian kernel over distinct member pairs
//! * budget distribution: `P_i ∝ exp(S_i / (tau * D_i))`, rounded to integer
//!   budgets that sum to `N_core` and never exceed a cluster's size
//!
//! It also evaluates measured transferability from loss tables and its
//! Pearson correlation with the proxy.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterModel;
use crate::error::{Error, Result};
use crate::feature_store::{write_atomic, FeatureMatrix};
use crate::numeric::{cosine, derive_indexed_seed, GaussianKernel};

pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_DENSITY_CAP: usize = 512;

/// Mean cosine between centroid `i` and each of `targets`.
pub fn transfer_proxy(centroids: &[f32], dim: usize, i: usize, targets: &[usize]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::EmptyTargets);
    }
    let k = centroids.len() / dim;
    if let Some(bad) = std::iter::once(&i).chain(targets).find(|&&c| c >= k) {
        return Err(Error::InvalidArgument(format!(
            "cluster id {bad} out of range for k = {k}"
        )));
    }
    let row = |c: usize| &centroids[c * dim..(c + 1) * dim];
    let sum: f64 = targets.iter().map(|&j| cosine(row(i), row(j))).sum();
    Ok(sum / targets.len() as f64)
}

/// Proxy for every cluster, targeting all clusters (optionally including itself).
///
/// With a single cluster and `include_self == false` there is no target; the
/// proxy is reported as 0, which has no effect on a one-cluster budget.
pub fn transfer_proxies(model: &ClusterModel, include_self: bool) -> Result<Vec<f64>> {
    let k = model.k;
    (0..k)
        .into_par_iter()
        .map(|i| {
            let targets: Vec<usize> = (0..k).filter(|&j| include_self || j != i).collect();
            if targets.is_empty() {
                return Ok(0.0);
            }
            transfer_proxy(&model.centroids, model.feature_dim, i, &targets)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityOptions {
    /// Clusters larger than this are estimated on a uniform subsample of this size.
    /// `usize::MAX` gives the exact value.
    pub cap: usize,
    pub kernel: GaussianKernel,
}

impl Default for DensityOptions {
    fn default() -> Self {
        Self {
            cap: DEFAULT_DENSITY_CAP,
            kernel: GaussianKernel::default(),
        }
    }
}

/// Mean kernel value over ordered distinct pairs of `members` (rows of `features`).
/// A singleton cluster has density 1.
pub fn density(features: &FeatureMatrix, members: &[usize], opts: &DensityOptions, seed: u64) -> Result<f64> {
    let m = members.len();
    if m == 0 {
        return Err(Error::InvalidArgument("density of an empty cluster".into()));
    }
    if m == 1 {
        return Ok(1.0);
    }
    if opts.cap < 2 {
        return Err(Error::InvalidArgument("density cap must be at least 2".into()));
    }
    let sample: Vec<usize> = if m <= opts.cap {
        members.to_vec()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked: Vec<usize> = index::sample(&mut rng, m, opts.cap)
            .into_iter()
            .map(|i| members[i])
            .collect();
        picked.sort_unstable();
        picked
    };
    let s = sample.len();
    // each unordered pair counted once, then doubled
    let mut total = 0.0;
    for a in 0..s {
        let row_a = features.row(sample[a]);
        for &b in &sample[a + 1..] {
            total += opts.kernel.eval(row_a, features.row(b));
        }
    }
    Ok(2.0 * total / (s * (s - 1)) as f64)
}

/// Densities of every cluster of `model`; cluster `i` draws its subsample from
/// the stream `density/i` of `seed`.
pub fn densities(features: &FeatureMatrix, model: &ClusterModel, opts: &DensityOptions, seed: u64) -> Result<Vec<f64>> {
    let members = model.members();
    members
        .par_iter()
        .enumerate()
        .map(|(i, idx)| {
            if idx.is_empty() {
                return Err(Error::EmptyCluster(i));
            }
            density(features, idx, opts, derive_indexed_seed(seed, "density", i))
        })
        .collect()
}

/// Softmax of `S_i / (tau * D_i)` with max-subtraction.
pub fn budget_probabilities(proxy: &[f64], density: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    if proxy.len() != density.len() || proxy.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} proxies vs {} densities",
            proxy.len(),
            density.len()
        )));
    }
    if let Some(d) = density.iter().find(|&&d| !(d > 0.0 && d.is_finite())) {
        return Err(Error::InvalidArgument(format!("density must be positive, got {d}")));
    }
    let logits: Vec<f64> = proxy.iter().zip(density).map(|(s, d)| s / (tau * d)).collect();
    Ok(softmax(&logits))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Largest-remainder rounding of `total * weights[i] / sum(weights)` over the
/// `eligible` clusters. Ties in the remainder go to the lowest index.
fn largest_remainder(weights: &[f64], eligible: &[bool], total: usize) -> Vec<usize> {
    let mass: f64 = weights.iter().zip(eligible).filter(|(_, &e)| e).map(|(w, _)| w).sum();
    let count = eligible.iter().filter(|&&e| e).count();
    let share = |i: usize| {
        if !eligible[i] {
            0.0
        } else if mass > 0.0 {
            total as f64 * weights[i] / mass
        } else {
            total as f64 / count as f64
        }
    };
    let quotas: Vec<f64> = (0..weights.len()).map(share).collect();
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut left = total.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..weights.len()).filter(|&i| eligible[i]).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    // floating error can leave more than one unit per cluster to hand out
    while left > 0 {
        for &i in &order {
            if left == 0 {
                break;
            }
            out[i] += 1;
            left -= 1;
        }
    }
    out
}

/// Integer budgets from `probability`: largest-remainder rounding of
/// `n_core * P_i`, then cap-and-redistribute so no cluster exceeds its size.
pub fn round_budgets(probability: &[f64], sizes: &[usize], n_core: usize) -> Result<Vec<usize>> {
    if probability.len() != sizes.len() {
        return Err(Error::DimensionMismatch("probabilities vs cluster sizes".into()));
    }
    let n: usize = sizes.iter().sum();
    if n_core > n {
        return Err(Error::Infeasible(format!(
            "coreset size {n_core} exceeds the dataset size {n}"
        )));
    }
    let k = sizes.len();
    let mut budget = largest_remainder(probability, &vec![true; k], n_core);
    loop {
        let mut surplus = 0;
        for i in 0..k {
            if budget[i] > sizes[i] {
                surplus += budget[i] - sizes[i];
                budget[i] = sizes[i];
            }
        }
        if surplus == 0 {
            break;
        }
        let open: Vec<bool> = (0..k).map(|i| budget[i] < sizes[i]).collect();
        assert!(
            open.iter().any(|&o| o),
            "all clusters capped with budget left; impossible when n_core <= N"
        );
        let extra = largest_remainder(probability, &open, surplus);
        for i in 0..k {
            budget[i] += extra[i];
        }
    }
    debug_assert_eq!(budget.iter().sum::<usize>(), n_core);
    Ok(budget)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterScores {
    #[serde(rename = "S")]
    pub transfer_proxy: Vec<f64>,
    #[serde(rename = "D")]
    pub density: Vec<f64>,
    #[serde(rename = "P")]
    pub probability: Vec<f64>,
    #[serde(rename = "budgets")]
    pub budget: Vec<usize>,
    pub cluster_sizes: Vec<usize>,
    #[serde(rename = "N_core")]
    pub n_core: usize,
    pub tau: f64,
    /// `None` means exact density.
    pub density_sample_cap: Option<usize>,
    pub seed: u64,
    pub include_self_in_targets: bool,
    pub kernel_bandwidth: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer_analysis: Option<TransferAnalysis>,
}

pub fn allocate_budgets(
    proxy: &[f64],
    density: &[f64],
    tau: f64,
    sizes: &[usize],
    n_core: usize,
) -> Result<(Vec<f64>, Vec<usize>)> {
    if sizes.len() != proxy.len() {
        return Err(Error::DimensionMismatch("cluster sizes vs scores".into()));
    }
    let n: usize = sizes.iter().sum();
    if n_core > n {
        return Err(Error::Infeasible(format!(
            "coreset size {n_core} exceeds the dataset size {n}"
        )));
    }
    let p = budget_probabilities(proxy, density, tau)?;
    let budget = round_budgets(&p, sizes, n_core)?;
    Ok((p, budget))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreConfig {
    pub tau: f64,
    pub density: DensityOptions,
    pub include_self_in_targets: bool,
    /// Top-level seed; density subsampling uses its `density` stream.
    pub seed: u64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            density: DensityOptions::default(),
            include_self_in_targets: false,
            seed: 0,
        }
    }
}

pub fn score_clusters(
    features: &FeatureMatrix,
    model: &ClusterModel,
    cfg: &ScoreConfig,
    n_core: usize,
) -> Result<ClusterScores> {
    let proxy = transfer_proxies(model, cfg.include_self_in_targets)?;
    let density = densities(
        features,
        model,
        &cfg.density,
        crate::numeric::derive_seed(cfg.seed, "density"),
    )?;
    let sizes = model.cluster_sizes();
    let (probability, budget) = allocate_budgets(&proxy, &density, cfg.tau, &sizes, n_core)?;
    Ok(ClusterScores {
        transfer_proxy: proxy,
        density,
        probability,
        budget,
        cluster_sizes: sizes,
        n_core,
        tau: cfg.tau,
        density_sample_cap: (cfg.density.cap != usize::MAX).then_some(cfg.density.cap),
        seed: cfg.seed,
        include_self_in_targets: cfg.include_self_in_targets,
        kernel_bandwidth: cfg.density.kernel.bandwidth,
        transfer_analysis: None,
    })
}

impl ClusterScores {
    /// Recomputes probabilities and budgets for a different coreset size.
    pub fn with_n_core(&self, n_core: usize) -> Result<Self> {
        let (probability, budget) = allocate_budgets(
            &self.transfer_proxy,
            &self.density,
            self.tau,
            &self.cluster_sizes,
            n_core,
        )?;
        Ok(Self {
            probability,
            budget,
            n_core,
            ..self.clone()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.transfer_proxy.len();
        if [
            self.density.len(),
            self.probability.len(),
            self.budget.len(),
            self.cluster_sizes.len(),
        ]
        .iter()
        .any(|&l| l != k)
        {
            return Err(Error::Schema("score arrays have different lengths".into()));
        }
        if self.budget.iter().sum::<usize>() != self.n_core {
            return Err(Error::Invariant("budgets do not sum to N_core".into()));
        }
        if self.budget.iter().zip(&self.cluster_sizes).any(|(b, s)| b > s) {
            return Err(Error::Invariant("a budget exceeds its cluster size".into()));
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let scores: Self = serde_json::from_slice(&bytes)?;
        scores.validate()?;
        Ok(scores)
    }
}

/// Losses from the pairwise finetuning experiment: `loss_joint[s][t]` is the
/// target-`t` test loss after training on source `s` plus target `t`, and
/// `loss_solo[t]` the loss after training on target `t` alone.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferLossTable {
    pub sources: Vec<usize>,
    pub targets: Vec<usize>,
    pub loss_joint: Vec<Vec<f64>>,
    pub loss_solo: Vec<f64>,
}

#[derive(Debug, Deserialize)]
struct JointRow {
    source: usize,
    target: usize,
    loss_joint: f64,
}

#[derive(Debug, Deserialize)]
struct SoloRow {
    target: usize,
    loss_solo: f64,
}

impl TransferLossTable {
    pub fn new(
        sources: Vec<usize>,
        targets: Vec<usize>,
        loss_joint: Vec<Vec<f64>>,
        loss_solo: Vec<f64>,
    ) -> Result<Self> {
        let t = Self {
            sources,
            targets,
            loss_joint,
            loss_solo,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() || self.targets.is_empty() {
            return Err(Error::Invariant("loss table needs sources and targets".into()));
        }
        if self.loss_joint.len() != self.sources.len()
            || self.loss_joint.iter().any(|r| r.len() != self.targets.len())
            || self.loss_solo.len() != self.targets.len()
        {
            return Err(Error::DimensionMismatch("loss table shape".into()));
        }
        let all = self.loss_joint.iter().flatten().chain(&self.loss_solo);
        if let Some(v) = all.into_iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Invariant(format!("loss {v} is not finite and non-negative")));
        }
        Ok(())
    }

    /// Parses `source,target,loss_joint` and `target,loss_solo` CSV files.
    /// Every source must have a row for every target listed in the solo file.
    pub fn from_csv_readers<R1: std::io::Read, R2: std::io::Read>(joint: R1, solo: R2) -> Result<Self> {
        let mut solo_map = BTreeMap::new();
        for row in csv::Reader::from_reader(solo).deserialize::<SoloRow>() {
            let row = row?;
            if solo_map.insert(row.target, row.loss_solo).is_some() {
                return Err(Error::Schema(format!("duplicate solo row for target {}", row.target)));
            }
        }
        let mut joint_map = BTreeMap::new();
        let mut sources = BTreeSet::new();
        for row in csv::Reader::from_reader(joint).deserialize::<JointRow>() {
            let row = row?;
            if !solo_map.contains_key(&row.target) {
                return Err(Error::Schema(format!("target {} has no solo loss", row.target)));
            }
            sources.insert(row.source);
            if joint_map.insert((row.source, row.target), row.loss_joint).is_some() {
                return Err(Error::Schema(format!(
                    "duplicate joint row for ({}, {})",
                    row.source, row.target
                )));
            }
        }
        let targets: Vec<usize> = solo_map.keys().copied().collect();
        let sources: Vec<usize> = sources.into_iter().collect();
        let mut loss_joint = Vec::with_capacity(sources.len());
        for &s in &sources {
            let row = targets
                .iter()
                .map(|&t| {
                    joint_map
                        .get(&(s, t))
                        .copied()
                        .ok_or_else(|| Error::Schema(format!("missing joint loss for ({s}, {t})")))
                })
                .collect::<Result<Vec<_>>>()?;
            loss_joint.push(row);
        }
        let loss_solo = solo_map.into_values().collect();
        Self::new(sources, targets, loss_joint, loss_solo)
    }

    pub fn from_csv_files(joint: &Path, solo: &Path) -> Result<Self> {
        let j = fs::File::open(joint).map_err(|e| Error::io(joint, e))?;
        let s = fs::File::open(solo).map_err(|e| Error::io(solo, e))?;
        Self::from_csv_readers(j, s)
    }
}

/// Mean loss reduction on the targets for every source row.
pub fn transferability_from_losses(table: &TransferLossTable) -> Result<Vec<f64>> {
    table.validate()?;
    let k_tgt = table.targets.len() as f64;
    Ok(table
        .loss_joint
        .iter()
        .map(|row| {
            row.iter()
                .zip(&table.loss_solo)
                .map(|(joint, solo)| solo - joint)
                .sum::<f64>()
                / k_tgt
        })
        .collect())
}

/// Sample Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} values", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument("pearson needs at least two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument("pearson input has zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Measured transferability next to the centroid-similarity proxy for the
/// same sources and targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferAnalysis {
    pub sources: Vec<usize>,
    pub targets: Vec<usize>,
    #[serde(rename = "T")]
    pub transferability: Vec<f64>,
    #[serde(rename = "S")]
    pub proxy: Vec<f64>,
    /// `None` when either side has zero variance.
    pub pearson_r: Option<f64>,
}

pub fn analyze_transfer(model: &ClusterModel, table: &TransferLossTable) -> Result<TransferAnalysis> {
    let transferability = transferability_from_losses(table)?;
    let proxy = table
        .sources
        .iter()
        .map(|&s| transfer_proxy(&model.centroids, model.feature_dim, s, &table.targets))
        .collect::<Result<Vec<_>>>()?;
    let pearson_r = if proxy.len() >= 2 {
        pearson(&transferability, &proxy).ok()
    } else {
        None
    };
    Ok(TransferAnalysis {
        sources: table.sources.clone(),
        targets: table.targets.clone(),
        transferability,
        proxy,
        pearson_r,
    })
}
