//! Spherical k-means over unit-norm feature rows.
//!
//! Full-batch Lloyd iterations on the unit sphere: every sample goes to the
//! centroid with the highest cosine (lowest id on ties) and each centroid
//! becomes the L2-normalized mean of its members. An empty cluster is
//! re-seeded with the sample that is farthest from its own centroid.
//!
//! All reductions run in a fixed order, so a fit is bitwise reproducible
//! regardless of the rayon pool size.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{write_atomic, FeatureMatrix};

pub const CLUSTER_MAGIC: &[u8; 8] = b"COINCLUS";
pub const CLUSTER_FORMAT_VERSION: u32 = 1;
pub const CLUSTER_HEADER_LEN: usize = 28;
const FINAL_REPAIR_PASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitMethod {
    #[serde(rename = "kmeans++")]
    KMeansPlusPlus,
    #[serde(rename = "random-rows")]
    RandomRows,
}

impl std::str::FromStr for InitMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans++" => Ok(Self::KMeansPlusPlus),
            "random-rows" => Ok(Self::RandomRows),
            other => Err(Error::InvalidArgument(format!("unknown init method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iterations: usize,
    /// Stop once the objective improves by less than this. `None` means `1e-6 * N`.
    pub tolerance: Option<f64>,
    pub seed: u64,
    pub init: InitMethod,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            max_iterations: 100,
            tolerance: None,
            seed,
            init: InitMethod::KMeansPlusPlus,
        }
    }

    fn validate(&self, n_samples: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if self.k > n_samples {
            return Err(Error::InvalidArgument(format!(
                "k = {} exceeds the number of samples ({n_samples})",
                self.k
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max_iterations must be at least 1".into()));
        }
        if let Some(t) = self.tolerance {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::InvalidArgument(format!("bad tolerance {t}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub feature_dim: usize,
    /// `k x feature_dim`, row-major, unit-norm rows.
    pub centroids: Vec<f32>,
    pub assignment: Vec<usize>,
    /// Lloyd iterations performed; 0 for a model loaded from disk.
    pub iterations_run: usize,
    /// `sum_n cos(u_n, e_{assignment[n]})` for the stored centroids.
    pub objective: f64,
    /// Objective after each Lloyd iteration (empty for a loaded model).
    pub objective_history: Vec<f64>,
}

impl ClusterModel {
    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn n_samples(&self) -> usize {
        self.assignment.len()
    }

    /// Member indices of every cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        members_of(&self.assignment, self.k)
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }
}

fn members_of(assignment: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); k];
    for (n, &a) in assignment.iter().enumerate() {
        members[a].push(n);
    }
    members
}

/// Rows as f64, each rescaled to exactly unit length.
fn unit_rows(features: &FeatureMatrix) -> Result<Vec<Vec<f64>>> {
    features
        .rows()
        .enumerate()
        .map(|(i, r)| {
            let v: Vec<f64> = r.iter().map(|&x| f64::from(x)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Invariant(format!("feature row {i} has zero norm")));
            }
            Ok(v.into_iter().map(|x| x / n).collect())
        })
        .collect()
}

#[inline]
fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

/// Argmax-dot over centroids, lowest index on ties.
fn argmax_centroid(row: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (c, e) in centroids.iter().enumerate() {
        let s = dot64(row, e);
        if s > best.1 {
            best = (c, s);
        }
    }
    best
}

fn assign_rows(rows: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<usize> {
    rows.par_iter().map(|r| argmax_centroid(r, centroids).0).collect()
}

fn objective_of(rows: &[Vec<f64>], centroids: &[Vec<f64>], assignment: &[usize]) -> f64 {
    let per_sample: Vec<f64> = rows
        .par_iter()
        .zip(assignment.par_iter())
        .map(|(r, &a)| dot64(r, &centroids[a]))
        .collect();
    per_sample.iter().sum()
}

/// Normalized member means; clusters without members (or with a zero mean)
/// keep their previous centroid.
fn update_centroids(rows: &[Vec<f64>], assignment: &[usize], previous: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = previous[0].len();
    let members = members_of(assignment, previous.len());
    members
        .par_iter()
        .zip(previous.par_iter())
        .map(|(idx, prev)| {
            let mut sum = vec![0.0; dim];
            for &n in idx {
                for (s, x) in sum.iter_mut().zip(&rows[n]) {
                    *s += x;
                }
            }
            if idx.is_empty() || !normalize(&mut sum) {
                prev.clone()
            } else {
                sum
            }
        })
        .collect()
}

/// Re-seeds each empty cluster (in id order) with the sample of lowest cosine
/// to its own centroid, taken from a cluster that has more than one member.
fn repair_empty(rows: &[Vec<f64>], assignment: &mut [usize], centroids: &mut [Vec<f64>]) -> usize {
    let k = centroids.len();
    let mut sizes = vec![0usize; k];
    for &a in assignment.iter() {
        sizes[a] += 1;
    }
    let mut repaired = 0;
    for empty in 0..k {
        if sizes[empty] != 0 {
            continue;
        }
        let mut donor: Option<(usize, f64)> = None;
        for (n, r) in rows.iter().enumerate() {
            let a = assignment[n];
            if sizes[a] < 2 {
                continue;
            }
            let s = dot64(r, &centroids[a]);
            if donor.is_none_or(|(_, best)| s < best) {
                donor = Some((n, s));
            }
        }
        // k <= n guarantees a donor exists while any cluster is empty
        let (n, _) = donor.expect("a cluster with at least two members");
        sizes[assignment[n]] -= 1;
        assignment[n] = empty;
        sizes[empty] = 1;
        centroids[empty] = rows[n].clone();
        repaired += 1;
    }
    repaired
}

fn init_centroids(rows: &[Vec<f64>], cfg: &KMeansConfig) -> Vec<Vec<f64>> {
    let n = rows.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    match cfg.init {
        InitMethod::RandomRows => index::sample(&mut rng, n, cfg.k)
            .into_iter()
            .map(|i| rows[i].clone())
            .collect(),
        InitMethod::KMeansPlusPlus => {
            let mut chosen = vec![false; n];
            let first = rng.random_range(0..n);
            chosen[first] = true;
            let mut seeds = vec![rows[first].clone()];
            let mut best_cos: Vec<f64> = rows.par_iter().map(|r| dot64(r, &seeds[0])).collect();
            while seeds.len() < cfg.k {
                let weights: Vec<f64> = best_cos
                    .iter()
                    .zip(&chosen)
                    .map(|(&c, &taken)| if taken { 0.0 } else { (1.0 - c).max(0.0) })
                    .collect();
                let total: f64 = weights.iter().sum();
                let pick = if total > 0.0 {
                    let target = rng.random::<f64>() * total;
                    let mut acc = 0.0;
                    let mut pick = None;
                    for (i, &w) in weights.iter().enumerate() {
                        if w <= 0.0 {
                            continue;
                        }
                        acc += w;
                        pick = Some(i);
                        if acc > target {
                            break;
                        }
                    }
                    pick.expect("positive total weight")
                } else {
                    // every remaining sample coincides with a seed
                    let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
                    free[rng.random_range(0..free.len())]
                };
                chosen[pick] = true;
                let seed = rows[pick].clone();
                best_cos
                    .par_iter_mut()
                    .zip(rows.par_iter())
                    .for_each(|(b, r)| *b = b.max(dot64(r, &seed)));
                seeds.push(seed);
            }
            seeds
        }
    }
}

fn has_empty(assignment: &[usize], k: usize) -> bool {
    let mut seen = vec![false; k];
    for &a in assignment {
        seen[a] = true;
    }
    seen.iter().any(|s| !s)
}

fn round_centroids(centroids: &[Vec<f64>]) -> (Vec<f32>, Vec<Vec<f64>>) {
    let flat: Vec<f32> = centroids.iter().flatten().map(|&x| x as f32).collect();
    let widened = centroids
        .iter()
        .map(|c| c.iter().map(|&x| f64::from(x as f32)).collect())
        .collect();
    (flat, widened)
}

pub fn fit(features: &FeatureMatrix, cfg: &KMeansConfig) -> Result<ClusterModel> {
    cfg.validate(features.n_samples())?;
    let rows = unit_rows(features)?;
    let n = rows.len();
    let tolerance = cfg.tolerance.unwrap_or(1e-6 * n as f64);

    let mut centroids = init_centroids(&rows, cfg);
    let mut assignment = assign_rows(&rows, &centroids);
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut previous = f64::NEG_INFINITY;
    while iterations < cfg.max_iterations {
        repair_empty(&rows, &mut assignment, &mut centroids);
        centroids = update_centroids(&rows, &assignment, &centroids);
        let next = assign_rows(&rows, &centroids);
        let objective = objective_of(&rows, &centroids, &next);
        history.push(objective);
        iterations += 1;
        let unchanged = next == assignment;
        assignment = next;
        if unchanged || objective - previous < tolerance {
            break;
        }
        previous = objective;
    }

    // Round to the stored precision and make the assignment consistent with
    // the rounded centroids. A few extra repair passes cover the rare case
    // where rounding or the last reassignment emptied a cluster.
    let (mut flat, mut stored) = round_centroids(&centroids);
    assignment = assign_rows(&rows, &stored);
    let mut passes = 0;
    while has_empty(&assignment, cfg.k) {
        repair_empty(&rows, &mut assignment, &mut centroids);
        if passes == FINAL_REPAIR_PASSES {
            // keep the repaired assignment as is
            (flat, stored) = round_centroids(&centroids);
            break;
        }
        centroids = update_centroids(&rows, &assignment, &centroids);
        (flat, stored) = round_centroids(&centroids);
        assignment = assign_rows(&rows, &stored);
        passes += 1;
    }
    let objective = objective_of(&rows, &stored, &assignment);

    Ok(ClusterModel {
        k: cfg.k,
        feature_dim: features.feature_dim(),
        centroids: flat,
        assignment,
        iterations_run: iterations,
        objective,
        objective_history: history,
    })
}

fn check_centroids(features: &FeatureMatrix, centroids: &[f32]) -> Result<usize> {
    let f = features.feature_dim();
    if centroids.is_empty() || !centroids.len().is_multiple_of(f) {
        return Err(Error::DimensionMismatch(format!(
            "{} centroid values do not form rows of dimension {f}",
            centroids.len()
        )));
    }
    Ok(centroids.len() / f)
}

/// Maps every sample to the centroid of highest cosine; ties go to the lowest id.
pub fn assign(features: &FeatureMatrix, centroids: &[f32]) -> Result<Vec<usize>> {
    check_centroids(features, centroids)?;
    let cents = widen_unit(centroids, features.feature_dim());
    Ok(assign_rows(&unit_rows(features)?, &cents))
}

/// Same as [`assign`] but by minimum Euclidean distance. On unit-norm data
/// both give the same answer.
pub fn assign_euclidean(features: &FeatureMatrix, centroids: &[f32]) -> Result<Vec<usize>> {
    check_centroids(features, centroids)?;
    let cents = widen_unit(centroids, features.feature_dim());
    let rows = unit_rows(features)?;
    Ok(rows
        .par_iter()
        .map(|r| {
            let mut best = (0, f64::INFINITY);
            for (c, e) in cents.iter().enumerate() {
                let d: f64 = r.iter().zip(e).map(|(x, y)| (x - y) * (x - y)).sum();
                if d < best.1 {
                    best = (c, d);
                }
            }
            best.0
        })
        .collect())
}

fn widen_unit(centroids: &[f32], dim: usize) -> Vec<Vec<f64>> {
    centroids
        .chunks_exact(dim)
        .map(|c| {
            let mut v: Vec<f64> = c.iter().map(|&x| f64::from(x)).collect();
            normalize(&mut v);
            v
        })
        .collect()
}

/// `sum_n cos(u_n, e_{assignment[n]})`.
pub fn objective(features: &FeatureMatrix, centroids: &[f32], assignment: &[usize]) -> Result<f64> {
    let k = check_centroids(features, centroids)?;
    if assignment.len() != features.n_samples() || assignment.iter().any(|&a| a >= k) {
        return Err(Error::DimensionMismatch("assignment does not match features".into()));
    }
    let cents: Vec<Vec<f64>> = centroids
        .chunks_exact(features.feature_dim())
        .map(|c| c.iter().map(|&x| f64::from(x)).collect())
        .collect();
    Ok(objective_of(&unit_rows(features)?, &cents, assignment))
}

pub fn encode_clusters(model: &ClusterModel) -> Result<Vec<u8>> {
    let to_u32 =
        |v: usize, what: &str| u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} exceeds u32")));
    let mut out = Vec::with_capacity(CLUSTER_HEADER_LEN + model.centroids.len() * 4 + model.assignment.len() * 4);
    out.extend_from_slice(CLUSTER_MAGIC);
    out.extend_from_slice(&CLUSTER_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(model.k, "k")?.to_le_bytes());
    out.extend_from_slice(&to_u32(model.feature_dim, "feature_dim")?.to_le_bytes());
    out.extend_from_slice(&(model.assignment.len() as u64).to_le_bytes());
    for v in &model.centroids {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &a in &model.assignment {
        out.extend_from_slice(&to_u32(a, "cluster id")?.to_le_bytes());
    }
    Ok(out)
}

pub fn write_clusters(model: &ClusterModel, path: &Path) -> Result<()> {
    write_atomic(path, &encode_clusters(model)?)
}

/// Parses a `.clusters` file and checks it against `features`. The objective
/// is recomputed from the features.
pub fn decode_clusters(bytes: &[u8], features: &FeatureMatrix) -> Result<ClusterModel> {
    if bytes.len() < CLUSTER_HEADER_LEN {
        return Err(Error::Schema("cluster file shorter than its header".into()));
    }
    if &bytes[0..8] != CLUSTER_MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(CLUSTER_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[0..8]).into_owned(),
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(8);
    if version != CLUSTER_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let k = u32_at(12) as usize;
    let dim = u32_at(16) as usize;
    let n = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
    if dim != features.feature_dim() || n != features.n_samples() {
        return Err(Error::DimensionMismatch(format!(
            "cluster file is for {n}x{dim} features, got {}x{}",
            features.n_samples(),
            features.feature_dim()
        )));
    }
    if k == 0 || k > n {
        return Err(Error::Schema(format!("invalid k = {k} for {n} samples")));
    }
    let expected = CLUSTER_HEADER_LEN + k * dim * 4 + n * 4;
    if bytes.len() != expected {
        return Err(Error::Schema(format!(
            "cluster file is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let cent_end = CLUSTER_HEADER_LEN + k * dim * 4;
    let centroids: Vec<f32> = bytes[CLUSTER_HEADER_LEN..cent_end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if centroids.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("centroids".into()));
    }
    let assignment: Vec<usize> = bytes[cent_end..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    if let Some(bad) = assignment.iter().find(|&&a| a >= k) {
        return Err(Error::Schema(format!("cluster id {bad} out of range for k = {k}")));
    }
    if has_empty(&assignment, k) {
        return Err(Error::Invariant("cluster file contains an empty cluster".into()));
    }
    let objective = objective(features, &centroids, &assignment)?;
    Ok(ClusterModel {
        k,
        feature_dim: dim,
        centroids,
        assignment,
        iterations_run: 0,
        objective,
        objective_history: Vec::new(),
    })
}

pub fn read_clusters(path: &Path, features: &FeatureMatrix) -> Result<ClusterModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_clusters(&bytes, features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::norm;

    fn fm(rows: &[Vec<f32>]) -> FeatureMatrix {
        FeatureMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn n_equals_k_puts_each_point_alone() {
        let rows = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.6, 0.8, 0.0],
        ];
        let model = fit(&fm(&rows), &KMeansConfig::new(4, 3)).unwrap();
        let mut sizes = model.cluster_sizes();
        sizes.sort();
        assert_eq!(sizes, vec![1, 1, 1, 1]);
        assert!((model.objective - 4.0).abs() < 1e-6);
    }

    #[test]
    fn identical_points_single_cluster() {
        let p = vec![0.6f32, 0.0, 0.8];
        let model = fit(&fm(&vec![p.clone(); 7]), &KMeansConfig::new(1, 0)).unwrap();
        for (c, x) in model.centroid(0).iter().zip(&p) {
            assert!((c - x).abs() < 1e-7);
        }
        assert!((model.objective - 7.0).abs() < 1e-6);
    }

    #[test]
    fn duplicates_with_n_equal_k_are_repaired() {
        let p = vec![1.0f32, 0.0];
        let model = fit(&fm(&[p.clone(), p.clone(), vec![0.0, 1.0]]), &KMeansConfig::new(3, 1)).unwrap();
        assert_eq!(model.cluster_sizes(), vec![1, 1, 1]);
    }

    #[test]
    fn k_larger_than_n_is_rejected() {
        let err = fit(&fm(&[vec![1.0, 0.0]]), &KMeansConfig::new(2, 0)).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn assign_exact_match_and_tie() {
        let feats = fm(&[vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]]);
        // centroid 2 equals sample 0; sample 1 is equidistant from 1 and 3
        let h = std::f32::consts::FRAC_1_SQRT_2;
        let centroids = [
            0.0, 1.0, 0.0, // 0
            h, h, 0.0, // 1
            0.0, 0.0, 1.0, // 2
            h, -h, 0.0, // 3
        ];
        assert_eq!(assign(&feats, &centroids).unwrap(), vec![2, 1]);
    }

    #[test]
    fn assign_rejects_dimension_mismatch() {
        let feats = fm(&[vec![1.0, 0.0, 0.0]]);
        assert!(matches!(assign(&feats, &[1.0, 0.0]), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn random_init_and_persistence() {
        let rows: Vec<Vec<f32>> = (0..20)
            .map(|i| {
                let a = i as f32 * 0.3;
                vec![a.cos(), a.sin()]
            })
            .collect();
        let feats = fm(&rows);
        let mut cfg = KMeansConfig::new(4, 9);
        cfg.init = InitMethod::RandomRows;
        let model = fit(&feats, &cfg).unwrap();
        for c in 0..model.k {
            assert!((norm(model.centroid(c)) - 1.0).abs() < 1e-6);
        }
        let bytes = encode_clusters(&model).unwrap();
        assert_eq!(bytes.len(), CLUSTER_HEADER_LEN + 4 * 2 * 4 + 20 * 4);
        let back = decode_clusters(&bytes, &feats).unwrap();
        assert_eq!(back.centroids, model.centroids);
        assert_eq!(back.assignment, model.assignment);
        assert_eq!(back.objective.to_bits(), model.objective.to_bits());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_clusters(&bad, &feats), Err(Error::BadMagic { .. })));
        let other = fm(&rows[..10]);
        assert!(decode_clusters(&bytes, &other).is_err());
    }
}
