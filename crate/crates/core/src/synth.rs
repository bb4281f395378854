//! Synthetic datasets with planted clusters, and metrics for judging a
//! selected coreset against the planted structure.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{write_atomic, DatasetManifest, FeatureMatrix, MANIFEST_VERSION};
use crate::numeric::{derive_indexed_seed, derive_seed};
use crate::sampling::CoresetSelection;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PointsPerCluster {
    Fixed(usize),
    /// Inclusive range; each cluster draws its size uniformly.
    Range([usize; 2]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Spread {
    Uniform(f64),
    PerCluster(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_clusters_true: usize,
    pub points_per_cluster: PointsPerCluster,
    /// Feature dimension; must be even.
    pub dim: usize,
    /// Maximum angle (degrees) between a point and its planted center.
    pub angular_spread_deg: Spread,
    /// Cosine between any two planted centers; 0 gives orthogonal centers.
    #[serde(default)]
    pub inter_cluster_sim: f64,
    /// One label per planted cluster; defaults to `task_<i>`.
    #[serde(default)]
    pub task_labels: Vec<String>,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let c = self.n_clusters_true;
        if c == 0 {
            return bad("n_clusters_true must be at least 1".into());
        }
        if self.dim == 0 || !self.dim.is_multiple_of(2) {
            return bad(format!("dim must be even and positive, got {}", self.dim));
        }
        if !(0.0..1.0).contains(&self.inter_cluster_sim) {
            return bad(format!(
                "inter_cluster_sim must be in [0, 1), got {}",
                self.inter_cluster_sim
            ));
        }
        let needed = c + usize::from(self.inter_cluster_sim > 0.0);
        if self.dim < needed {
            return bad(format!("dim {} cannot hold {needed} orthogonal directions", self.dim));
        }
        match &self.points_per_cluster {
            PointsPerCluster::Fixed(0) => return bad("points_per_cluster must be positive".into()),
            PointsPerCluster::Range([lo, hi]) if *lo == 0 || lo > hi => {
                return bad(format!("bad points_per_cluster range [{lo}, {hi}]"))
            }
            _ => {}
        }
        let spreads = self.spreads()?;
        if let Some(s) = spreads.iter().find(|s| !(**s >= 0.0 && **s < 90.0)) {
            return bad(format!("angular spread {s} must be in [0, 90) degrees"));
        }
        if !self.task_labels.is_empty() && self.task_labels.len() != c {
            return bad(format!("{} task labels for {c} clusters", self.task_labels.len()));
        }
        Ok(())
    }

    fn spreads(&self) -> Result<Vec<f64>> {
        match &self.angular_spread_deg {
            Spread::Uniform(s) => Ok(vec![*s; self.n_clusters_true]),
            Spread::PerCluster(v) if v.len() == self.n_clusters_true => Ok(v.clone()),
            Spread::PerCluster(v) => Err(Error::InvalidArgument(format!(
                "{} spreads for {} clusters",
                v.len(),
                self.n_clusters_true
            ))),
        }
    }

    pub fn task_label(&self, cluster: usize) -> String {
        self.task_labels
            .get(cluster)
            .cloned()
            .unwrap_or_else(|| format!("task_{cluster}"))
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// `count` random orthonormal vectors (Gram-Schmidt on Gaussian draws).
fn orthonormal_basis(rng: &mut ChaCha8Rng, dim: usize, count: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian_vec(rng, dim);
        // two passes keep the basis orthogonal to working precision
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        if dot(&v, &v).sqrt() > 1e-6 {
            normalize(&mut v);
            basis.push(v);
        }
    }
    basis
}

/// Planted unit centers with pairwise cosine `inter_cluster_sim`.
pub fn planted_centers(spec: &SynthSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "synth/centers"));
    let rho = spec.inter_cluster_sim;
    let c = spec.n_clusters_true;
    let basis = orthonormal_basis(&mut rng, spec.dim, c + usize::from(rho > 0.0));
    if rho == 0.0 {
        return Ok(basis);
    }
    let shared = &basis[c];
    let (a, b) = ((1.0 - rho).sqrt(), rho.sqrt());
    Ok(basis[..c]
        .iter()
        .map(|e| e.iter().zip(shared).map(|(x, g)| a * x + b * g).collect())
        .collect())
}

/// A point at angle `theta` from `center` in a random tangent direction.
fn perturb(rng: &mut ChaCha8Rng, center: &[f64], max_angle: f64) -> Vec<f64> {
    if max_angle == 0.0 {
        return center.to_vec();
    }
    let theta = (rng.sample::<f64, _>(StandardNormal).abs() * max_angle / 3.0).min(max_angle);
    let mut t = gaussian_vec(rng, center.len());
    let p = dot(&t, center);
    t.iter_mut().zip(center).for_each(|(x, c)| *x -= p * c);
    normalize(&mut t);
    let mut x: Vec<f64> = center
        .iter()
        .zip(&t)
        .map(|(c, t)| theta.cos() * c + theta.sin() * t)
        .collect();
    normalize(&mut x);
    x
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub features: FeatureMatrix,
    pub manifest: DatasetManifest,
    /// Planted cluster of every row.
    pub truth: Vec<usize>,
}

pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    let centers = planted_centers(spec)?;
    let spreads = spec.spreads()?;
    let clusters: Vec<Vec<Vec<f32>>> = centers
        .par_iter()
        .enumerate()
        .map(|(c, center)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_indexed_seed(spec.seed, "synth/cluster", c));
            let size = match spec.points_per_cluster {
                PointsPerCluster::Fixed(n) => n,
                PointsPerCluster::Range([lo, hi]) => rng.random_range(lo..=hi),
            };
            let max_angle = spreads[c].to_radians();
            (0..size)
                .map(|_| {
                    perturb(&mut rng, center, max_angle)
                        .into_iter()
                        .map(|v| v as f32)
                        .collect()
                })
                .collect()
        })
        .collect();
    let mut rows = Vec::new();
    let mut truth = Vec::new();
    let mut labels = Vec::new();
    for (c, points) in clusters.into_iter().enumerate() {
        let label = spec.task_label(c);
        for p in points {
            rows.push(p);
            truth.push(c);
            labels.push(label.clone());
        }
    }
    let features = FeatureMatrix::from_rows(&rows)?;
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        sample_ids: (0..rows.len()).map(|i| format!("synth-{i:06}")).collect(),
        task_labels: labels,
        layer_indices: vec![0],
        reference_model: "synthetic".into(),
        hidden_dim: spec.dim / 2,
        num_layers_tapped: 1,
    };
    manifest.validate(features.n_samples(), features.feature_dim())?;
    Ok(SynthDataset {
        features,
        manifest,
        truth,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub n_clusters_true: usize,
    pub assignment: Vec<usize>,
}

impl TruthFile {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec(self)?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let t: Self = serde_json::from_slice(&bytes)?;
        if let Some(bad) = t.assignment.iter().find(|&&a| a >= t.n_clusters_true) {
            return Err(Error::Schema(format!("planted cluster {bad} out of range")));
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub n_core: usize,
    pub per_task_counts: BTreeMap<String, usize>,
    pub per_planted_cluster_counts: Vec<usize>,
    /// Fraction of planted clusters with at least one selected sample.
    pub coverage: f64,
    /// Shannon entropy (bits) of the task distribution within the coreset.
    pub entropy: f64,
    /// Gini coefficient of the per-task counts (0 = even, (T-1)/T = one task).
    pub gini: f64,
}

pub fn shannon_entropy_bits(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / t;
            p * p.log2()
        })
        .sum::<f64>()
}

pub fn gini(counts: &[usize]) -> f64 {
    let n = counts.len();
    let total: usize = counts.iter().sum();
    if n == 0 || total == 0 {
        return 0.0;
    }
    let mut abs_diff = 0.0;
    for &a in counts {
        for &b in counts {
            abs_diff += (a as f64 - b as f64).abs();
        }
    }
    abs_diff / (2.0 * n as f64 * total as f64)
}

pub fn evaluate_selection(
    selection: &CoresetSelection,
    truth: &[usize],
    manifest: &DatasetManifest,
) -> Result<SelectionReport> {
    let n = manifest.n_samples();
    if truth.len() != n {
        return Err(Error::Invariant(format!(
            "truth has {} entries for {n} samples",
            truth.len()
        )));
    }
    let n_planted = truth.iter().max().map_or(0, |m| m + 1);
    let mut per_task: BTreeMap<String, usize> = (0..n).map(|i| (manifest.task_label(i).to_string(), 0)).collect();
    let mut per_planted = vec![0usize; n_planted];
    for &g in &selection.merged {
        if g >= n {
            return Err(Error::InvalidArgument(format!(
                "selected sample {g} is not in the manifest"
            )));
        }
        *per_task.get_mut(manifest.task_label(g)).unwrap() += 1;
        per_planted[truth[g]] += 1;
    }
    let counts: Vec<usize> = per_task.values().copied().collect();
    let covered = per_planted.iter().filter(|&&c| c > 0).count();
    Ok(SelectionReport {
        n_core: selection.merged.len(),
        coverage: if n_planted == 0 {
            0.0
        } else {
            covered as f64 / n_planted as f64
        },
        entropy: shannon_entropy_bits(&counts),
        gini: gini(&counts),
        per_task_counts: per_task,
        per_planted_cluster_counts: per_planted,
    })
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} labels", a.len(), b.len())));
    }
    let n = a.len();
    let choose2 = |x: usize| (x * x.saturating_sub(1)) as f64 / 2.0;
    let mut table: HashMap<(usize, usize), usize> = HashMap::new();
    let mut rows: HashMap<usize, usize> = HashMap::new();
    let mut cols: HashMap<usize, usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sum_rows: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_cols: f64 = cols.values().map(|&c| choose2(c)).sum();
    let total = choose2(n);
    let expected = if total == 0.0 { 0.0 } else { sum_rows * sum_cols / total };
    let max_index = (sum_rows + sum_cols) / 2.0;
    if max_index == expected {
        // both partitions trivial in the same way
        return Ok(1.0);
    }
    Ok((index - expected) / (max_index - expected))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64, spread: f64) -> SynthSpec {
        SynthSpec {
            n_clusters_true: 3,
            points_per_cluster: PointsPerCluster::Fixed(40),
            dim: 8,
            angular_spread_deg: Spread::Uniform(spread),
            inter_cluster_sim: 0.0,
            task_labels: vec![],
            seed,
        }
    }

    #[test]
    fn tight_spread_gives_high_within_cluster_cosine() {
        let ds = generate(&spec(1, 1.0)).unwrap();
        ds.features.check_norms(1e-6).unwrap();
        for i in 0..ds.truth.len() {
            for j in 0..ds.truth.len() {
                if ds.truth[i] == ds.truth[j] {
                    let c = crate::numeric::cosine(ds.features.row(i), ds.features.row(j));
                    assert!(c >= 0.99, "{c}");
                }
            }
        }
    }

    #[test]
    fn zero_spread_points_equal_centers() {
        let s = spec(4, 0.0);
        let ds = generate(&s).unwrap();
        let centers = planted_centers(&s).unwrap();
        for (i, &c) in ds.truth.iter().enumerate() {
            let expect: Vec<f32> = centers[c].iter().map(|&v| v as f32).collect();
            assert_eq!(ds.features.row(i), expect.as_slice());
        }
    }

    #[test]
    fn seeds_change_output() {
        let a = generate(&spec(1, 3.0)).unwrap();
        let b = generate(&spec(2, 3.0)).unwrap();
        assert_ne!(a.features, b.features);
        assert_eq!(a, generate(&spec(1, 3.0)).unwrap());
    }

    #[test]
    fn planted_similarity() {
        let mut s = spec(0, 1.0);
        s.inter_cluster_sim = 0.3;
        let c = planted_centers(&s).unwrap();
        for i in 0..3 {
            assert!((dot(&c[i], &c[i]) - 1.0).abs() < 1e-12);
            for j in (i + 1)..3 {
                assert!((dot(&c[i], &c[j]) - 0.3).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn infeasible_specs() {
        let mut s = spec(0, 1.0);
        s.dim = 2;
        assert!(generate(&s).is_err());
        let mut s = spec(0, 1.0);
        s.dim = 7;
        assert!(generate(&s).is_err());
        let mut s = spec(0, 1.0);
        s.task_labels = vec!["a".into()];
        assert!(generate(&s).is_err());
    }

    #[test]
    fn spec_json_forms() {
        let text =
            r#"{"n_clusters_true":2,"points_per_cluster":[3,5],"dim":4,"angular_spread_deg":[1.0,2.0],"seed":9}"#;
        let s: SynthSpec = serde_json::from_str(text).unwrap();
        let ds = generate(&s).unwrap();
        assert!((6..=10).contains(&ds.features.n_samples()));
    }

    #[test]
    fn entropy_and_gini() {
        assert!((shannon_entropy_bits(&[6, 3, 1]) - 1.295_461_844_238_322).abs() < 1e-12);
        assert!((shannon_entropy_bits(&[5, 5, 5, 5]) - 2.0).abs() < 1e-15);
        assert_eq!(shannon_entropy_bits(&[0, 9, 0]), 0.0);
        assert_eq!(gini(&[4, 4, 4]), 0.0);
        assert!((gini(&[0, 9, 0]) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ari_values() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[5, 5, 2, 2]).unwrap(), 1.0);
        // sklearn: adjusted_rand_score([0,0,1,1],[0,1,0,1]) == -0.5
        assert!((adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap() + 0.5).abs() < 1e-12);
        assert_eq!(adjusted_rand_index(&[0, 0, 0], &[1, 1, 1]).unwrap(), 1.0);
    }

    #[test]
    fn evaluate_known_counts() {
        let manifest = DatasetManifest {
            version: 1,
            sample_ids: (0..12).map(|i| i.to_string()).collect(),
            task_labels: (0..12)
                .map(|i| ["a", "b", "c"][usize::from(i >= 6) + usize::from(i >= 10)].to_string())
                .collect(),
            layer_indices: vec![0],
            reference_model: String::new(),
            hidden_dim: 1,
            num_layers_tapped: 1,
        };
        let truth: Vec<usize> = (0..12).map(|i| usize::from(i >= 6) + usize::from(i >= 10)).collect();
        let sel = CoresetSelection {
            per_cluster: BTreeMap::new(),
            merged: vec![0, 1, 2, 3, 4, 5, 6, 7, 8, 10],
            strategy: crate::sampling::Strategy::Random,
            seed: 0,
        };
        let r = evaluate_selection(&sel, &truth, &manifest).unwrap();
        assert_eq!(r.per_task_counts["a"], 6);
        assert_eq!(r.per_task_counts["b"], 3);
        assert_eq!(r.per_task_counts["c"], 1);
        assert_eq!(r.coverage, 1.0);
        assert!((r.entropy - 1.2955).abs() < 1e-4);

        let bad = CoresetSelection {
            merged: vec![99],
            ..sel
        };
        assert!(evaluate_selection(&bad, &truth, &manifest).is_err());
    }
}
