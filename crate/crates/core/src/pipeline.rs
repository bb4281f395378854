//! Stage runners shared by the CLI and the tests.
//!
//! Every stage reads its inputs from disk, writes one artifact plus a JSON
//! run report (config echo, wall time, SHA-256 of inputs and outputs), and
//! derives its random stream from the single top-level seed. That makes a
//! full `run` byte-identical to calling the stages one after another.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cluster::{self, ClusterModel, InitMethod, KMeansConfig};
use crate::error::{Error, Result};
use crate::feature_store::{
    feature_path, manifest_path, read_features_with, with_suffix, write_atomic, DatasetManifest, FeatureMatrix,
    ReadOptions,
};
use crate::numeric::{derive_seed, sha256_hex, GaussianKernel};
use crate::sampling::{select_coreset, CoresetFile, MmdOptions, SelectConfig, Strategy};
use crate::scoring::{self, ClusterScores, DensityOptions, ScoreConfig, TransferLossTable};
use crate::synth::{self, SynthSpec, TruthFile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub k: Option<usize>,
    pub tau: f64,
    pub sampling_ratio: Option<f64>,
    pub n_core: Option<usize>,
    pub strategy: Strategy,
    pub seed: u64,
    /// `None` computes densities exactly.
    pub density_cap: Option<usize>,
    pub kernel_bandwidth: f64,
    pub include_self_in_targets: bool,
    pub mmd_self_pairs: bool,
    pub max_iterations: usize,
    pub tolerance: Option<f64>,
    pub init: InitMethod,
    pub skip_norm_check: bool,
    pub features: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: None,
            tau: scoring::DEFAULT_TAU,
            sampling_ratio: None,
            n_core: None,
            strategy: Strategy::MmdGreedy,
            seed: 0,
            density_cap: Some(scoring::DEFAULT_DENSITY_CAP),
            kernel_bandwidth: 1.0,
            include_self_in_targets: false,
            mmd_self_pairs: true,
            max_iterations: 100,
            tolerance: None,
            init: InitMethod::KMeansPlusPlus,
            skip_norm_check: false,
            features: None,
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoresetSize {
    pub n_samples: usize,
    pub n_core: usize,
    pub sampling_ratio: Option<f64>,
    pub rounding: &'static str,
}

impl PipelineConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.kernel_bandwidth > 0.0 && self.kernel_bandwidth.is_finite()) {
            return Err(Error::InvalidArgument("kernel bandwidth must be positive".into()));
        }
        if let Some(cap) = self.density_cap {
            if cap < 2 {
                return Err(Error::InvalidArgument("density cap must be at least 2".into()));
            }
        }
        Ok(())
    }

    /// Exactly one of `sampling_ratio` / `n_core` must be set.
    /// A ratio maps to `round(ratio * N)`, halves rounding away from zero.
    pub fn coreset_size(&self, n_samples: usize) -> Result<CoresetSize> {
        match (self.sampling_ratio, self.n_core) {
            (Some(_), Some(_)) => Err(Error::InvalidArgument(
                "give either a sampling ratio or N_core, not both".into(),
            )),
            (None, None) => Err(Error::InvalidArgument("a sampling ratio or N_core is required".into())),
            (Some(r), None) => {
                if !(r > 0.0 && r <= 1.0) {
                    return Err(Error::InvalidArgument(format!("sampling ratio {r} not in (0, 1]")));
                }
                Ok(CoresetSize {
                    n_samples,
                    n_core: (r * n_samples as f64).round() as usize,
                    sampling_ratio: Some(r),
                    rounding: "round(ratio * N), half away from zero",
                })
            }
            (None, Some(n_core)) => {
                if n_core > n_samples {
                    return Err(Error::Infeasible(format!(
                        "N_core {n_core} exceeds the dataset size {n_samples}"
                    )));
                }
                Ok(CoresetSize {
                    n_samples,
                    n_core,
                    sampling_ratio: None,
                    rounding: "explicit N_core",
                })
            }
        }
    }

    pub fn kmeans(&self) -> Result<KMeansConfig> {
        let k = self.k.ok_or_else(|| Error::InvalidArgument("k is required".into()))?;
        Ok(KMeansConfig {
            k,
            max_iterations: self.max_iterations,
            tolerance: self.tolerance,
            seed: derive_seed(self.seed, "cluster"),
            init: self.init,
        })
    }

    pub fn score(&self) -> ScoreConfig {
        ScoreConfig {
            tau: self.tau,
            density: DensityOptions {
                cap: self.density_cap.unwrap_or(usize::MAX),
                kernel: GaussianKernel {
                    bandwidth: self.kernel_bandwidth,
                },
            },
            include_self_in_targets: self.include_self_in_targets,
            seed: self.seed,
        }
    }

    pub fn select(&self) -> SelectConfig {
        SelectConfig {
            strategy: self.strategy,
            mmd: MmdOptions {
                kernel: GaussianKernel {
                    bandwidth: self.kernel_bandwidth,
                },
                self_pairs: self.mmd_self_pairs,
            },
            seed: self.seed,
        }
    }

    fn read_options(&self) -> ReadOptions {
        ReadOptions {
            skip_norm_check: self.skip_norm_check,
        }
    }
}

pub fn clusters_path(out: &Path) -> PathBuf {
    with_suffix(out, ".clusters")
}

pub fn scores_path(out: &Path) -> PathBuf {
    with_suffix(out, ".scores.json")
}

pub fn coreset_path(out: &Path) -> PathBuf {
    with_suffix(out, ".coreset.json")
}

pub fn truth_path(out: &Path) -> PathBuf {
    with_suffix(out, ".truth.json")
}

pub fn report_path(out: &Path, stage: &str) -> PathBuf {
    with_suffix(out, &format!(".{stage}.report.json"))
}

/// Error annotated with the stage that raised it.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub error: Error,
}

impl StageError {
    pub fn to_json(&self) -> Value {
        json!({
            "error": {
                "stage": self.stage,
                "kind": self.error.kind(),
                "message": self.error.to_string(),
                "hint": self.error.hint(),
            }
        })
    }
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} stage failed: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {}

pub trait StageContext<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, StageError>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, StageError> {
        self.map_err(|error| StageError { stage, error })
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RunReport {
    pub stages: Vec<String>,
    pub config: Value,
    pub wall_time_ms: BTreeMap<String, f64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub details: BTreeMap<String, Value>,
}

impl RunReport {
    fn new(config: &PipelineConfig) -> Self {
        Self {
            config: serde_json::to_value(config).unwrap_or(Value::Null),
            ..Default::default()
        }
    }

    fn hash_into(map: &mut BTreeMap<String, String>, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        map.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        Self::hash_into(&mut self.inputs, path)
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        Self::hash_into(&mut self.outputs, path)
    }

    fn timed<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f()?;
        self.wall_time_ms
            .insert(stage.to_string(), start.elapsed().as_secs_f64() * 1e3);
        self.stages.push(stage.to_string());
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }
}

fn load_features(
    prefix: &Path,
    cfg: &PipelineConfig,
    report: &mut RunReport,
) -> Result<(FeatureMatrix, DatasetManifest)> {
    let pair = read_features_with(prefix, cfg.read_options())?;
    report.input(&feature_path(prefix))?;
    report.input(&manifest_path(prefix))?;
    Ok(pair)
}

fn cluster_details(model: &ClusterModel) -> Value {
    json!({
        "k": model.k,
        "iterations_run": model.iterations_run,
        "objective": model.objective,
        "objective_history": model.objective_history,
        "cluster_sizes": model.cluster_sizes(),
    })
}

pub fn stage_cluster(
    features: &FeatureMatrix,
    cfg: &PipelineConfig,
    out: &Path,
    report: &mut RunReport,
) -> Result<ClusterModel> {
    let kcfg = cfg.kmeans()?;
    let model = report.timed("cluster", || cluster::fit(features, &kcfg))?;
    let path = clusters_path(out);
    cluster::write_clusters(&model, &path)?;
    report.output(&path)?;
    report.details.insert("cluster".into(), cluster_details(&model));
    Ok(model)
}

pub fn stage_score(
    features: &FeatureMatrix,
    model: &ClusterModel,
    cfg: &PipelineConfig,
    losses: Option<&TransferLossTable>,
    out: &Path,
    report: &mut RunReport,
) -> Result<ClusterScores> {
    let size = cfg.coreset_size(features.n_samples())?;
    let scfg = cfg.score();
    let mut scores = report.timed("score", || scoring::score_clusters(features, model, &scfg, size.n_core))?;
    if let Some(table) = losses {
        scores.transfer_analysis = Some(scoring::analyze_transfer(model, table)?);
    }
    let path = scores_path(out);
    scores.write(&path)?;
    report.output(&path)?;
    report
        .details
        .insert("coreset_size".into(), serde_json::to_value(&size)?);
    Ok(scores)
}

pub fn stage_select(
    features: &FeatureMatrix,
    manifest: &DatasetManifest,
    model: &ClusterModel,
    scores: &ClusterScores,
    cfg: &PipelineConfig,
    out: &Path,
    report: &mut RunReport,
) -> Result<CoresetFile> {
    let scfg = cfg.select();
    let selection = report.timed("select", || select_coreset(features, model, scores, &scfg))?;
    let file = CoresetFile::build(&selection, scores, manifest)?;
    let path = coreset_path(out);
    file.write(&path)?;
    report.output(&path)?;
    Ok(file)
}

pub fn cmd_cluster(cfg: &PipelineConfig) -> std::result::Result<RunReport, StageError> {
    let (input, out) = paths(cfg).stage("cluster")?;
    cfg.validate().stage("cluster")?;
    let mut report = RunReport::new(cfg);
    let (features, _) = load_features(&input, cfg, &mut report).stage("cluster")?;
    stage_cluster(&features, cfg, &out, &mut report).stage("cluster")?;
    report.write(&report_path(&out, "cluster")).stage("cluster")?;
    Ok(report)
}

pub struct LossTablePaths {
    pub joint: PathBuf,
    pub solo: PathBuf,
}

pub fn cmd_score(
    cfg: &PipelineConfig,
    clusters: &Path,
    losses: Option<&LossTablePaths>,
) -> std::result::Result<RunReport, StageError> {
    let (input, out) = paths(cfg).stage("score")?;
    cfg.validate().stage("score")?;
    let mut report = RunReport::new(cfg);
    let (features, _) = load_features(&input, cfg, &mut report).stage("score")?;
    let model = cluster::read_clusters(clusters, &features).stage("score")?;
    report.input(clusters).stage("score")?;
    let table = match losses {
        Some(p) => {
            report.input(&p.joint).stage("score")?;
            report.input(&p.solo).stage("score")?;
            Some(TransferLossTable::from_csv_files(&p.joint, &p.solo).stage("score")?)
        }
        None => None,
    };
    stage_score(&features, &model, cfg, table.as_ref(), &out, &mut report).stage("score")?;
    report.write(&report_path(&out, "score")).stage("score")?;
    Ok(report)
}

/// Selects with the budgets stored in `scores`, or re-derives them when the
/// config carries a ratio or N_core.
pub fn cmd_select(cfg: &PipelineConfig, clusters: &Path, scores: &Path) -> std::result::Result<RunReport, StageError> {
    let (input, out) = paths(cfg).stage("select")?;
    cfg.validate().stage("select")?;
    let mut report = RunReport::new(cfg);
    let (features, manifest) = load_features(&input, cfg, &mut report).stage("select")?;
    let model = cluster::read_clusters(clusters, &features).stage("select")?;
    report.input(clusters).stage("select")?;
    let mut stored = ClusterScores::read(scores).stage("select")?;
    report.input(scores).stage("select")?;
    if stored.cluster_sizes != model.cluster_sizes() {
        return Err(Error::Invariant(
            "scores were computed for a different clustering".into(),
        ))
        .stage("select");
    }
    if cfg.sampling_ratio.is_some() || cfg.n_core.is_some() {
        let size = cfg.coreset_size(features.n_samples()).stage("select")?;
        stored = stored.with_n_core(size.n_core).stage("select")?;
        report.details.insert(
            "coreset_size".into(),
            serde_json::to_value(&size).unwrap_or(Value::Null),
        );
    }
    // the MMD kernel matches the one used for density
    let cfg = PipelineConfig {
        kernel_bandwidth: stored.kernel_bandwidth,
        ..cfg.clone()
    };
    stage_select(&features, &manifest, &model, &stored, &cfg, &out, &mut report).stage("select")?;
    report.write(&report_path(&out, "select")).stage("select")?;
    Ok(report)
}

/// Cluster, score and select in one go.
pub fn cmd_run(cfg: &PipelineConfig) -> std::result::Result<RunReport, StageError> {
    let (input, out) = paths(cfg).stage("run")?;
    cfg.validate().stage("run")?;
    let mut report = RunReport::new(cfg);
    let (features, manifest) = load_features(&input, cfg, &mut report).stage("load")?;
    let model = stage_cluster(&features, cfg, &out, &mut report).stage("cluster")?;
    let scores = stage_score(&features, &model, cfg, None, &out, &mut report).stage("score")?;
    stage_select(&features, &manifest, &model, &scores, cfg, &out, &mut report).stage("select")?;
    report.write(&report_path(&out, "run")).stage("run")?;
    Ok(report)
}

pub fn cmd_synth(spec_path: &Path, out: &Path) -> std::result::Result<RunReport, StageError> {
    let bytes = fs::read(spec_path)
        .map_err(|e| Error::io(spec_path, e))
        .stage("synth")?;
    let spec: SynthSpec = serde_json::from_slice(&bytes).map_err(Error::from).stage("synth")?;
    let mut report = RunReport {
        config: serde_json::to_value(&spec).unwrap_or(Value::Null),
        ..Default::default()
    };
    report.input(spec_path).stage("synth")?;
    write_synth(&spec, out, &mut report).stage("synth")?;
    report.write(&report_path(out, "synth")).stage("synth")?;
    Ok(report)
}

pub fn write_synth(spec: &SynthSpec, out: &Path, report: &mut RunReport) -> Result<()> {
    let ds = report.timed("synth", || synth::generate(spec))?;
    crate::feature_store::write_features(&ds.features, &ds.manifest, out)?;
    TruthFile {
        n_clusters_true: spec.n_clusters_true,
        assignment: ds.truth,
    }
    .write(&truth_path(out))?;
    for p in [feature_path(out), manifest_path(out), truth_path(out)] {
        report.output(&p)?;
    }
    Ok(())
}

/// Evaluates a coreset file against planted truth; returns the report JSON.
pub fn cmd_report(
    coreset: &Path,
    truth: &Path,
    features_prefix: &Path,
    out: Option<&Path>,
) -> std::result::Result<synth::SelectionReport, StageError> {
    let file = CoresetFile::read(coreset).stage("report")?;
    let truth = TruthFile::read(truth).stage("report")?;
    let mpath = manifest_path(features_prefix);
    let bytes = fs::read(&mpath).map_err(|e| Error::io(&mpath, e)).stage("report")?;
    let manifest: DatasetManifest = serde_json::from_slice(&bytes).map_err(Error::from).stage("report")?;
    let report = synth::evaluate_selection(&file.to_selection(), &truth.assignment, &manifest).stage("report")?;
    if let Some(path) = out {
        let mut bytes = serde_json::to_vec_pretty(&report)
            .map_err(Error::from)
            .stage("report")?;
        bytes.push(b'\n');
        write_atomic(path, &bytes).stage("report")?;
    }
    Ok(report)
}

fn paths(cfg: &PipelineConfig) -> Result<(PathBuf, PathBuf)> {
    let input = cfg
        .features
        .clone()
        .ok_or_else(|| Error::InvalidArgument("--features is required".into()))?;
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| Error::InvalidArgument("--out is required".into()))?;
    Ok((input, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coreset_size_rules() {
        let mut cfg = PipelineConfig {
            sampling_ratio: Some(0.2),
            ..Default::default()
        };
        assert_eq!(cfg.coreset_size(2000).unwrap().n_core, 400);
        assert_eq!(cfg.coreset_size(7).unwrap().n_core, 1);
        cfg.sampling_ratio = Some(0.25);
        assert_eq!(cfg.coreset_size(10).unwrap().n_core, 3);
        cfg.n_core = Some(5);
        assert!(cfg.coreset_size(10).is_err());
        cfg.sampling_ratio = None;
        assert_eq!(cfg.coreset_size(10).unwrap().n_core, 5);
        assert!(matches!(cfg.coreset_size(4), Err(Error::Infeasible(_))));
        cfg.n_core = None;
        assert!(cfg.coreset_size(10).is_err());
        cfg.sampling_ratio = Some(1.5);
        assert!(cfg.coreset_size(10).is_err());
    }

    #[test]
    fn config_json_defaults() {
        let cfg: PipelineConfig = serde_json::from_str(r#"{"k": 12, "sampling_ratio": 0.1}"#).unwrap();
        assert_eq!(cfg.k, Some(12));
        assert_eq!(cfg.tau, 0.1);
        assert_eq!(cfg.density_cap, Some(512));
        assert!(cfg.mmd_self_pairs);
        assert!(!cfg.include_self_in_targets);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"kk": 1}"#).is_err());
    }

    #[test]
    fn stage_error_json_shape() {
        let e = StageError {
            stage: "score",
            error: Error::EmptyTargets,
        };
        let v = e.to_json();
        assert_eq!(v["error"]["stage"], "score");
        assert_eq!(v["error"]["kind"], "empty_targets");
        assert!(v["error"]["hint"].is_string());
    }
}
