use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use coincide::cluster::InitMethod;
use coincide::feature_store::write_features;
use coincide::features::ActivationFixture;
use coincide::pipeline::{self, LossTablePaths, PipelineConfig, StageContext, StageError};
use coincide::sampling::Strategy;
use coincide::Error;

#[derive(Parser)]
#[command(
    name = "coincide",
    version,
    about = "Cluster-based coreset selection over activation features"
)]
struct Cli {
    /// Worker threads (default: COINCIDE_THREADS, then all cores). Never changes outputs.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// JSON pipeline config; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Spherical k-means over a feature file; writes <out>.clusters.
    Cluster {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        kmeans: KMeansArgs,
    },
    /// Cluster scores and budgets; writes <out>.scores.json.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        clusters: PathBuf,
        #[command(flatten)]
        size: SizeArgs,
        #[command(flatten)]
        scoring: ScoringArgs,
        /// CSV of `source,target,loss_joint` for measured transferability.
        #[arg(long, requires = "solo")]
        losses: Option<PathBuf>,
        /// CSV of `target,loss_solo`.
        #[arg(long, requires = "losses")]
        solo: Option<PathBuf>,
    },
    /// Intra-cluster selection; writes <out>.coreset.json.
    ///
    /// nearest-centroid tends to do better than mmd-greedy at sampling
    /// ratios of 10% or less; mmd-greedy is the default.
    Select {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        clusters: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        /// Override the coreset size stored in the scores file.
        #[command(flatten)]
        size: SizeArgs,
        #[command(flatten)]
        select: SelectArgs,
    },
    /// cluster + score + select.
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        kmeans: KMeansArgs,
        #[command(flatten)]
        size: SizeArgs,
        #[command(flatten)]
        scoring: ScoringArgs,
        #[command(flatten)]
        select: SelectArgs,
    },
    /// Generate a synthetic dataset with planted clusters.
    Synth {
        /// SynthSpec JSON.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a coreset against planted truth.
    Report {
        #[arg(long)]
        coreset: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Feature prefix whose manifest supplies task labels.
        #[arg(long)]
        features: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate a JSON token-activation fixture into a feature file.
    ExtractFixture {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// Feature prefix (reads <prefix>.feat and <prefix>.manifest.json).
    #[arg(long)]
    features: Option<PathBuf>,
    /// Output prefix.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Top-level seed; each stage derives its own stream from it.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    skip_norm_check: bool,
}

#[derive(Args)]
struct KMeansArgs {
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Absolute objective-improvement threshold (default 1e-6 * N).
    #[arg(long)]
    tol: Option<f64>,
    /// kmeans++ or random-rows.
    #[arg(long)]
    init: Option<InitMethod>,
}

#[derive(Args)]
struct SizeArgs {
    /// Coreset size as a fraction of the dataset, rounded to the nearest integer.
    #[arg(long, conflicts_with = "n_core")]
    ratio: Option<f64>,
    #[arg(long)]
    n_core: Option<usize>,
}

#[derive(Args)]
struct ScoringArgs {
    #[arg(long)]
    tau: Option<f64>,
    /// Max cluster members used for density; `exact` disables subsampling.
    #[arg(long)]
    density_cap: Option<String>,
    #[arg(long)]
    bandwidth: Option<f64>,
    /// Count each cluster among its own transfer targets.
    #[arg(long)]
    include_self_in_targets: bool,
}

#[derive(Args)]
struct SelectArgs {
    /// mmd-greedy, nearest-centroid or random.
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Exclude p == q terms from the within-set MMD averages.
    #[arg(long)]
    no_mmd_self_pairs: bool,
}

fn apply_common(cfg: &mut PipelineConfig, c: Common) {
    if c.features.is_some() {
        cfg.features = c.features;
    }
    if c.out.is_some() {
        cfg.out = c.out;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.skip_norm_check |= c.skip_norm_check;
}

fn apply_kmeans(cfg: &mut PipelineConfig, k: KMeansArgs) {
    cfg.k = k.k.or(cfg.k);
    cfg.max_iterations = k.max_iter.unwrap_or(cfg.max_iterations);
    cfg.tolerance = k.tol.or(cfg.tolerance);
    cfg.init = k.init.unwrap_or(cfg.init);
}

fn apply_size(cfg: &mut PipelineConfig, s: SizeArgs) {
    if s.ratio.is_some() || s.n_core.is_some() {
        cfg.sampling_ratio = s.ratio;
        cfg.n_core = s.n_core;
    }
}

fn apply_scoring(cfg: &mut PipelineConfig, s: ScoringArgs) -> Result<(), Error> {
    cfg.tau = s.tau.unwrap_or(cfg.tau);
    if let Some(cap) = s.density_cap {
        cfg.density_cap = if cap == "exact" {
            None
        } else {
            Some(
                cap.parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad density cap {cap:?}")))?,
            )
        };
    }
    cfg.kernel_bandwidth = s.bandwidth.unwrap_or(cfg.kernel_bandwidth);
    cfg.include_self_in_targets |= s.include_self_in_targets;
    Ok(())
}

fn apply_select(cfg: &mut PipelineConfig, s: SelectArgs) {
    cfg.strategy = s.strategy.unwrap_or(cfg.strategy);
    if s.no_mmd_self_pairs {
        cfg.mmd_self_pairs = false;
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, Error> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var("COINCIDE_THREADS") {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::InvalidArgument(format!("COINCIDE_THREADS={v:?} is not a number"))),
        _ => Ok(None),
    }
}

fn run(cli: Cli) -> Result<serde_json::Value, StageError> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::from_json_file(path).stage("config")?,
        None => PipelineConfig::default(),
    };
    let report = match cli.command {
        Command::Cluster { common, kmeans } => {
            apply_common(&mut cfg, common);
            apply_kmeans(&mut cfg, kmeans);
            serde_json::to_value(pipeline::cmd_cluster(&cfg)?)
        }
        Command::Score {
            common,
            clusters,
            size,
            scoring,
            losses,
            solo,
        } => {
            apply_common(&mut cfg, common);
            apply_size(&mut cfg, size);
            apply_scoring(&mut cfg, scoring).stage("config")?;
            let tables = losses.zip(solo).map(|(joint, solo)| LossTablePaths { joint, solo });
            serde_json::to_value(pipeline::cmd_score(&cfg, &clusters, tables.as_ref())?)
        }
        Command::Select {
            common,
            clusters,
            scores,
            size,
            select,
        } => {
            apply_common(&mut cfg, common);
            // only an explicit flag overrides the stored budgets
            cfg.sampling_ratio = None;
            cfg.n_core = None;
            apply_size(&mut cfg, size);
            apply_select(&mut cfg, select);
            serde_json::to_value(pipeline::cmd_select(&cfg, &clusters, &scores)?)
        }
        Command::Run {
            common,
            kmeans,
            size,
            scoring,
            select,
        } => {
            apply_common(&mut cfg, common);
            apply_kmeans(&mut cfg, kmeans);
            apply_size(&mut cfg, size);
            apply_scoring(&mut cfg, scoring).stage("config")?;
            apply_select(&mut cfg, select);
            serde_json::to_value(pipeline::cmd_run(&cfg)?)
        }
        Command::Synth { spec, out } => serde_json::to_value(pipeline::cmd_synth(&spec, &out)?),
        Command::Report {
            coreset,
            truth,
            features,
            out,
        } => serde_json::to_value(pipeline::cmd_report(&coreset, &truth, &features, out.as_deref())?),
        Command::ExtractFixture { input, out } => {
            let fixture = ActivationFixture::read(&input).stage("extract")?;
            let (matrix, manifest) = fixture.to_features().stage("extract")?;
            write_features(&matrix, &manifest, &out).stage("extract")?;
            Ok(json!({
                "n_samples": matrix.n_samples(),
                "feature_dim": matrix.feature_dim(),
                "out": out,
            }))
        }
    };
    report.map_err(Error::from).stage("output")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = match thread_count(cli.threads) {
        Ok(t) => t,
        Err(error) => return fail(StageError { stage: "config", error }),
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            return fail(StageError {
                stage: "config",
                error: Error::InvalidArgument(e.to_string()),
            })
        }
    };
    match pool.install(|| run(cli)) {
        Ok(report) => {
            println!("{}", serde_json::to_string_pretty(&report).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}

fn fail(e: StageError) -> ExitCode {
    eprintln!("{}", e.to_json());
    ExitCode::FAILURE
}
