use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

use coincide::feature_store::{read_features, FeatureMatrix};
use coincide::features::ActivationFixture;
use coincide::numeric::sha256_hex;
use coincide::pipeline::{
    clusters_path, cmd_cluster, cmd_run, cmd_score, cmd_select, coreset_path, report_path, scores_path, truth_path,
    PipelineConfig,
};
use coincide::sampling::CoresetFile;
use coincide::scoring::ClusterScores;
use coincide::synth::{evaluate_selection, SelectionReport, TruthFile};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn ortho3() -> PathBuf {
    fixtures().join("ortho3")
}

fn coincide(args: &[&str], paths: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_coincide"));
    cmd.args(args);
    for (flag, p) in paths {
        cmd.arg(flag).arg(p);
    }
    cmd.output().expect("spawn coincide")
}

fn ok(out: Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn error_json(out: Output) -> Value {
    assert!(!out.status.success());
    serde_json::from_slice(&out.stderr).expect("stderr is JSON")
}

fn config(out: &Path) -> PipelineConfig {
    PipelineConfig {
        k: Some(3),
        sampling_ratio: Some(0.2),
        seed: 7,
        features: Some(ortho3()),
        out: Some(out.to_path_buf()),
        ..Default::default()
    }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn run_equals_the_manual_stage_chain() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let report = cmd_run(&config(&a)).unwrap();

    let cfg_b = config(&b);
    cmd_cluster(&cfg_b).unwrap();
    cmd_score(&cfg_b, &clusters_path(&b), None).unwrap();
    let select_cfg = PipelineConfig {
        sampling_ratio: None,
        ..cfg_b
    };
    cmd_select(&select_cfg, &clusters_path(&b), &scores_path(&b)).unwrap();

    for path in [clusters_path, scores_path, coreset_path] {
        assert_eq!(read(&path(&a)), read(&path(&b)), "{}", path(&a).display());
        let key = path(&a).display().to_string();
        assert_eq!(report.outputs[&key], sha256_hex(&read(&path(&a))));
    }
    let written: Value = serde_json::from_slice(&read(&report_path(&a, "run"))).unwrap();
    assert_eq!(written["config"]["k"], 3);
    assert_eq!(written["config"]["tau"], 0.1);
    assert_eq!(written["config"]["mmd_self_pairs"], true);
    assert_eq!(written["details"]["coreset_size"]["n_core"], 60);
    for stage in ["cluster", "score", "select"] {
        assert!(written["wall_time_ms"][stage].is_number(), "{stage}");
    }
}

#[test]
fn repeated_runs_and_thread_counts_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut first: Option<Vec<u8>> = None;
    for (i, threads) in ["1", "3", "8"].iter().enumerate() {
        let out = dir.path().join(format!("r{i}"));
        ok(coincide(
            &["--threads", threads, "run", "--k", "3", "--ratio", "0.2", "--seed", "7"],
            &[("--features", &ortho3()), ("--out", &out)],
        ));
        let bytes = read(&coreset_path(&out));
        match &first {
            None => first = Some(bytes),
            Some(f) => assert_eq!(f, &bytes),
        }
    }
    let out = dir.path().join("env");
    let status = Command::new(env!("CARGO_BIN_EXE_coincide"))
        .env("COINCIDE_THREADS", "2")
        .args(["run", "--k", "3", "--ratio", "0.2", "--seed", "7", "--features"])
        .arg(ortho3())
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(status.status.success());
    assert_eq!(first.unwrap(), read(&coreset_path(&out)));
}

#[test]
fn select_with_ratio_one_returns_the_full_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    cmd_run(&config(&out)).unwrap();
    let full = dir.path().join("full");
    for strategy in ["mmd-greedy", "nearest-centroid", "random"] {
        ok(coincide(
            &["select", "--ratio", "1.0", "--strategy", strategy],
            &[
                ("--features", &ortho3()),
                ("--clusters", &clusters_path(&out)),
                ("--scores", &scores_path(&out)),
                ("--out", &full),
            ],
        ));
        let file = CoresetFile::read(&coreset_path(&full)).unwrap();
        assert_eq!(file.merged, (0..300).collect::<Vec<_>>(), "{strategy}");
    }
}

#[test]
fn report_matches_evaluate_selection() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    cmd_run(&config(&out)).unwrap();
    let report_file = dir.path().join("report.json");
    let printed = ok(coincide(
        &["report"],
        &[
            ("--coreset", &coreset_path(&out)),
            ("--truth", &fixtures().join("ortho3.truth.json")),
            ("--features", &ortho3()),
            ("--out", &report_file),
        ],
    ));
    let (_, manifest) = read_features(&ortho3()).unwrap();
    let truth = TruthFile::read(&truth_path(&ortho3())).unwrap();
    let file = CoresetFile::read(&coreset_path(&out)).unwrap();
    let expected = evaluate_selection(&file.to_selection(), &truth.assignment, &manifest).unwrap();
    let printed: SelectionReport = serde_json::from_value(printed).unwrap();
    let written: SelectionReport = serde_json::from_slice(&read(&report_file)).unwrap();
    assert_eq!(printed, expected);
    assert_eq!(written, expected);
    assert_eq!(expected.coverage, 1.0);
    assert_eq!(expected.per_task_counts.len(), 3);
}

#[test]
fn coreset_provenance_matches_scores_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(
        &spec,
        r#"{"n_clusters_true": 5, "points_per_cluster": [20, 60], "dim": 12,
            "angular_spread_deg": [2, 4, 6, 8, 10], "inter_cluster_sim": 0.2, "seed": 4}"#,
    )
    .unwrap();
    let data = dir.path().join("five");
    ok(coincide(&["synth"], &[("--spec", &spec), ("--out", &data)]));
    let out = dir.path().join("run");
    ok(coincide(
        &["run", "--k", "5", "--n-core", "37", "--seed", "1"],
        &[("--features", &data), ("--out", &out)],
    ));

    let (x, manifest) = read_features(&data).unwrap();
    let model = coincide::cluster::read_clusters(&clusters_path(&out), &x).unwrap();
    let scores = ClusterScores::read(&scores_path(&out)).unwrap();
    let file = CoresetFile::read(&coreset_path(&out)).unwrap();
    assert_eq!(file.n_core, 37);
    assert_eq!(scores.n_core, 37);
    assert_eq!(file.clusters.len(), 5);
    let mut all = Vec::new();
    for c in &file.clusters {
        assert_eq!(c.budget, scores.budget[c.id]);
        assert_eq!(c.transfer_proxy, scores.transfer_proxy[c.id]);
        assert_eq!(c.density, scores.density[c.id]);
        assert_eq!(c.samples.len(), c.budget);
        for (rank, s) in c.samples.iter().enumerate() {
            assert_eq!(s.rank, rank);
            assert_eq!(s.sample_id, manifest.sample_ids[s.global_index]);
            assert_eq!(model.assignment[s.global_index], c.id);
            all.push(s.global_index);
        }
    }
    all.sort_unstable();
    assert_eq!(all, file.merged);
}

#[test]
fn score_with_loss_tables_reports_transfer_analysis() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let cfg = config(&out);
    cmd_cluster(&cfg).unwrap();
    ok(coincide(
        &["score", "--ratio", "0.1"],
        &[
            ("--features", &ortho3()),
            ("--clusters", &clusters_path(&out)),
            ("--losses", &fixtures().join("losses.joint.csv")),
            ("--solo", &fixtures().join("losses.solo.csv")),
            ("--out", &out),
        ],
    ));
    let scores = ClusterScores::read(&scores_path(&out)).unwrap();
    let t = scores.transfer_analysis.expect("transfer analysis");
    // source 0: ((1.00 - 0.80) + (1.15 - 1.10) + (1.40 - 1.35)) / 3
    assert!((t.transferability[0] - 0.1).abs() < 1e-12);
    assert_eq!(t.sources, vec![0, 1, 2]);
    let r = t.pearson_r.expect("r");
    assert!((-1.0..=1.0).contains(&r));
}

#[test]
fn config_file_is_read_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    let out = dir.path().join("x");
    std::fs::write(
        &cfg_path,
        serde_json::json!({"k": 2, "sampling_ratio": 0.1, "seed": 3, "features": ortho3(), "out": out}).to_string(),
    )
    .unwrap();
    ok(coincide(
        &["--config", cfg_path.to_str().unwrap(), "run", "--k", "3"],
        &[],
    ));
    let written: Value = serde_json::from_slice(&read(&report_path(&out, "run"))).unwrap();
    assert_eq!(written["config"]["k"], 3);
    assert_eq!(written["config"]["seed"], 3);
    assert_eq!(CoresetFile::read(&coreset_path(&out)).unwrap().n_core, 30);

    std::fs::write(&cfg_path, r#"{"kay": 2}"#).unwrap();
    let err = error_json(coincide(&["--config", cfg_path.to_str().unwrap(), "run"], &[]));
    assert_eq!(err["error"]["stage"], "config");
    assert_eq!(err["error"]["kind"], "schema");
}

#[test]
fn errors_are_machine_readable() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let err = error_json(coincide(
        &["cluster", "--k", "2"],
        &[("--features", &dir.path().join("missing")), ("--out", &out)],
    ));
    let e = &err["error"];
    assert_eq!(e["stage"], "cluster");
    assert_eq!(e["kind"], "io");
    assert!(e["message"].as_str().unwrap().contains("missing.feat"));
    assert!(!e["hint"].as_str().unwrap().is_empty());

    let err = error_json(coincide(
        &["cluster", "--k", "2"],
        &[("--features", &fixtures().join("corrupt/bad_magic")), ("--out", &out)],
    ));
    assert_eq!(err["error"]["kind"], "bad_magic");

    let err = error_json(coincide(
        &["run", "--k", "2"],
        &[("--features", &ortho3()), ("--out", &out)],
    ));
    assert_eq!(err["error"]["kind"], "invalid_argument");

    let err = error_json(coincide(
        &["run", "--k", "3", "--n-core", "301"],
        &[("--features", &ortho3()), ("--out", &out)],
    ));
    assert_eq!(err["error"]["kind"], "infeasible");
    assert!(!coreset_path(&out).exists());

    let err = error_json(coincide(
        &["cluster", "--k", "2"],
        &[("--features", &fixtures().join("corrupt/norm_half")), ("--out", &out)],
    ));
    assert_eq!(err["error"]["kind"], "norm_violation");
    ok(coincide(
        &["cluster", "--k", "2", "--skip-norm-check"],
        &[("--features", &fixtures().join("corrupt/norm_half")), ("--out", &out)],
    ));
}

#[test]
fn extract_fixture_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fx");
    let printed = ok(coincide(
        &["extract-fixture"],
        &[("--input", &fixtures().join("activations.json")), ("--out", &out)],
    ));
    assert_eq!(printed["n_samples"], 6);
    assert_eq!(printed["feature_dim"], 12);
    let (x, manifest) = read_features(&out).unwrap();
    let fixture = ActivationFixture::read(&fixtures().join("activations.json")).unwrap();
    let (expected, expected_manifest): (FeatureMatrix, _) = fixture.to_features().unwrap();
    assert_eq!(x, expected);
    assert_eq!(manifest, expected_manifest);
    assert_eq!(manifest.layer_indices, vec![4, 8]);
    assert_eq!(manifest.hidden_dim, 3);
    assert_eq!(
        read(&out.with_extension("feat")),
        read(&fixtures().join("corrupt/valid.feat"))
    );
}
