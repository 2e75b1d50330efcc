//! End-to-end checks of the command layer: file outputs, overwrite guards,
//! provenance-based regeneration, sweep expansion, and binary exit codes.

use std::process::Command;

use tempfile::TempDir;
use ttalab_cli::config::{ExperimentConfig, SweepAxes};
use ttalab_cli::{cmd_attack, cmd_deploy, cmd_pretrain, cmd_sweep, cmd_verify, VerifySuite};
use ttalab_core::pipeline::regenerate;

fn quick_config(seed: u64) -> ExperimentConfig {
    let mut config = ExperimentConfig::default();
    config.spec.seed = seed;
    config.spec.data.n_per_class = 200;
    config.spec.user_split = 0.8;
    config.spec.attack.iterations = 10;
    config.spec.stream.batch_size = 60;
    config.spec.stream.num_batches = 4;
    config
}

#[test]
fn pipeline_writes_expected_files() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("exp");
    let config = quick_config(11);

    let ckpt = cmd_pretrain(&config, &out, false).unwrap();
    let artifact = cmd_attack(&config, &ckpt, &out, false).unwrap();
    let report = cmd_deploy(&config, &ckpt, &artifact, &out, false).unwrap();

    for file in [
        "checkpoint.json",
        "artifact.json",
        "curves.csv",
        "report.json",
        "per_batch.csv",
        "histograms.csv",
    ] {
        assert!(out.join(file).exists(), "{file} missing");
    }
    // curves carry one row per iteration (plus header)
    let curves = std::fs::read_to_string(out.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + config.spec.attack.iterations);
    let per_batch = std::fs::read_to_string(out.join("per_batch.csv")).unwrap();
    assert_eq!(
        per_batch.lines().count(),
        1 + config.spec.stream.num_batches
    );
    assert!(report.exists());
}

#[test]
fn rerun_with_same_seed_is_bit_identical() {
    let dir = TempDir::new().unwrap();
    let config = quick_config(12);
    let p1 = cmd_pretrain(&config, &dir.path().join("a"), false).unwrap();
    let p2 = cmd_pretrain(&config, &dir.path().join("b"), false).unwrap();
    assert_eq!(
        std::fs::read(&p1).unwrap(),
        std::fs::read(&p2).unwrap(),
        "checkpoints differ between identical runs"
    );
}

#[test]
fn overwrite_requires_force() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("exp");
    let config = quick_config(13);
    cmd_pretrain(&config, &out, false).unwrap();
    let err = cmd_pretrain(&config, &out, false).unwrap_err();
    assert!(err.to_string().contains("--force"), "{err}");
    cmd_pretrain(&config, &out, true).unwrap();
}

#[test]
fn report_regenerates_from_embedded_provenance() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("exp");
    let config = quick_config(14);
    let ckpt = cmd_pretrain(&config, &out, false).unwrap();
    let artifact = cmd_attack(&config, &ckpt, &out, false).unwrap();
    let report_path = cmd_deploy(&config, &ckpt, &artifact, &out, false).unwrap();

    let text = std::fs::read_to_string(&report_path).unwrap();
    let report = ttalab_core::pipeline::DeployReport::from_json(&text).unwrap();
    let again = regenerate(&report.provenance).unwrap();
    assert_eq!(text, again.to_json().unwrap());
}

#[test]
fn sweep_emits_one_report_per_point_and_a_merged_table() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("sweep");
    let mut config = quick_config(15);
    config.spec.attack.iterations = 4;
    config.sweep = SweepAxes {
        severity: vec![1, 2, 3, 4, 5],
        ..SweepAxes::default()
    };
    let summary = cmd_sweep(&config, &out, false).unwrap();
    let table = std::fs::read_to_string(&summary).unwrap();
    assert_eq!(table.lines().count(), 1 + 5, "summary rows");
    let runs: Vec<_> = std::fs::read_dir(out.join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 5);
    for entry in runs {
        assert!(entry.unwrap().path().join("report.json").exists());
    }
}

#[test]
fn verify_suites_pass_and_write_reports() {
    let dir = TempDir::new().unwrap();
    let pass = cmd_verify(VerifySuite::DescentTheorem, 2024, Some(dir.path()), false).unwrap();
    assert!(pass);
    assert!(dir.path().join("verify_report.json").exists());
}

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ttalab"))
}

#[test]
fn binary_exit_codes_reflect_outcomes() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("exp");

    let status = binary()
        .args(["pretrain", "--out"])
        .arg(&out)
        .args(["--seed", "21"])
        .status()
        .unwrap();
    assert!(status.success());

    // second run without --force must fail
    let status = binary()
        .args(["pretrain", "--out"])
        .arg(&out)
        .args(["--seed", "21"])
        .status()
        .unwrap();
    assert!(!status.success());

    // bad flag value must fail
    let status = binary()
        .args(["pretrain", "--out"])
        .arg(dir.path().join("other"))
        .args(["--mode", "bogus"])
        .status()
        .unwrap();
    assert!(!status.success());

    // verify subcommand succeeds on a passing suite
    let status = binary()
        .args(["verify", "--suite", "reduction-checks", "--out"])
        .arg(dir.path().join("verify"))
        .status()
        .unwrap();
    assert!(status.success());
}
