//! Command implementations behind the `ttalab` binary, callable as a
//! library from the integration tests.

pub mod config;
pub mod output;

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use config::ExperimentConfig;
use output::{write_guarded, SweepRow};
use ttalab_core::attack::AttackArtifact;
use ttalab_core::pipeline::{
    stage_attack, stage_deploy, stage_pretrain, Checkpoint, DeployReport, ExperimentSpec,
};
use ttalab_core::rng::sub_seed;
use ttalab_core::verify;

pub const ARTIFACT_FILE_VERSION: u32 = 1;

/// On-disk attack artifact: the perturbations plus the full experiment
/// provenance needed to regenerate them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactFile {
    pub version: u32,
    pub provenance: ExperimentSpec,
    pub artifact: AttackArtifact,
}

pub fn cmd_pretrain(config: &ExperimentConfig, out: &Path, force: bool) -> Result<PathBuf> {
    let checkpoint = stage_pretrain(&config.spec)?;
    let path = out.join("checkpoint.json");
    write_guarded(&path, &checkpoint.to_json()?, force)?;
    println!(
        "pretrained to train accuracy {:.4}; checkpoint at {}",
        checkpoint.accuracy,
        path.display()
    );
    Ok(path)
}

pub fn cmd_attack(
    config: &ExperimentConfig,
    checkpoint_path: &Path,
    out: &Path,
    force: bool,
) -> Result<PathBuf> {
    let checkpoint = load_checkpoint(checkpoint_path)?;
    let artifact = stage_attack(&config.spec, &checkpoint)?;
    let file = ArtifactFile {
        version: ARTIFACT_FILE_VERSION,
        provenance: config.spec.resolved(),
        artifact,
    };
    let path = out.join("artifact.json");
    write_guarded(&path, &serde_json::to_string_pretty(&file)?, force)?;
    let curves = out.join("curves.csv");
    write_guarded(&curves, &output::curves_csv(&file.artifact)?, force)?;
    println!(
        "attack generated over {} iterations (negative-cosine share {:.3}); artifact at {}",
        file.artifact.curves.len(),
        file.artifact.frac_negative_cosine,
        path.display()
    );
    Ok(path)
}

pub fn cmd_deploy(
    config: &ExperimentConfig,
    checkpoint_path: &Path,
    artifact_path: &Path,
    out: &Path,
    force: bool,
) -> Result<PathBuf> {
    let checkpoint = load_checkpoint(checkpoint_path)?;
    let artifact = load_artifact(artifact_path)?;
    let report = stage_deploy(&config.spec, &checkpoint, &artifact.artifact)?;
    let path = out.join("report.json");
    write_guarded(&path, &report.to_json()?, force)?;
    write_guarded(
        &out.join("per_batch.csv"),
        &output::per_batch_csv(&report.metrics)?,
        force,
    )?;
    write_guarded(
        &out.join("histograms.csv"),
        &output::histograms_csv(&report.metrics)?,
        force,
    )?;
    let m = &report.metrics;
    println!(
        "deployment finished: ASR {} BA {:.4} (baseline {:.4}) label-KL {:.6}; report at {}",
        m.asr.map_or("undefined".into(), |v| format!("{v:.4}")),
        m.ba,
        m.ba_baseline,
        m.label_kl,
        path.display()
    );
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifySuite {
    Gradcheck,
    SolverOracle,
    DescentTheorem,
    ReductionChecks,
    All,
}

impl std::str::FromStr for VerifySuite {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "gradcheck" => VerifySuite::Gradcheck,
            "solver-oracle" | "solver_oracle" => VerifySuite::SolverOracle,
            "descent-theorem" | "descent_theorem" | "descent" => VerifySuite::DescentTheorem,
            "reduction-checks" | "reduction_checks" | "reductions" => VerifySuite::ReductionChecks,
            "all" => VerifySuite::All,
            other => anyhow::bail!("unknown suite '{other}'"),
        })
    }
}

/// Run the requested verification suites; returns true iff everything
/// passed. Reports are printed line by line and written as JSON when an
/// output directory is given.
pub fn cmd_verify(suite: VerifySuite, seed: u64, out: Option<&Path>, force: bool) -> Result<bool> {
    let mut reports: Vec<verify::SuiteReport> = Vec::new();
    if matches!(suite, VerifySuite::Gradcheck | VerifySuite::All) {
        reports.push(verify::gradcheck_suite(seed)?.report);
    }
    if matches!(suite, VerifySuite::SolverOracle | VerifySuite::All) {
        reports.push(verify::solver_oracle_suite(seed, 1000)?.report);
    }
    if matches!(suite, VerifySuite::DescentTheorem | VerifySuite::All) {
        reports.push(verify::descent_suite(seed, 500)?.report);
    }
    if matches!(suite, VerifySuite::ReductionChecks | VerifySuite::All) {
        reports.push(verify::reduction_suite(seed)?.report);
    }
    for report in &reports {
        for line in report.lines() {
            println!("{line}");
        }
    }
    let pass = reports.iter().all(|r| r.pass);
    if let Some(out) = out {
        write_guarded(
            &out.join("verify_report.json"),
            &serde_json::to_string_pretty(&reports)?,
            force,
        )?;
    }
    Ok(pass)
}

/// One sweep point: every axis pinned to a concrete value.
#[derive(Debug, Clone)]
struct SweepPoint {
    spec: ExperimentSpec,
    name: String,
    seed: u64,
}

fn expand_sweep(config: &ExperimentConfig) -> Vec<SweepPoint> {
    let axes = &config.sweep;
    let one = |v: &Vec<f64>, fallback: f64| -> Vec<f64> {
        if v.is_empty() {
            vec![fallback]
        } else {
            v.clone()
        }
    };
    let ratios = one(&axes.attacker_ratio, config.spec.stream.attacker_ratio);
    let fracs = one(&axes.victim_fraction, config.spec.stream.victim_fraction);
    let epsilons = one(&axes.epsilon, config.spec.attack.epsilon);
    let severities = if axes.severity.is_empty() {
        vec![config.spec.data.severity]
    } else {
        axes.severity.clone()
    };
    let methods = if axes.tta_method.is_empty() {
        vec![config.spec.tta.method]
    } else {
        axes.tta_method.clone()
    };
    let modes = if axes.objective_mode.is_empty() {
        vec![config.spec.attack.objective_mode]
    } else {
        axes.objective_mode.clone()
    };
    let seeds = if axes.seeds.is_empty() {
        vec![config.spec.seed]
    } else {
        axes.seeds.clone()
    };

    let mut points = Vec::new();
    for &seed in &seeds {
        for &ratio in &ratios {
            for &frac in &fracs {
                for &eps in &epsilons {
                    for &severity in &severities {
                        for &method in &methods {
                            for &mode in &modes {
                                let mut spec = config.spec.clone();
                                spec.stream.attacker_ratio = ratio;
                                spec.stream.victim_fraction = frac;
                                spec.attack.epsilon = eps;
                                spec.data.severity = severity;
                                spec.tta.method = method;
                                spec.attack.objective_mode = mode;
                                let name = format!(
                                    "seed{seed}-ar{ratio}-vf{frac}-eps{eps:.4}-sev{severity}-{method:?}-{mode:?}"
                                )
                                .to_ascii_lowercase();
                                // the point identity, not enumeration order,
                                // determines the run seed
                                spec.seed = sub_seed(seed, &name);
                                points.push(SweepPoint { spec, name, seed });
                            }
                        }
                    }
                }
            }
        }
    }
    points
}

/// Fan the sweep grid out over a worker pool; each point writes into its own
/// directory and the merged table lands at the sweep root.
pub fn cmd_sweep(config: &ExperimentConfig, out: &Path, force: bool) -> Result<PathBuf> {
    let points = expand_sweep(config);
    println!("sweeping {} points", points.len());
    let results: Vec<Result<(SweepPoint, DeployReport)>> = points
        .into_par_iter()
        .map(|point| {
            let checkpoint = stage_pretrain(&point.spec)?;
            let artifact = stage_attack(&point.spec, &checkpoint)?;
            let report = stage_deploy(&point.spec, &checkpoint, &artifact)?;
            Ok((point, report))
        })
        .collect();

    let mut rows = Vec::new();
    for result in results {
        let (point, report) = result?;
        let run_dir = out.join("runs").join(&point.name);
        write_guarded(&run_dir.join("report.json"), &report.to_json()?, force)?;
        write_guarded(
            &run_dir.join("per_batch.csv"),
            &output::per_batch_csv(&report.metrics)?,
            force,
        )?;
        let m = &report.metrics;
        rows.push(SweepRow {
            run: point.name.clone(),
            seed: point.seed,
            attacker_ratio: point.spec.stream.attacker_ratio,
            victim_fraction: point.spec.stream.victim_fraction,
            epsilon: point.spec.attack.epsilon,
            severity: point.spec.data.severity,
            tta_method: format!("{:?}", point.spec.tta.method),
            objective_mode: format!("{:?}", point.spec.attack.objective_mode),
            defense: format!("{:?}", point.spec.tta.defense),
            asr: m.asr,
            ba: m.ba,
            ba_baseline: m.ba_baseline,
            label_kl: m.label_kl,
            attacker_accuracy: m.attacker_accuracy,
        });
    }
    rows.sort_by(|a, b| a.run.cmp(&b.run));
    let summary = out.join("summary.csv");
    write_guarded(&summary, &output::sweep_csv(&rows)?, force)?;
    write_guarded(
        &out.join("summary.json"),
        &serde_json::to_string_pretty(&rows)?,
        force,
    )?;
    println!("sweep summary at {}", summary.display());
    Ok(summary)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading checkpoint {}", path.display()))?;
    Ok(Checkpoint::from_json(&text)?)
}

pub fn load_artifact(path: &Path) -> Result<ArtifactFile> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading artifact {}", path.display()))?;
    let file: ArtifactFile = serde_json::from_str(&text)?;
    anyhow::ensure!(
        file.version == ARTIFACT_FILE_VERSION,
        "unsupported artifact file version {}",
        file.version
    );
    Ok(file)
}
