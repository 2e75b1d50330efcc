//! Output files: guarded writes, CSV serializations of curves, per-batch
//! series, histograms, and sweep summaries.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use ttalab_core::attack::AttackArtifact;
use ttalab_core::deploy::MetricsReport;

/// Write with overwrite protection; parent directories are created.
pub fn write_guarded(path: &Path, content: &str, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!(
            "{} already exists; pass --force to overwrite",
            path.display()
        );
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, content).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[derive(Serialize)]
struct CurveRow {
    iteration: usize,
    l_cls: f64,
    l_stl: f64,
    cosine: f64,
    w_star: Option<f64>,
    lambda: Option<f64>,
    xi: Option<f64>,
}

pub fn curves_csv(artifact: &AttackArtifact) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for (iteration, rec) in artifact.curves.iter().enumerate() {
        writer.serialize(CurveRow {
            iteration,
            l_cls: rec.l_cls,
            l_stl: rec.l_stl,
            cosine: rec.cosine,
            w_star: rec.w_star,
            lambda: rec.lambda,
            xi: rec.xi,
        })?;
    }
    Ok(String::from_utf8(writer.into_inner()?)?)
}

#[derive(Serialize)]
struct BatchRow {
    batch: usize,
    asr: Option<f64>,
    ba: f64,
    label_kl: f64,
    mean_entropy_benign: Option<f64>,
    mean_entropy_attacker: Option<f64>,
}

pub fn per_batch_csv(metrics: &MetricsReport) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in &metrics.per_batch {
        writer.serialize(BatchRow {
            batch: row.index,
            asr: row.asr,
            ba: row.ba,
            label_kl: row.label_kl,
            mean_entropy_benign: row.mean_entropy_benign,
            mean_entropy_attacker: row.mean_entropy_attacker,
        })?;
    }
    Ok(String::from_utf8(writer.into_inner()?)?)
}

#[derive(Serialize)]
struct HistRow {
    class: usize,
    attack_count: u64,
    baseline_count: u64,
}

pub fn histograms_csv(metrics: &MetricsReport) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for class in 0..metrics.classes {
        writer.serialize(HistRow {
            class,
            attack_count: metrics.label_hist_attack[class],
            baseline_count: metrics.label_hist_baseline[class],
        })?;
    }
    Ok(String::from_utf8(writer.into_inner()?)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub run: String,
    pub seed: u64,
    pub attacker_ratio: f64,
    pub victim_fraction: f64,
    pub epsilon: f64,
    pub severity: u8,
    pub tta_method: String,
    pub objective_mode: String,
    pub defense: String,
    pub asr: Option<f64>,
    pub ba: f64,
    pub ba_baseline: f64,
    pub label_kl: f64,
    pub attacker_accuracy: Option<f64>,
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer.serialize(row)?;
    }
    Ok(String::from_utf8(writer.into_inner()?)?)
}
