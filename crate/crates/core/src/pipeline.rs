//! End-to-end experiment composition: data generation, pretraining, attack
//! generation, and deployment, with every stage seeded from one root seed
//! through named sub-streams. Reports embed the exact specification that
//! produced them, so any output can be regenerated bit for bit.

use serde::{Deserialize, Serialize};

use crate::attack::{run_attack, AttackArtifact, AttackConfig};
use crate::data::{make_blobs, stratified_split, DataConfig, Dataset};
use crate::deploy::{run_deployment, MetricsReport};
use crate::error::{Error, Result};
use crate::nn::{pretrain, ModelState, PretrainConfig};
use crate::rng::{sub_seed, sub_stream};
use crate::stream::{build_stream, StreamBatch, StreamConfig};
use crate::trigger::TriggerSpec;
use crate::tta::TtaConfig;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    /// Root seed; stage seeds are derived from it by name.
    pub seed: u64,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub trigger: TriggerSpec,
    pub attack: AttackConfig,
    pub stream: StreamConfig,
    pub tta: TtaConfig,
    /// Fraction of the shifted pool handed to users; the rest is the
    /// attacker's.
    pub user_split: f64,
}

impl ExperimentSpec {
    /// Overwrite every stage seed from the root seed. Stage configs keep
    /// their own seed fields so they stay usable standalone; the pipeline
    /// derives them for isolation between sweep axes.
    pub fn resolved(&self) -> ExperimentSpec {
        let mut spec = self.clone();
        spec.data.seed = sub_seed(self.seed, "data");
        spec.pretrain.seed = sub_seed(self.seed, "pretrain");
        spec.attack.seed = sub_seed(self.seed, "attack");
        spec.stream.seed = sub_seed(self.seed, "stream");
        spec
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.trigger.validate()?;
        self.attack.validate()?;
        self.stream.validate()?;
        self.tta.validate()?;
        if !(self.user_split > 0.0 && self.user_split < 1.0) {
            return Err(Error::invalid(
                "ExperimentSpec",
                "user_split must lie in (0, 1)",
            ));
        }
        if self.trigger.geometry.dim != self.data.dim {
            return Err(Error::invalid(
                "ExperimentSpec",
                "trigger geometry does not match the data dimension",
            ));
        }
        Ok(())
    }

    /// Split the shifted pool into user and attacker datasets.
    pub fn pools(&self) -> Result<(Dataset, Dataset, Dataset)> {
        let spec = self.resolved();
        let (clean, shifted) = make_blobs(&spec.data)?;
        let mut rng = sub_stream(self.seed, "split");
        let (users, attackers) = stratified_split(&shifted, self.user_split, &mut rng);
        Ok((clean, shifted.select(&users), shifted.select(&attackers)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub accuracy: f64,
    pub model: ModelState,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Checkpoint> {
        let ckpt: Checkpoint = serde_json::from_str(s)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        ckpt.model.validate()?;
        Ok(ckpt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeployReport {
    pub version: u32,
    /// The exact resolved specification that produced this report.
    pub provenance: ExperimentSpec,
    pub metrics: MetricsReport,
}

impl DeployReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<DeployReport> {
        let report: DeployReport = serde_json::from_str(s)?;
        if report.version != REPORT_VERSION {
            return Err(Error::Format(format!(
                "unsupported report version {}",
                report.version
            )));
        }
        Ok(report)
    }
}

/// Stage 1: generate clean data and pretrain the deployed model.
pub fn stage_pretrain(spec: &ExperimentSpec) -> Result<Checkpoint> {
    spec.validate()?;
    let resolved = spec.resolved();
    let (clean, _, _) = spec.pools()?;
    let (model, accuracy) = pretrain(&clean, &resolved.pretrain)?;
    Ok(Checkpoint {
        version: CHECKPOINT_VERSION,
        data: resolved.data.clone(),
        pretrain: resolved.pretrain.clone(),
        accuracy,
        model,
    })
}

/// Stage 2: craft perturbations against the checkpointed model using the
/// attacker's pool.
pub fn stage_attack(spec: &ExperimentSpec, checkpoint: &Checkpoint) -> Result<AttackArtifact> {
    spec.validate()?;
    let resolved = spec.resolved();
    let (_, _, attacker_pool) = spec.pools()?;
    run_attack(
        &checkpoint.model,
        &attacker_pool,
        &resolved.trigger,
        &resolved.attack,
    )
}

/// Stage 3: stream deployment with the paired no-attack baseline.
pub fn stage_deploy(
    spec: &ExperimentSpec,
    checkpoint: &Checkpoint,
    artifact: &AttackArtifact,
) -> Result<DeployReport> {
    spec.validate()?;
    let resolved = spec.resolved();
    let (_, user_pool, attacker_pool) = spec.pools()?;
    let stream: Vec<StreamBatch> = build_stream(
        &user_pool,
        &attacker_pool,
        artifact,
        &resolved.stream,
        &resolved.trigger,
    )?;
    let metrics = run_deployment(
        &checkpoint.model,
        &stream,
        &resolved.tta,
        resolved.attack.target_label,
        resolved.data.classes,
    )?;
    Ok(DeployReport {
        version: REPORT_VERSION,
        provenance: resolved,
        metrics,
    })
}

/// All three stages in sequence.
pub fn run_pipeline(spec: &ExperimentSpec) -> Result<(Checkpoint, AttackArtifact, DeployReport)> {
    let checkpoint = stage_pretrain(spec)?;
    let artifact = stage_attack(spec, &checkpoint)?;
    let report = stage_deploy(spec, &checkpoint, &artifact)?;
    Ok((checkpoint, artifact, report))
}

/// Rebuild a report from its embedded provenance.
pub fn regenerate(provenance: &ExperimentSpec) -> Result<DeployReport> {
    let (_, _, report) = run_pipeline(provenance)?;
    Ok(report)
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            seed: 0,
            data: DataConfig {
                classes: 3,
                dim: 16,
                n_per_class: 800,
                separation: 6.0,
                severity: 3,
                seed: 0,
            },
            pretrain: PretrainConfig::default(),
            trigger: TriggerSpec::patch(crate::trigger::Geometry::square_for(16), 0.15, 1.0),
            attack: AttackConfig::default(),
            stream: StreamConfig::default(),
            tta: TtaConfig::tent(1e-2),
            user_split: 0.95,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::ObjectiveMode;

    fn quick_spec(seed: u64) -> ExperimentSpec {
        ExperimentSpec {
            seed,
            data: DataConfig {
                classes: 3,
                dim: 16,
                n_per_class: 150,
                separation: 6.0,
                severity: 3,
                seed: 0,
            },
            attack: AttackConfig {
                iterations: 6,
                objective_mode: ObjectiveMode::Ours,
                ..AttackConfig::default()
            },
            stream: StreamConfig {
                batch_size: 40,
                num_batches: 4,
                ..StreamConfig::default()
            },
            user_split: 0.8,
            ..ExperimentSpec::default()
        }
    }

    #[test]
    fn resolved_seeds_differ_by_stage() {
        let spec = quick_spec(5).resolved();
        let seeds = [
            spec.data.seed,
            spec.pretrain.seed,
            spec.attack.seed,
            spec.stream.seed,
        ];
        for i in 0..seeds.len() {
            for j in 0..i {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
    }

    #[test]
    fn pipeline_runs_and_reports_are_regenerable_bit_for_bit() {
        let spec = quick_spec(6);
        let (ckpt, artifact, report) = run_pipeline(&spec).unwrap();
        assert!(ckpt.accuracy >= 0.95);
        assert_eq!(artifact.curves.len(), 6);

        let again = regenerate(&report.provenance).unwrap();
        assert_eq!(report.to_json().unwrap(), again.to_json().unwrap());
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly() {
        let spec = quick_spec(7);
        let ckpt = stage_pretrain(&spec).unwrap();
        let json = ckpt.to_json().unwrap();
        let back = Checkpoint::from_json(&json).unwrap();
        assert_eq!(back.to_json().unwrap(), json);
        assert_eq!(back.model.frozen_bits(), ckpt.model.frozen_bits());
    }

    #[test]
    fn mismatched_trigger_geometry_is_rejected() {
        let mut spec = quick_spec(8);
        spec.trigger = TriggerSpec::patch(crate::trigger::Geometry::square_for(25), 0.15, 1.0);
        assert!(spec.validate().is_err());
    }
}
