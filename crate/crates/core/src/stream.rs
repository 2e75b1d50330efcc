//! Deployment-stream assembly.
//!
//! Each batch mixes attacker rows (carrying their learned perturbations),
//! triggered victim rows, clean victim rows, and benign rows. Every batch is
//! built together with its paired baseline view: the same rows with the
//! perturbations and triggers stripped, so a no-attack run shares the exact
//! composition.

use serde::{Deserialize, Serialize};

use crate::attack::{apply_perturbation, AttackArtifact};
use crate::data::{sample_stratified, shuffle, Dataset};
use crate::error::{Error, Result};
use crate::rng::sub_stream;
use crate::tensor::Tensor;
use crate::trigger::{apply_trigger, TriggerSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Benign,
    VictimTriggered,
    VictimClean,
    Attacker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub batch_size: usize,
    /// Attacker-to-user volume ratio (1.0 means 1:1).
    pub attacker_ratio: f64,
    /// Fraction of user rows that arrive triggered; an equal share of clean
    /// victim-user rows accompanies them.
    pub victim_fraction: f64,
    pub num_batches: usize,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            batch_size: 200,
            attacker_ratio: 1.0,
            victim_fraction: 0.09,
            num_batches: 20,
            seed: 0,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 4 {
            return Err(Error::invalid("StreamConfig", "batch_size must be >= 4"));
        }
        if !(self.attacker_ratio >= 0.0) {
            return Err(Error::invalid(
                "StreamConfig",
                "attacker_ratio must be >= 0",
            ));
        }
        if !(0.0..1.0).contains(&self.victim_fraction) {
            return Err(Error::invalid(
                "StreamConfig",
                "victim_fraction must lie in [0, 1)",
            ));
        }
        if self.victim_fraction >= 0.5 {
            return Err(Error::invalid(
                "StreamConfig",
                "victim_fraction >= 0.5 leaves no benign rows (each triggered row is paired with a clean victim row)",
            ));
        }
        if self.num_batches == 0 {
            return Err(Error::invalid("StreamConfig", "num_batches must be >= 1"));
        }
        Ok(())
    }

    pub fn attacker_rows_per_batch(&self) -> usize {
        ((self.batch_size as f64) * self.attacker_ratio / (1.0 + self.attacker_ratio)).round()
            as usize
    }
}

/// One deployment batch with its attacked and baseline views sharing the
/// same row composition and role labels.
#[derive(Debug, Clone)]
pub struct StreamBatch {
    pub index: usize,
    pub attacked: Tensor,
    pub baseline: Tensor,
    pub roles: Vec<Role>,
    pub labels: Vec<usize>,
}

impl StreamBatch {
    pub fn role_counts(&self) -> [usize; 4] {
        let mut counts = [0; 4];
        for role in &self.roles {
            let slot = match role {
                Role::Benign => 0,
                Role::VictimTriggered => 1,
                Role::VictimClean => 2,
                Role::Attacker => 3,
            };
            counts[slot] += 1;
        }
        counts
    }
}

/// Assemble the full stream. Attacker rows cycle deterministically through
/// the artifact's perturbation set; user rows are drawn without replacement
/// from the user pool, victims stratified across distinct classes.
pub fn build_stream(
    user_pool: &Dataset,
    attacker_pool: &Dataset,
    artifact: &AttackArtifact,
    config: &StreamConfig,
    trigger: &TriggerSpec,
) -> Result<Vec<StreamBatch>> {
    config.validate()?;
    trigger.validate()?;
    if artifact.deltas.rows() != attacker_pool.len() {
        return Err(Error::InsufficientData {
            reason: format!(
                "artifact has {} perturbations for {} attacker samples",
                artifact.deltas.rows(),
                attacker_pool.len()
            ),
        });
    }
    let n_att = config.attacker_rows_per_batch();
    let n_user = config.batch_size - n_att;
    if n_att > 0 && attacker_pool.len() < n_att {
        return Err(Error::InsufficientData {
            reason: format!(
                "attacker pool of {} cannot fill {} attacker rows per batch",
                attacker_pool.len(),
                n_att
            ),
        });
    }
    let n_vt = ((n_user as f64) * config.victim_fraction).round() as usize;
    let n_vc = n_vt;
    let n_benign = n_user
        .checked_sub(n_vt + n_vc)
        .ok_or_else(|| Error::invalid("StreamConfig", "victim rows exceed user rows"))?;
    if config.num_batches * n_user > user_pool.len() {
        return Err(Error::InsufficientData {
            reason: format!(
                "user pool of {} cannot supply {} batches of {} user rows",
                user_pool.len(),
                config.num_batches,
                n_user
            ),
        });
    }

    let mut rng = sub_stream(config.seed, "stream");
    let mut remaining: Vec<usize> = (0..user_pool.len()).collect();
    let mut batches = Vec::with_capacity(config.num_batches);

    for index in 0..config.num_batches {
        let mut rows_attacked: Vec<Vec<f64>> = Vec::with_capacity(config.batch_size);
        let mut rows_baseline: Vec<Vec<f64>> = Vec::with_capacity(config.batch_size);
        let mut roles = Vec::with_capacity(config.batch_size);
        let mut labels = Vec::with_capacity(config.batch_size);

        for i in 0..n_att {
            let a_idx = (index * n_att + i) % attacker_pool.len();
            let clean = attacker_pool.x.slice_rows(a_idx, a_idx + 1);
            let delta = artifact.deltas.slice_rows(a_idx, a_idx + 1);
            let perturbed = apply_perturbation(&clean, &delta)?;
            rows_attacked.push(perturbed.row_to_vec(0));
            rows_baseline.push(clean.row_to_vec(0));
            roles.push(Role::Attacker);
            labels.push(attacker_pool.y[a_idx]);
        }

        let victims =
            sample_stratified(&remaining, &user_pool.y, user_pool.classes, n_vt, &mut rng);
        remaining.retain(|i| !victims.contains(i));
        for &i in &victims {
            let clean = user_pool.x.slice_rows(i, i + 1);
            let triggered = apply_trigger(&clean, trigger)?;
            rows_attacked.push(triggered.row_to_vec(0));
            rows_baseline.push(clean.row_to_vec(0));
            roles.push(Role::VictimTriggered);
            labels.push(user_pool.y[i]);
        }

        let clean_victims =
            sample_stratified(&remaining, &user_pool.y, user_pool.classes, n_vc, &mut rng);
        remaining.retain(|i| !clean_victims.contains(i));
        for &i in &clean_victims {
            let row = user_pool.x.row_to_vec(i);
            rows_attacked.push(row.clone());
            rows_baseline.push(row);
            roles.push(Role::VictimClean);
            labels.push(user_pool.y[i]);
        }

        shuffle(&mut remaining, &mut rng);
        let benign: Vec<usize> = remaining.drain(..n_benign).collect();
        for &i in &benign {
            let row = user_pool.x.row_to_vec(i);
            rows_attacked.push(row.clone());
            rows_baseline.push(row);
            roles.push(Role::Benign);
            labels.push(user_pool.y[i]);
        }

        batches.push(StreamBatch {
            index,
            attacked: Tensor::from_rows(&rows_attacked)?,
            baseline: Tensor::from_rows(&rows_baseline)?,
            roles,
            labels,
        });
    }
    Ok(batches)
}
