//! Sequential deployment over a stream, and the evaluation metrics: attack
//! success rate on triggered victims, benign accuracy, served-label
//! distribution divergence against the paired no-attack baseline, and
//! per-role entropy summaries.
//!
//! Attacker rows count toward no served metric; their post-adaptation
//! accuracy is reported separately. Label histograms cover the rows present
//! identically in both runs (benign and clean-victim), so the divergence
//! isolates what the attack does to bystander predictions.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{kl_divergence_rows, BnMode, ModelState};
use crate::stream::{Role, StreamBatch};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::tta::{adapt_step, apply_medbn, DefenseKind, DefenseState, TtaConfig};

/// Additive count smoothing before normalizing label histograms.
pub const HISTOGRAM_SMOOTHING: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropySummary {
    pub mean: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub count: usize,
}

fn summarize(mut values: Vec<f64>) -> Option<EntropySummary> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let quantile = |q: f64| -> f64 {
        let pos = q * (values.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        values[lo] * (1.0 - frac) + values[hi] * frac
    };
    Some(EntropySummary {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        q25: quantile(0.25),
        median: quantile(0.5),
        q75: quantile(0.75),
        count: values.len(),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoleEntropies {
    pub benign: Option<EntropySummary>,
    pub victim_triggered: Option<EntropySummary>,
    pub victim_clean: Option<EntropySummary>,
    pub attacker: Option<EntropySummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMetrics {
    pub index: usize,
    pub asr: Option<f64>,
    pub ba: f64,
    pub label_kl: f64,
    pub mean_entropy_benign: Option<f64>,
    pub mean_entropy_attacker: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Fraction of triggered victim rows served the target label; absent
    /// when the stream carries no triggered victims.
    pub asr: Option<f64>,
    /// Post-adaptation accuracy over benign and clean-victim rows.
    pub ba: f64,
    /// Baseline accuracy over the same rows in the paired no-attack run.
    pub ba_baseline: f64,
    /// KL(baseline label histogram || attacked label histogram).
    pub label_kl: f64,
    /// Accuracy on attacker rows, reported separately.
    pub attacker_accuracy: Option<f64>,
    pub entropy: RoleEntropies,
    pub per_batch: Vec<BatchMetrics>,
    /// Served-label counts over benign and clean-victim rows.
    pub label_hist_attack: Vec<u64>,
    pub label_hist_baseline: Vec<u64>,
    pub target_label: usize,
    pub classes: usize,
}

/// Accumulates served predictions for one run over the stream.
struct RunAccumulator {
    classes: usize,
    target: usize,
    hist: Vec<u64>,
    asr_hits: usize,
    asr_total: usize,
    ba_hits: usize,
    ba_total: usize,
    attacker_hits: usize,
    attacker_total: usize,
    entropies: [Vec<f64>; 4],
    per_batch_hist: Vec<Vec<u64>>,
    per_batch_asr: Vec<Option<f64>>,
    per_batch_ba: Vec<f64>,
    per_batch_entropy_benign: Vec<Option<f64>>,
    per_batch_entropy_attacker: Vec<Option<f64>>,
}

impl RunAccumulator {
    fn new(classes: usize, target: usize) -> Self {
        RunAccumulator {
            classes,
            target,
            hist: vec![0; classes],
            asr_hits: 0,
            asr_total: 0,
            ba_hits: 0,
            ba_total: 0,
            attacker_hits: 0,
            attacker_total: 0,
            entropies: [Vec::new(), Vec::new(), Vec::new(), Vec::new()],
            per_batch_hist: Vec::new(),
            per_batch_asr: Vec::new(),
            per_batch_ba: Vec::new(),
            per_batch_entropy_benign: Vec::new(),
            per_batch_entropy_attacker: Vec::new(),
        }
    }

    fn absorb_batch(&mut self, batch: &StreamBatch, predictions: &[usize], entropies: &[f64]) {
        let mut hist = vec![0u64; self.classes];
        let mut asr = (0usize, 0usize);
        let mut ba = (0usize, 0usize);
        let mut ent_b = Vec::new();
        let mut ent_a = Vec::new();
        for (r, role) in batch.roles.iter().enumerate() {
            let pred = predictions[r];
            let truth = batch.labels[r];
            match role {
                Role::VictimTriggered => {
                    asr.1 += 1;
                    if pred == self.target {
                        asr.0 += 1;
                    }
                    self.entropies[1].push(entropies[r]);
                }
                Role::Benign | Role::VictimClean => {
                    ba.1 += 1;
                    if pred == truth {
                        ba.0 += 1;
                    }
                    hist[pred] += 1;
                    let slot = if *role == Role::Benign { 0 } else { 2 };
                    self.entropies[slot].push(entropies[r]);
                    if *role == Role::Benign {
                        ent_b.push(entropies[r]);
                    }
                }
                Role::Attacker => {
                    self.attacker_total += 1;
                    if pred == truth {
                        self.attacker_hits += 1;
                    }
                    self.entropies[3].push(entropies[r]);
                    ent_a.push(entropies[r]);
                }
            }
        }
        self.asr_hits += asr.0;
        self.asr_total += asr.1;
        self.ba_hits += ba.0;
        self.ba_total += ba.1;
        for (h, b) in self.hist.iter_mut().zip(&hist) {
            *h += b;
        }
        self.per_batch_hist.push(hist);
        self.per_batch_asr
            .push((asr.1 > 0).then(|| asr.0 as f64 / asr.1 as f64));
        self.per_batch_ba.push(if ba.1 > 0 {
            ba.0 as f64 / ba.1 as f64
        } else {
            0.0
        });
        self.per_batch_entropy_benign
            .push((!ent_b.is_empty()).then(|| ent_b.iter().sum::<f64>() / ent_b.len() as f64));
        self.per_batch_entropy_attacker
            .push((!ent_a.is_empty()).then(|| ent_a.iter().sum::<f64>() / ent_a.len() as f64));
    }
}

/// Smoothed histogram KL: KL(reference || observed) after adding
/// `HISTOGRAM_SMOOTHING` to every class count and normalizing.
pub fn histogram_kl(reference: &[u64], observed: &[u64]) -> Result<f64> {
    let normalize = |h: &[u64]| -> Vec<f64> {
        let total: f64 = h.iter().map(|&c| c as f64 + HISTOGRAM_SMOOTHING).sum();
        h.iter()
            .map(|&c| (c as f64 + HISTOGRAM_SMOOTHING) / total)
            .collect()
    };
    let p = Tensor::row_vector(normalize(reference));
    let q = Tensor::row_vector(normalize(observed));
    kl_divergence_rows(&p, &q)
}

fn row_entropies_of(model: &ModelState, batch: &Tensor) -> Result<Vec<f64>> {
    let out = model.forward(batch)?;
    let mut tape = Tape::new();
    let id = tape.leaf(out.logits);
    Ok(tape.row_entropies(id))
}

enum View {
    Attacked,
    Baseline,
}

fn run_view(
    model: &ModelState,
    stream: &[StreamBatch],
    config: &TtaConfig,
    target: usize,
    classes: usize,
    view: View,
) -> Result<RunAccumulator> {
    let mut current = match config.defense {
        DefenseKind::MedBn => apply_medbn(model),
        _ => model.with_bn_mode(BnMode::BatchStats),
    };
    let mut defense = DefenseState::new(config, &current);
    let mut acc = RunAccumulator::new(classes, target);

    for batch in stream {
        let rows = match view {
            View::Attacked => &batch.attacked,
            View::Baseline => &batch.baseline,
        };
        let (adapted, served_out) = adapt_step(&current, rows, config)?;
        let served_model = defense.absorb(&adapted);
        let (predictions, entropies) = match config.defense {
            DefenseKind::Ema => {
                let out = served_model.forward(rows)?;
                let mut tape = Tape::new();
                let id = tape.leaf(out.logits.clone());
                (out.predictions(), tape.row_entropies(id))
            }
            _ => {
                let mut tape = Tape::new();
                let id = tape.leaf(served_out.logits.clone());
                (served_out.predictions(), tape.row_entropies(id))
            }
        };
        acc.absorb_batch(batch, &predictions, &entropies);
        current = adapted;
    }
    Ok(acc)
}

/// Adapt sequentially over the attacked stream, run the paired no-attack
/// baseline from the same initial model, and assemble the metrics.
pub fn run_deployment(
    model: &ModelState,
    stream: &[StreamBatch],
    config: &TtaConfig,
    target_label: usize,
    classes: usize,
) -> Result<MetricsReport> {
    config.validate()?;
    let attacked = run_view(model, stream, config, target_label, classes, View::Attacked)?;
    let baseline = run_view(model, stream, config, target_label, classes, View::Baseline)?;

    let label_kl = histogram_kl(&baseline.hist, &attacked.hist)?;
    let per_batch = stream
        .iter()
        .enumerate()
        .map(|(i, batch)| {
            Ok(BatchMetrics {
                index: batch.index,
                asr: attacked.per_batch_asr[i],
                ba: attacked.per_batch_ba[i],
                label_kl: histogram_kl(&baseline.per_batch_hist[i], &attacked.per_batch_hist[i])?,
                mean_entropy_benign: attacked.per_batch_entropy_benign[i],
                mean_entropy_attacker: attacked.per_batch_entropy_attacker[i],
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(MetricsReport {
        asr: (attacked.asr_total > 0).then(|| attacked.asr_hits as f64 / attacked.asr_total as f64),
        ba: if attacked.ba_total > 0 {
            attacked.ba_hits as f64 / attacked.ba_total as f64
        } else {
            0.0
        },
        ba_baseline: if baseline.ba_total > 0 {
            baseline.ba_hits as f64 / baseline.ba_total as f64
        } else {
            0.0
        },
        label_kl,
        attacker_accuracy: (attacked.attacker_total > 0)
            .then(|| attacked.attacker_hits as f64 / attacked.attacker_total as f64),
        entropy: RoleEntropies {
            benign: summarize(attacked.entropies[0].clone()),
            victim_triggered: summarize(attacked.entropies[1].clone()),
            victim_clean: summarize(attacked.entropies[2].clone()),
            attacker: summarize(attacked.entropies[3].clone()),
        },
        per_batch,
        label_hist_attack: attacked.hist,
        label_hist_baseline: baseline.hist,
        target_label,
        classes,
    })
}

/// Per-role prediction-entropy summary of the attacked stream under a fixed
/// model (no adaptation).
pub fn entropy_report(model: &ModelState, stream: &[StreamBatch]) -> Result<RoleEntropies> {
    let mut buckets: [Vec<f64>; 4] = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    for batch in stream {
        let entropies = row_entropies_of(model, &batch.attacked)?;
        for (r, role) in batch.roles.iter().enumerate() {
            let slot = match role {
                Role::Benign => 0,
                Role::VictimTriggered => 1,
                Role::VictimClean => 2,
                Role::Attacker => 3,
            };
            buckets[slot].push(entropies[r]);
        }
    }
    let [b, vt, vc, a] = buckets;
    Ok(RoleEntropies {
        benign: summarize(b),
        victim_triggered: summarize(vt),
        victim_clean: summarize(vc),
        attacker: summarize(a),
    })
}
