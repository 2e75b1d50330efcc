//! Test-time adaptation engines over the BN affine parameters, plus the
//! serving-side defenses evaluated against the attack.
//!
//! Every method takes exactly one gradient step per batch on gamma/beta and
//! serves the post-update predictions for that same batch. TENT minimizes
//! mean prediction entropy; the entropy-filtered variant is TENT restricted
//! to rows below an entropy cutoff (TENT itself is the cutoff-at-infinity
//! case, sharing one code path); RPL minimizes a generalized cross-entropy
//! against argmax pseudo-labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchOutput, BnMode, ModelState};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TtaMethod {
    Tent,
    Rpl,
    EntropyFiltered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DefenseKind {
    None,
    MedBn,
    Ema,
}

/// JSON has no infinity literal; the filter cutoff legitimately takes
/// +inf (which makes the filtered method plain TENT), so it round-trips
/// through the string "inf".
mod serde_cutoff {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Str(s) => match s.as_str() {
                "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
                "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
                other => other.parse().map_err(serde::de::Error::custom),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtaConfig {
    pub method: TtaMethod,
    pub lr: f64,
    /// Entropy cutoff for the filtered variant.
    #[serde(with = "serde_cutoff")]
    pub entropy_threshold: f64,
    /// Robustness exponent of the generalized cross-entropy.
    pub gce_q: f64,
    pub defense: DefenseKind,
    pub ema_alpha: f64,
}

/// Conventional cutoff: 0.4 * ln C.
pub fn default_entropy_threshold(classes: usize) -> f64 {
    0.4 * (classes as f64).ln()
}

impl TtaConfig {
    pub fn tent(lr: f64) -> TtaConfig {
        TtaConfig {
            method: TtaMethod::Tent,
            lr,
            entropy_threshold: f64::INFINITY,
            gce_q: 0.8,
            defense: DefenseKind::None,
            ema_alpha: 0.99,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::invalid("TtaConfig", "lr must be positive"));
        }
        if !(self.entropy_threshold > 0.0) {
            return Err(Error::invalid(
                "TtaConfig",
                "entropy threshold must be positive",
            ));
        }
        if !(self.gce_q > 0.0 && self.gce_q <= 1.0) {
            return Err(Error::invalid("TtaConfig", "gce_q must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.ema_alpha) {
            return Err(Error::invalid("TtaConfig", "ema_alpha must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// One adaptation step: a single SGD update of the BN affine parameters,
/// followed by the served (post-update) forward on the same batch.
pub fn adapt_step(
    model: &ModelState,
    batch: &Tensor,
    config: &TtaConfig,
) -> Result<(ModelState, BatchOutput)> {
    config.validate()?;
    let mut tape = Tape::new();
    let input = tape.leaf(batch.clone());
    let graph = model.build_forward(&mut tape, input)?;

    let loss = match config.method {
        TtaMethod::Tent | TtaMethod::EntropyFiltered => {
            let threshold = match config.method {
                TtaMethod::Tent => f64::INFINITY,
                _ => config.entropy_threshold,
            };
            let entropies = tape.row_entropies(graph.logits);
            let kept: Vec<usize> = entropies
                .iter()
                .enumerate()
                .filter(|(_, &h)| h < threshold)
                .map(|(i, _)| i)
                .collect();
            if kept.is_empty() {
                log::warn!(
                    "entropy filter removed every sample (threshold {}); batch skipped",
                    threshold
                );
                let served = model.forward(batch)?;
                return Ok((model.clone(), served));
            }
            tape.entropy_mean(graph.logits, kept)?
        }
        TtaMethod::Rpl => {
            // argmax pseudo-labels from the same pass, held constant
            let logits_val = tape.value(graph.logits).clone();
            let labels: Vec<usize> = (0..logits_val.rows())
                .map(|r| {
                    let row = logits_val.row(r);
                    let mut best = 0;
                    for j in 1..row.len() {
                        if row[j] > row[best] {
                            best = j;
                        }
                    }
                    best
                })
                .collect();
            gce_loss(&mut tape, graph.logits, &labels, config.gce_q)?
        }
    };

    let grads = tape.backward(loss)?;
    let mut updated = model.clone();
    for (bn, (gamma, beta)) in updated.bn.iter_mut().zip(&graph.bn_affine) {
        if let Some(g) = grads.get(*gamma) {
            bn.gamma.axpy(-config.lr, g)?;
        }
        if let Some(g) = grads.get(*beta) {
            bn.beta.axpy(-config.lr, g)?;
        }
    }
    let served = updated.forward(batch)?;
    Ok((updated, served))
}

/// Generalized cross-entropy (1 - p_y^q)/q averaged over rows, composed on
/// the tape so the gradient reaches the BN parameters.
fn gce_loss(
    tape: &mut Tape,
    logits: crate::tape::NodeId,
    labels: &[usize],
    q: f64,
) -> Result<crate::tape::NodeId> {
    let t = tape.value(logits);
    let (n, c) = (t.rows(), t.cols());
    let mut mask = Tensor::zeros(vec![n, c]);
    for (r, &y) in labels.iter().enumerate() {
        mask.set(r, y, 1.0);
    }
    let p = tape.softmax(logits);
    let mask_id = tape.leaf(mask);
    let picked = tape.mul(p, mask_id)?;
    let ones = tape.leaf(Tensor::full(vec![c, 1], 1.0));
    let p_y = tape.matmul(picked, ones)?; // N x 1 of p_{y_r}
    let ln_p = tape.ln(p_y);
    let q_ln = tape.scale(ln_p, q);
    let p_pow_q = tape.exp(q_ln);
    let neg = tape.scale(p_pow_q, -1.0 / q);
    let shifted = tape.add_scalar(neg, 1.0 / q);
    Ok(tape.mean_all(shifted))
}

/// Switch every normalization pass (adaptation and serving) to the median
/// statistic.
pub fn apply_medbn(model: &ModelState) -> ModelState {
    model.with_bn_mode(BnMode::MedianStats)
}

/// Serving-side exponential moving average of the adapted weights.
#[derive(Debug, Clone)]
pub struct EmaState {
    pub model: ModelState,
}

impl EmaState {
    pub fn new(initial: &ModelState) -> EmaState {
        EmaState {
            model: initial.clone(),
        }
    }

    /// theta_ema <- alpha * theta_ema + (1 - alpha) * theta_new, applied to
    /// every parameter. alpha = 0 tracks the adapted model exactly.
    pub fn update(&mut self, adapted: &ModelState, alpha: f64) {
        if alpha == 0.0 {
            self.model = adapted.clone();
            return;
        }
        let blend = |ema: &mut Tensor, new: &Tensor| {
            for (e, &n) in ema.data_mut().iter_mut().zip(new.data()) {
                *e = alpha * *e + (1.0 - alpha) * n;
            }
        };
        for (el, nl) in self.model.layers.iter_mut().zip(&adapted.layers) {
            blend(&mut el.weight, &nl.weight);
            blend(&mut el.bias, &nl.bias);
        }
        for (eb, nb) in self.model.bn.iter_mut().zip(&adapted.bn) {
            blend(&mut eb.gamma, &nb.gamma);
            blend(&mut eb.beta, &nb.beta);
            blend(&mut eb.running_mean, &nb.running_mean);
            blend(&mut eb.running_var, &nb.running_var);
        }
    }
}

/// Per-deployment defense state. MedBN is a pure mode switch applied to the
/// model up front; EMA carries the averaged weights between steps.
pub struct DefenseState {
    kind: DefenseKind,
    alpha: f64,
    ema: Option<EmaState>,
}

impl DefenseState {
    pub fn new(config: &TtaConfig, initial: &ModelState) -> DefenseState {
        let ema = match config.defense {
            DefenseKind::Ema => Some(EmaState::new(initial)),
            _ => None,
        };
        DefenseState {
            kind: config.defense,
            alpha: config.ema_alpha,
            ema,
        }
    }

    /// Fold in the freshly adapted parameters and return the model that
    /// serves this batch.
    pub fn absorb<'a>(&'a mut self, adapted: &'a ModelState) -> &'a ModelState {
        match self.kind {
            DefenseKind::Ema => {
                let ema = self.ema.as_mut().expect("ema state");
                ema.update(adapted, self.alpha);
                &ema.model
            }
            _ => adapted,
        }
    }
}
