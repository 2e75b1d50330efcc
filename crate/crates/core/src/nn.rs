//! MLP classifier with BatchNorm variants and the losses driving both the
//! attack and the adaptation engines.
//!
//! Fixed architecture: input D -> 32 -> BN -> ReLU -> 32 -> BN -> ReLU -> C.
//! Two stacked BN layers give the cross-sample coupling the attack rides on
//! when the normalizer runs in batch-statistics mode. In running-statistics
//! mode the rows decouple completely.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::sub_stream;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const HIDDEN: usize = 32;
pub const BN_EPS: f64 = 1e-5;
/// Floor applied to probabilities inside logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    /// Normalize with the current batch mean/variance (cross-sample coupling).
    BatchStats,
    /// Normalize with stored running statistics (no coupling).
    RunningStats,
    /// Center on the batch median; spread is the mean squared deviation
    /// around that median.
    MedianStats,
}

/// Which parameters test-time adaptation may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdaptableMask {
    BnAffine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub input_dim: usize,
    pub classes: usize,
    pub layers: Vec<LinearLayer>,
    pub bn: Vec<BnLayer>,
    pub bn_mode: BnMode,
    pub bn_eps: f64,
    pub adaptable: AdaptableMask,
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub logits: Tensor,
    pub probs: Tensor,
}

impl BatchOutput {
    pub fn predictions(&self) -> Vec<usize> {
        let c = self.logits.cols();
        (0..self.logits.rows())
            .map(|r| {
                let row = self.logits.row(r);
                let mut best = 0;
                for j in 1..c {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// Handles into a forward graph: the input leaf, the logits root component,
/// the BN affine leaves (for adaptation gradients), and the batch statistics
/// realized by this pass.
pub struct ForwardGraph {
    pub input: NodeId,
    pub logits: NodeId,
    pub bn_affine: Vec<(NodeId, NodeId)>,
    pub batch_stats: Vec<(Tensor, Tensor)>,
    pub lin_params: Vec<(NodeId, NodeId)>,
}

impl ModelState {
    /// Fresh model with unit BN scale, zero shift, and N(0,1)-style running
    /// stats. Weights are uniform Kaiming draws from the given RNG.
    pub fn init(input_dim: usize, classes: usize, rng: &mut impl Rng) -> ModelState {
        let dims = [input_dim, HIDDEN, HIDDEN, classes];
        let mut layers = Vec::new();
        for i in 0..3 {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            layers.push(LinearLayer {
                weight: Tensor::new(vec![fan_in, fan_out], data).unwrap(),
                bias: Tensor::zeros(vec![1, fan_out]),
            });
        }
        let bn = (0..2)
            .map(|_| BnLayer {
                gamma: Tensor::full(vec![1, HIDDEN], 1.0),
                beta: Tensor::zeros(vec![1, HIDDEN]),
                running_mean: Tensor::zeros(vec![1, HIDDEN]),
                running_var: Tensor::full(vec![1, HIDDEN], 1.0),
            })
            .collect();
        ModelState {
            input_dim,
            classes,
            layers,
            bn,
            bn_mode: BnMode::RunningStats,
            bn_eps: BN_EPS,
            adaptable: AdaptableMask::BnAffine,
        }
    }

    pub fn with_bn_mode(&self, mode: BnMode) -> ModelState {
        let mut m = self.clone();
        m.bn_mode = mode;
        m
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != 3 || self.bn.len() != 2 {
            return Err(Error::Format(
                "model must have 3 linear and 2 BN layers".into(),
            ));
        }
        for bn in &self.bn {
            if bn.running_var.data().iter().any(|&v| v <= 0.0) {
                return Err(Error::Format("running variance must be positive".into()));
            }
        }
        Ok(())
    }

    /// Build the forward graph from an input node already on the tape.
    pub fn build_forward(&self, tape: &mut Tape, input: NodeId) -> Result<ForwardGraph> {
        let n = tape.value(input).rows();
        let d = tape.value(input).cols();
        if d != self.input_dim {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: vec![n, d],
                rhs: vec![self.input_dim],
            });
        }
        if matches!(self.bn_mode, BnMode::BatchStats | BnMode::MedianStats) && n < 2 {
            return Err(Error::BatchTooSmall { n });
        }

        let mut bn_affine = Vec::new();
        let mut lin_params = Vec::new();
        let mut batch_stats = Vec::new();
        let mut h = input;
        for (i, lin) in self.layers.iter().enumerate() {
            let w = tape.leaf(lin.weight.clone());
            let b = tape.leaf(lin.bias.clone());
            lin_params.push((w, b));
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, b)?;
            if i < self.bn.len() {
                let bn = &self.bn[i];
                let gamma = tape.leaf(bn.gamma.clone());
                let beta = tape.leaf(bn.beta.clone());
                bn_affine.push((gamma, beta));

                let z = match self.bn_mode {
                    BnMode::BatchStats => {
                        let mu = tape.mean_rows(h)?;
                        let diff = tape.sub_row(h, mu)?;
                        let sq = tape.mul(diff, diff)?;
                        let var = tape.mean_rows(sq)?;
                        batch_stats.push((tape.value(mu).clone(), tape.value(var).clone()));
                        let var_eps = tape.add_scalar(var, self.bn_eps);
                        let denom = tape.sqrt(var_eps);
                        tape.div_row(diff, denom)?
                    }
                    BnMode::MedianStats => {
                        let center = tape.median_rows(h)?;
                        let diff = tape.sub_row(h, center)?;
                        let sq = tape.mul(diff, diff)?;
                        let spread = tape.mean_rows(sq)?;
                        batch_stats.push((tape.value(center).clone(), tape.value(spread).clone()));
                        let spread_eps = tape.add_scalar(spread, self.bn_eps);
                        let denom = tape.sqrt(spread_eps);
                        tape.div_row(diff, denom)?
                    }
                    BnMode::RunningStats => {
                        let mean = tape.leaf(bn.running_mean.clone());
                        let denom_vals = bn.running_var.map(|v| (v + self.bn_eps).sqrt());
                        let denom = tape.leaf(denom_vals);
                        let diff = tape.sub_row(h, mean)?;
                        tape.div_row(diff, denom)?
                    }
                };
                let scaled = tape.mul_row(z, gamma)?;
                h = tape.add_row(scaled, beta)?;
                h = tape.relu(h);
            }
        }
        Ok(ForwardGraph {
            input,
            logits: h,
            bn_affine,
            batch_stats,
            lin_params,
        })
    }

    /// Value-level forward pass.
    pub fn forward(&self, batch: &Tensor) -> Result<BatchOutput> {
        let mut tape = Tape::new();
        let input = tape.leaf(batch.clone());
        let graph = self.build_forward(&mut tape, input)?;
        let logits = tape.value(graph.logits).clone();
        let probs_id = tape.softmax(graph.logits);
        let probs = tape.value(probs_id).clone();
        Ok(BatchOutput { logits, probs })
    }

    /// Bit pattern of everything outside the adaptable mask.
    pub fn frozen_bits(&self) -> Vec<u64> {
        let mut bits = Vec::new();
        for lin in &self.layers {
            bits.extend(lin.weight.bits());
            bits.extend(lin.bias.bits());
        }
        for bn in &self.bn {
            bits.extend(bn.running_mean.bits());
            bits.extend(bn.running_var.bits());
        }
        bits
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        let out = self.forward(&data.x)?;
        let preds = out.predictions();
        let correct = preds.iter().zip(&data.y).filter(|(p, y)| p == y).count();
        Ok(correct as f64 / data.len() as f64)
    }
}

/// Mean cross-entropy of the rows in `rows` against one target class.
pub fn loss_ce(
    tape: &mut Tape,
    logits: NodeId,
    rows: std::ops::Range<usize>,
    target: usize,
) -> Result<NodeId> {
    tape.ce_target(logits, rows, target)
}

/// Mean prediction entropy over all rows of the logits.
pub fn loss_entropy(tape: &mut Tape, logits: NodeId) -> Result<NodeId> {
    let n = tape.value(logits).rows();
    tape.entropy_mean(logits, (0..n).collect())
}

/// Mean KL(p_ref || softmax(logits)) over the given rows, with the reference
/// probability rows treated as constants (floored inside the log).
pub fn loss_kl(
    tape: &mut Tape,
    p_ref: &Tensor,
    logits: NodeId,
    rows: std::ops::Range<usize>,
) -> Result<NodeId> {
    let log_p_ref = p_ref.map(|p| p.max(PROB_FLOOR).ln());
    tape.kl_const_ref(logits, rows, log_p_ref)
}

/// Same loss with the reference given as log-probabilities (e.g. the
/// log-softmax of the clean pass), which keeps the at-reference case exact.
pub fn loss_kl_log_ref(
    tape: &mut Tape,
    log_p_ref: &Tensor,
    logits: NodeId,
    rows: std::ops::Range<usize>,
) -> Result<NodeId> {
    tape.kl_const_ref(logits, rows, log_p_ref.clone())
}

/// Value-level KL divergence between matching probability rows, with the
/// floor keeping zero entries finite. Also serves the label-histogram
/// divergence in the metrics.
pub fn kl_divergence_rows(p_ref: &Tensor, p_att: &Tensor) -> Result<f64> {
    if p_ref.shape() != p_att.shape() {
        return Err(Error::ShapeMismatch {
            op: "kl_divergence_rows",
            lhs: p_ref.shape().to_vec(),
            rhs: p_att.shape().to_vec(),
        });
    }
    let mut total = 0.0;
    for r in 0..p_ref.rows() {
        for (p, q) in p_ref.row(r).iter().zip(p_att.row(r)) {
            if *p > 0.0 {
                total += p * (p.max(PROB_FLOOR).ln() - q.max(PROB_FLOOR).ln());
            }
        }
    }
    Ok(total / p_ref.rows() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub target_accuracy: f64,
    /// Momentum for the running-statistics update.
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 60,
            batch_size: 64,
            lr: 0.05,
            target_accuracy: 0.95,
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

/// Plain SGD pretraining on clean data; populates running BN statistics.
///
/// With `epochs == 0` the freshly initialized model is returned as-is (no
/// convergence requirement). Otherwise the run errors if the target train
/// accuracy is not reached.
pub fn pretrain(data: &Dataset, config: &PretrainConfig) -> Result<(ModelState, f64)> {
    if data.is_empty() {
        return Err(Error::InsufficientData {
            reason: "pretraining dataset is empty".into(),
        });
    }
    let mut rng = sub_stream(config.seed, "pretrain");
    let mut model = ModelState::init(data.dim(), data.classes, &mut rng);

    if config.epochs == 0 {
        let acc = model.accuracy(data)?;
        return Ok((model, acc));
    }

    let mut train = model.with_bn_mode(BnMode::BatchStats);
    let mut accuracy = 0.0;
    for _epoch in 0..config.epochs {
        let mut idx: Vec<usize> = (0..data.len()).collect();
        crate::data::shuffle(&mut idx, &mut rng);
        for chunk in idx.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch = data.select(chunk);
            let mut tape = Tape::new();
            let input = tape.leaf(batch.x.clone());
            let graph = train.build_forward(&mut tape, input)?;
            let loss = tape.ce_labels(graph.logits, &batch.y)?;
            let grads = tape.backward(loss)?;

            for (layer, (w, b)) in train.layers.iter_mut().zip(&graph.lin_params) {
                if let Some(g) = grads.get(*w) {
                    layer.weight.axpy(-config.lr, g)?;
                }
                if let Some(g) = grads.get(*b) {
                    layer.bias.axpy(-config.lr, g)?;
                }
            }
            for (bn, (gamma, beta)) in train.bn.iter_mut().zip(&graph.bn_affine) {
                if let Some(g) = grads.get(*gamma) {
                    bn.gamma.axpy(-config.lr, g)?;
                }
                if let Some(g) = grads.get(*beta) {
                    bn.beta.axpy(-config.lr, g)?;
                }
            }
            for (bn, (mean, var)) in train.bn.iter_mut().zip(&graph.batch_stats) {
                let m = config.bn_momentum;
                for (rm, &bm) in bn.running_mean.data_mut().iter_mut().zip(mean.data()) {
                    *rm = (1.0 - m) * *rm + m * bm;
                }
                for (rv, &bv) in bn.running_var.data_mut().iter_mut().zip(var.data()) {
                    *rv = (1.0 - m) * *rv + m * bv;
                }
            }
        }
        let serving = train.with_bn_mode(BnMode::RunningStats);
        accuracy = serving.accuracy(data)?;
        if accuracy >= config.target_accuracy.max(0.999) {
            break;
        }
    }

    model = train.with_bn_mode(BnMode::RunningStats);
    model.validate()?;
    if accuracy < config.target_accuracy {
        return Err(Error::NoConvergence {
            accuracy,
            epochs: config.epochs,
            target: config.target_accuracy,
        });
    }
    Ok((model, accuracy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_blobs, DataConfig};

    fn blob_config(seed: u64) -> DataConfig {
        DataConfig {
            classes: 3,
            dim: 16,
            n_per_class: 60,
            separation: 6.0,
            severity: 0,
            seed,
        }
    }

    fn tiny_model(seed: u64) -> ModelState {
        let mut rng = sub_stream(seed, "test-model");
        ModelState::init(4, 3, &mut rng)
    }

    #[test]
    fn bn_normalizes_a_two_sample_batch() {
        // one channel through the BN formula directly: mean 2, biased var 1
        let mut tape = Tape::new();
        let h = tape.leaf(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
        let mu = tape.mean_rows(h).unwrap();
        let diff = tape.sub_row(h, mu).unwrap();
        let sq = tape.mul(diff, diff).unwrap();
        let var = tape.mean_rows(sq).unwrap();
        let var_eps = tape.add_scalar(var, BN_EPS);
        let denom = tape.sqrt(var_eps);
        let z = tape.div_row(diff, denom).unwrap();
        let out = tape.value(z).data().to_vec();
        let expect = 1.0 / (1.0 + BN_EPS).sqrt();
        assert!((out[0] + expect).abs() < 1e-12, "{out:?}");
        assert!((out[1] - expect).abs() < 1e-12, "{out:?}");
        assert!((out[1] - 0.999995).abs() < 1e-6);
    }

    #[test]
    fn bn_constant_batch_passes_eps_path() {
        let mut tape = Tape::new();
        let h = tape.leaf(Tensor::new(vec![2, 1], vec![5.0, 5.0]).unwrap());
        let mu = tape.mean_rows(h).unwrap();
        let diff = tape.sub_row(h, mu).unwrap();
        let sq = tape.mul(diff, diff).unwrap();
        let var = tape.mean_rows(sq).unwrap();
        let var_eps = tape.add_scalar(var, BN_EPS);
        let denom = tape.sqrt(var_eps);
        let z = tape.div_row(diff, denom).unwrap();
        let beta = tape.leaf(Tensor::row_vector(vec![0.7]));
        let y = tape.add_row(z, beta).unwrap();
        assert_eq!(tape.value(y).data(), &[0.7, 0.7]);
    }

    #[test]
    fn median_center_resists_outlier() {
        let mut tape = Tape::new();
        let h = tape.leaf(Tensor::new(vec![3, 1], vec![1.0, 2.0, 100.0]).unwrap());
        let center = tape.median_rows(h).unwrap();
        assert_eq!(tape.value(center).scalar_value(), 2.0);
    }

    #[test]
    fn batch_mode_rejects_single_row() {
        let model = tiny_model(1).with_bn_mode(BnMode::BatchStats);
        let x = Tensor::from_rows(&[vec![0.1, 0.2, 0.3, 0.4]]).unwrap();
        assert!(matches!(
            model.forward(&x),
            Err(Error::BatchTooSmall { n: 1 })
        ));
    }

    #[test]
    fn probability_rows_sum_to_one() {
        let model = tiny_model(2).with_bn_mode(BnMode::BatchStats);
        let x = Tensor::from_rows(&[
            vec![0.1, 0.9, 0.3, 0.4],
            vec![0.8, 0.2, 0.7, 0.1],
            vec![0.5, 0.5, 0.5, 0.5],
        ])
        .unwrap();
        let out = model.forward(&x).unwrap();
        for r in 0..out.probs.rows() {
            let s: f64 = out.probs.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_stats_couple_rows_and_running_stats_do_not() {
        let model = tiny_model(3);
        let base =
            Tensor::from_rows(&[vec![0.1, 0.9, 0.3, 0.4], vec![0.8, 0.2, 0.7, 0.1]]).unwrap();
        let extended = Tensor::from_rows(&[
            vec![0.5, 0.5, 0.9, 0.2],
            vec![0.1, 0.9, 0.3, 0.4],
            vec![0.8, 0.2, 0.7, 0.1],
        ])
        .unwrap();

        let coupled = model.with_bn_mode(BnMode::BatchStats);
        let out_base = coupled.forward(&base).unwrap();
        let out_ext = coupled.forward(&extended).unwrap();
        for r in 0..2 {
            let changed = out_base
                .logits
                .row(r)
                .iter()
                .zip(out_ext.logits.row(r + 1))
                .any(|(a, b)| (a - b).abs() > 1e-12);
            assert!(changed, "row {r} unchanged despite batch-stats coupling");
        }

        let decoupled = model.with_bn_mode(BnMode::RunningStats);
        let out_base = decoupled.forward(&base).unwrap();
        let out_ext = decoupled.forward(&extended).unwrap();
        for r in 0..2 {
            for (a, b) in out_base.logits.row(r).iter().zip(out_ext.logits.row(r + 1)) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn loss_values_match_hand_arithmetic() {
        // uniform over 3 classes -> ln 3
        let logits = Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap();
        let mut tape = Tape::new();
        let id = tape.leaf(logits);
        let ce = loss_ce(&mut tape, id, 0..1, 0).unwrap();
        assert!((tape.value(ce).scalar_value() - 3.0f64.ln()).abs() < 1e-12);

        // entropy of [0.5, 0.5, 0, 0] -> ln 2
        let p: [f64; 4] = [0.5, 0.5, 1e-300, 1e-300];
        let logits = Tensor::row_vector(p.iter().map(|v| v.ln()).collect());
        let mut tape = Tape::new();
        let id = tape.leaf(logits);
        let h = loss_entropy(&mut tape, id).unwrap();
        assert!((tape.value(h).scalar_value() - 2.0f64.ln()).abs() < 1e-9);

        // uniform rows over 4 classes -> ln 4
        let logits = Tensor::from_rows(&[vec![1.0; 4], vec![1.0; 4]]).unwrap();
        let mut tape = Tape::new();
        let id = tape.leaf(logits);
        let h = loss_entropy(&mut tape, id).unwrap();
        assert!((tape.value(h).scalar_value() - 4.0f64.ln()).abs() < 1e-12);

        // saturated one-hot predictions: both losses vanish
        let logits = Tensor::from_rows(&[vec![500.0, 0.0, 0.0]]).unwrap();
        let mut tape = Tape::new();
        let id = tape.leaf(logits);
        let ce = loss_ce(&mut tape, id, 0..1, 0).unwrap();
        assert!(tape.value(ce).scalar_value().abs() < 1e-12);
        let h = loss_entropy(&mut tape, id).unwrap();
        assert!(tape.value(h).scalar_value().abs() < 1e-12);
    }

    #[test]
    fn classifier_ce_gradient_survives_a_coarser_fd_step() {
        let model = tiny_model(4).with_bn_mode(BnMode::BatchStats);
        let labels = vec![0usize, 2, 1, 0];
        let x = Tensor::from_rows(&[
            vec![0.2, 0.8, 0.4, 0.1],
            vec![0.7, 0.3, 0.9, 0.5],
            vec![0.1, 0.2, 0.6, 0.8],
            vec![0.9, 0.5, 0.2, 0.3],
        ])
        .unwrap();
        let err = crate::tape::grad_check(
            &|tape: &mut Tape, id| {
                let graph = model.build_forward(tape, id)?;
                tape.ce_labels(graph.logits, &labels)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn kl_worked_values() {
        let p = Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert_eq!(kl_divergence_rows(&p, &p).unwrap(), 0.0);

        let q = Tensor::from_rows(&[vec![0.75, 0.25]]).unwrap();
        let expect = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        assert!((kl_divergence_rows(&p, &q).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.1438).abs() < 1e-4);

        // zero entry stays finite through the floor
        let z = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let kl = kl_divergence_rows(&p, &z).unwrap();
        assert!(kl.is_finite());

        // mismatched shapes
        let bad = Tensor::from_rows(&[vec![0.5, 0.5, 0.0]]).unwrap();
        assert!(kl_divergence_rows(&p, &bad).is_err());
    }

    #[test]
    fn kl_is_nonnegative_on_random_rows() {
        let mut rng = sub_stream(5, "kl-prop");
        for _ in 0..200 {
            let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
                let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect::<Vec<f64>>()
            };
            let p = Tensor::from_rows(&[draw(&mut rng)]).unwrap();
            let q = Tensor::from_rows(&[draw(&mut rng)]).unwrap();
            assert!(kl_divergence_rows(&p, &q).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn pretrain_reaches_high_accuracy_on_separable_blobs() {
        let (clean, _) = make_blobs(&blob_config(21)).unwrap();
        let (model, acc) = pretrain(&clean, &PretrainConfig::default()).unwrap();
        assert!(acc >= 0.99, "train accuracy {acc}");
        assert_eq!(model.bn_mode, BnMode::RunningStats);
        // running stats have moved off their init
        assert!(model.bn[0]
            .running_mean
            .data()
            .iter()
            .any(|&v| v.abs() > 1e-3));
    }

    #[test]
    fn heavier_shift_costs_more_pre_adaptation_accuracy() {
        let (clean, _) = make_blobs(&blob_config(26)).unwrap();
        let (model, _) = pretrain(&clean, &PretrainConfig::default()).unwrap();
        let acc_at = |severity: u8| {
            let (_, shifted) = make_blobs(&DataConfig {
                severity,
                ..blob_config(26)
            })
            .unwrap();
            model.accuracy(&shifted).unwrap()
        };
        let (low, high) = (acc_at(1), acc_at(5));
        assert!(
            high < low,
            "severity 5 accuracy {high} !< severity 1 accuracy {low}"
        );
    }

    #[test]
    fn pretrain_zero_epochs_returns_untrained_model() {
        let (clean, _) = make_blobs(&blob_config(22)).unwrap();
        let cfg = PretrainConfig {
            epochs: 0,
            ..PretrainConfig::default()
        };
        let (_, acc) = pretrain(&clean, &cfg).unwrap();
        assert!(
            acc < 0.9,
            "untrained accuracy should be near chance, got {acc}"
        );
    }

    #[test]
    fn pretrain_is_deterministic() {
        let (clean, _) = make_blobs(&blob_config(23)).unwrap();
        let cfg = PretrainConfig {
            epochs: 5,
            target_accuracy: 0.0,
            ..PretrainConfig::default()
        };
        let (m1, _) = pretrain(&clean, &cfg).unwrap();
        let (m2, _) = pretrain(&clean, &cfg).unwrap();
        assert_eq!(m1.frozen_bits(), m2.frozen_bits());
        assert_eq!(m1.bn[0].gamma.bits(), m2.bn[0].gamma.bits());
    }

    #[test]
    fn model_state_round_trips_bit_exactly_through_json() {
        let (clean, _) = make_blobs(&blob_config(24)).unwrap();
        let cfg = PretrainConfig {
            epochs: 3,
            target_accuracy: 0.0,
            ..PretrainConfig::default()
        };
        let (model, _) = pretrain(&clean, &cfg).unwrap();
        let json = serde_json::to_string(&model).unwrap();
        let back: ModelState = serde_json::from_str(&json).unwrap();
        assert_eq!(model.frozen_bits(), back.frozen_bits());
        assert_eq!(model.bn[1].gamma.bits(), back.bn[1].gamma.bits());
        assert_eq!(
            model.bn[1].running_var.bits(),
            back.bn[1].running_var.bits()
        );
    }
}
