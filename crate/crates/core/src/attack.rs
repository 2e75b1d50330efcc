//! Meta-learned attack generation.
//!
//! The attacker owns a pool of samples and a white-box copy of the deployed
//! model. Each outer iteration simulates one adaptation batch: the pool is
//! partitioned into triggered victims, perturbation-carrying support rows,
//! and untouched benign rows. The attack loss is the target cross-entropy on
//! the victim rows; the stealth loss is the KL drift of the benign rows
//! against the same batch without trigger and perturbations. Both gradients
//! reach the support perturbations only through the shared batch statistics.
//! The combined direction (per the configured objective mode) drives a
//! projected step on the perturbation set under the l-infinity budget.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::align::{self, BaselineMethod, GradPair};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{BnMode, ModelState};
use crate::rng::sub_stream;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::trigger::{apply_trigger, TriggerSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectiveMode {
    /// Priority-aware ellipsoidal trust-region alignment.
    Ours,
    /// Attack gradient only.
    ClsOnly,
    /// Plain sum of attack and stealth gradients.
    ClsPlusStl,
    PcGrad,
    CaGrad,
    /// Trust region with the identity metric (kappa = 0).
    EuclidTr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Outer iterations K.
    pub iterations: usize,
    /// Batches aggregated per iteration T.
    pub tasks_per_iter: usize,
    /// Perturbation step size eta.
    pub step_size: f64,
    /// l-infinity budget.
    pub epsilon: f64,
    pub gamma: f64,
    pub kappa: f64,
    pub eps_num: f64,
    pub target_label: usize,
    pub victim_ratio: (f64, f64),
    pub support_ratio: (f64, f64),
    pub objective_mode: ObjectiveMode,
    /// Gaussian jitter scale for the augmented variant.
    pub augment_sigma: Option<f64>,
    pub cagrad_c: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            iterations: 500,
            tasks_per_iter: 1,
            step_size: 0.008,
            epsilon: 16.0 / 255.0,
            gamma: align::DEFAULT_GAMMA,
            kappa: align::DEFAULT_KAPPA,
            eps_num: align::DEFAULT_EPS_NUM,
            target_label: 0,
            victim_ratio: (0.05, 0.20),
            support_ratio: (0.40, 0.60),
            objective_mode: ObjectiveMode::Ours,
            augment_sigma: None,
            cagrad_c: 0.5,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks_per_iter == 0 {
            return Err(Error::invalid(
                "AttackConfig",
                "tasks_per_iter must be >= 1",
            ));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::invalid("AttackConfig", "step_size must be positive"));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::invalid("AttackConfig", "epsilon must be >= 0"));
        }
        let ok_range = |(lo, hi): (f64, f64)| lo > 0.0 && hi < 1.0 && lo <= hi;
        if !ok_range(self.victim_ratio) || !ok_range(self.support_ratio) {
            return Err(Error::invalid(
                "AttackConfig",
                "ratio ranges must lie within (0, 1)",
            ));
        }
        if self.victim_ratio.1 + self.support_ratio.1 >= 1.0 {
            return Err(Error::invalid(
                "AttackConfig",
                "victim and support upper ratios must leave room for benign rows",
            ));
        }
        if let Some(sigma) = self.augment_sigma {
            if !(sigma >= 0.0) {
                return Err(Error::invalid("AttackConfig", "augment sigma must be >= 0"));
            }
        }
        Ok(())
    }
}

/// One simulated adaptation batch: disjoint role assignment over the
/// attacker pool, with triggered and clean views of the victim rows.
#[derive(Debug, Clone)]
pub struct Task {
    pub victim_idx: Vec<usize>,
    pub support_idx: Vec<usize>,
    pub benign_idx: Vec<usize>,
    pub victim_triggered: Tensor,
    pub victim_clean: Tensor,
    pub support_clean: Tensor,
    pub benign_rows: Tensor,
}

impl Task {
    pub fn batch_len(&self) -> usize {
        self.victim_idx.len() + self.support_idx.len() + self.benign_idx.len()
    }
}

/// Randomly partition the attacker pool into victim / support / benign
/// roles. Each role keeps at least one sample; the benign share is the
/// remainder after the sampled victim and support draws.
pub fn sample_task(
    data: &Dataset,
    trigger: &TriggerSpec,
    victim_ratio: (f64, f64),
    support_ratio: (f64, f64),
    rng: &mut impl Rng,
) -> Result<Task> {
    let n = data.len();
    if n < 3 {
        return Err(Error::InsufficientData {
            reason: format!("need >= 3 attacker samples for three roles, have {n}"),
        });
    }
    let rv = rng.gen_range(victim_ratio.0..=victim_ratio.1);
    let rs = rng.gen_range(support_ratio.0..=support_ratio.1);
    let nv = ((rv * n as f64).ceil() as usize).clamp(1, n - 2);
    let ns = ((rs * n as f64).ceil() as usize).clamp(1, n - nv - 1);

    let mut idx: Vec<usize> = (0..n).collect();
    crate::data::shuffle(&mut idx, rng);
    let victim_idx = idx[..nv].to_vec();
    let support_idx = idx[nv..nv + ns].to_vec();
    let benign_idx = idx[nv + ns..].to_vec();

    let victim_clean = data.select(&victim_idx).x;
    let victim_triggered = apply_trigger(&victim_clean, trigger)?;
    let support_clean = data.select(&support_idx).x;
    let benign_rows = data.select(&benign_idx).x;
    Ok(Task {
        victim_idx,
        support_idx,
        benign_idx,
        victim_triggered,
        victim_clean,
        support_clean,
        benign_rows,
    })
}

/// Clipped Gaussian jitter, then the [0, 1] range clamp. Used on victim and
/// support rows when augmentation is enabled.
pub fn augment_rows(rows: &Tensor, sigma: f64, rng: &mut impl Rng) -> Tensor {
    let jitter = jitter_like(rows, sigma, rng);
    let mut out = rows.clone();
    for (v, j) in out.data_mut().iter_mut().zip(jitter.data()) {
        *v = (*v + j).clamp(0.0, 1.0);
    }
    out
}

fn jitter_like(rows: &Tensor, sigma: f64, rng: &mut impl Rng) -> Tensor {
    let bound = 3.0 * sigma;
    let data: Vec<f64> = (0..rows.len())
        .map(|_| {
            let g: f64 = rng.sample(StandardNormal);
            (sigma * g).clamp(-bound, bound)
        })
        .collect();
    Tensor::new(rows.shape().to_vec(), data).unwrap()
}

/// Per-task loss values, recorded into the artifact curves.
#[derive(Debug, Clone, Copy)]
pub struct TaskLosses {
    pub l_cls: f64,
    pub l_stl: f64,
}

/// Attack and stealth gradients of one task with respect to the full
/// perturbation set (zero outside the support rows' coordinates).
///
/// The model must couple rows through batch statistics; running statistics
/// make the victim loss structurally independent of the support rows and the
/// attack ill-posed.
pub fn task_gradients(
    model: &ModelState,
    task: &Task,
    deltas: &Tensor,
    target_label: usize,
    augment: Option<(f64, &mut rand_chacha::ChaCha8Rng)>,
) -> Result<(GradPair, TaskLosses)> {
    if model.bn_mode != BnMode::BatchStats {
        return Err(Error::NoCoupling);
    }
    let dim = deltas.cols();
    let (nv, ns, nb) = (
        task.victim_idx.len(),
        task.support_idx.len(),
        task.benign_idx.len(),
    );

    // shared jitter so the reference pass isolates the attack-induced drift
    let (victim_att, victim_ref, support_base) = match augment {
        Some((sigma, rng)) if sigma > 0.0 => {
            let jv = jitter_like(&task.victim_triggered, sigma, rng);
            let js = jitter_like(&task.support_clean, sigma, rng);
            let add_clamp = |rows: &Tensor, j: &Tensor| {
                let mut out = rows.clone();
                for (v, ji) in out.data_mut().iter_mut().zip(j.data()) {
                    *v = (*v + ji).clamp(0.0, 1.0);
                }
                out
            };
            (
                add_clamp(&task.victim_triggered, &jv),
                add_clamp(&task.victim_clean, &jv),
                add_clamp(&task.support_clean, &js),
            )
        }
        _ => (
            task.victim_triggered.clone(),
            task.victim_clean.clone(),
            task.support_clean.clone(),
        ),
    };

    // reference pass: same batch without trigger and perturbations
    let batch_ref = Tensor::concat_rows(&[&victim_ref, &support_base, &task.benign_rows])?;
    let ref_out = model.forward(&batch_ref)?;
    let log_p_ref_benign =
        crate::tape::log_softmax_values(&ref_out.logits.slice_rows(nv + ns, nv + ns + nb));

    // perturbed pass with the support deltas as the differentiated leaf
    let delta_rows = Tensor::from_rows(
        &task
            .support_idx
            .iter()
            .map(|&i| deltas.row_to_vec(i))
            .collect::<Vec<_>>(),
    )?;
    let mut tape = Tape::new();
    let delta_leaf = tape.leaf(delta_rows);
    let support_const = tape.leaf(support_base);
    let perturbed = tape.add(support_const, delta_leaf)?;
    let support_att = tape.clamp(perturbed, 0.0, 1.0);
    let victim_const = tape.leaf(victim_att);
    let benign_const = tape.leaf(task.benign_rows.clone());
    let batch = tape.concat_rows(&[victim_const, support_att, benign_const])?;
    let graph = model.build_forward(&mut tape, batch)?;

    let l_cls = crate::nn::loss_ce(&mut tape, graph.logits, 0..nv, target_label)?;
    // stealth compares the joint benign prediction distributions, which for
    // independent rows is the sum of the per-row divergences
    let kl_mean = crate::nn::loss_kl_log_ref(
        &mut tape,
        &log_p_ref_benign,
        graph.logits,
        nv + ns..nv + ns + nb,
    )?;
    let l_stl = tape.scale(kl_mean, nb as f64);

    let grads_cls = tape.backward(l_cls)?;
    let grads_stl = tape.backward(l_stl)?;
    let ga = grads_cls.get_or_zeros(delta_leaf, &[ns, dim]);
    let gc = grads_stl.get_or_zeros(delta_leaf, &[ns, dim]);

    let scatter = |g: &Tensor| -> Vec<f64> {
        let mut flat = vec![0.0; deltas.rows() * dim];
        for (k, &row) in task.support_idx.iter().enumerate() {
            flat[row * dim..(row + 1) * dim].copy_from_slice(g.row(k));
        }
        flat
    };
    let pair = GradPair::new(scatter(&ga), scatter(&gc))?;
    let losses = TaskLosses {
        l_cls: tape.value(l_cls).scalar_value(),
        l_stl: tape.value(l_stl).scalar_value(),
    };
    Ok((pair, losses))
}

/// Elementwise projection onto the l-infinity ball of radius epsilon.
pub fn project_linf(delta: &Tensor, epsilon: f64) -> Tensor {
    delta.map(|v| v.clamp(-epsilon, epsilon))
}

/// Perturbed inputs as served to the model: clamp(x + delta, 0, 1).
pub fn apply_perturbation(x: &Tensor, delta: &Tensor) -> Result<Tensor> {
    if x.shape() != delta.shape() {
        return Err(Error::ShapeMismatch {
            op: "apply_perturbation",
            lhs: x.shape().to_vec(),
            rhs: delta.shape().to_vec(),
        });
    }
    let mut out = x.clone();
    for (v, d) in out.data_mut().iter_mut().zip(delta.data()) {
        *v = (*v + d).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Per-iteration diagnostics. Solver fields are present only for the
/// trust-region modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub l_cls: f64,
    pub l_stl: f64,
    pub cosine: f64,
    pub w_star: Option<f64>,
    pub lambda: Option<f64>,
    pub xi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackArtifact {
    pub version: u32,
    /// Exact configuration (including the seed) that produced the deltas.
    pub config: AttackConfig,
    /// One perturbation row per attacker sample.
    pub deltas: Tensor,
    pub curves: Vec<IterationRecord>,
    /// Share of iterations whose gradient cosine was negative.
    pub frac_negative_cosine: f64,
}

pub const ARTIFACT_VERSION: u32 = 1;

impl AttackArtifact {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<AttackArtifact> {
        let artifact: AttackArtifact = serde_json::from_str(s)?;
        if artifact.version != ARTIFACT_VERSION {
            return Err(Error::Format(format!(
                "unsupported artifact version {}",
                artifact.version
            )));
        }
        Ok(artifact)
    }
}

/// Run the full meta-learning loop and return the perturbation artifact.
pub fn run_attack(
    model: &ModelState,
    attacker_data: &Dataset,
    trigger: &TriggerSpec,
    config: &AttackConfig,
) -> Result<AttackArtifact> {
    run_attack_with_observer(model, attacker_data, trigger, config, |_, _, _| {})
}

/// Same as [`run_attack`] with a per-iteration hook receiving the averaged
/// (attack, stealth) gradients before the update.
pub fn run_attack_with_observer(
    model: &ModelState,
    attacker_data: &Dataset,
    trigger: &TriggerSpec,
    config: &AttackConfig,
    mut observer: impl FnMut(usize, &[f64], &[f64]),
) -> Result<AttackArtifact> {
    config.validate()?;
    trigger.validate()?;
    if config.target_label >= attacker_data.classes {
        return Err(Error::invalid(
            "run_attack",
            format!(
                "target label {} outside {} classes",
                config.target_label, attacker_data.classes
            ),
        ));
    }
    let surrogate = model.with_bn_mode(BnMode::BatchStats);
    let n = attacker_data.len();
    let dim = attacker_data.dim();
    let mut deltas = Tensor::zeros(vec![n, dim]);
    let mut rng = sub_stream(config.seed, "attack");
    let mut curves = Vec::with_capacity(config.iterations);
    let mut negative = 0usize;

    for k in 0..config.iterations {
        let mut a_sum = vec![0.0; n * dim];
        let mut c_sum = vec![0.0; n * dim];
        let mut l_cls_sum = 0.0;
        let mut l_stl_sum = 0.0;
        for _ in 0..config.tasks_per_iter {
            let task = sample_task(
                attacker_data,
                trigger,
                config.victim_ratio,
                config.support_ratio,
                &mut rng,
            )?;
            let augment = config.augment_sigma.map(|s| (s, &mut rng));
            let (pair, losses) =
                task_gradients(&surrogate, &task, &deltas, config.target_label, augment)?;
            for (acc, v) in a_sum.iter_mut().zip(&pair.attack) {
                *acc += v;
            }
            for (acc, v) in c_sum.iter_mut().zip(&pair.stealth) {
                *acc += v;
            }
            l_cls_sum += losses.l_cls;
            l_stl_sum += losses.l_stl;
        }
        let t = config.tasks_per_iter as f64;
        for v in a_sum.iter_mut() {
            *v /= t;
        }
        for v in c_sum.iter_mut() {
            *v /= t;
        }
        observer(k, &a_sum, &c_sum);

        let pair = GradPair::new(a_sum, c_sum)?;
        let s = align::cosine(&pair.attack, &pair.stealth, config.eps_num);
        if s < 0.0 {
            negative += 1;
        }

        let (direction, record) = match config.objective_mode {
            ObjectiveMode::Ours | ObjectiveMode::EuclidTr => {
                let kappa = match config.objective_mode {
                    ObjectiveMode::Ours => config.kappa,
                    _ => 0.0,
                };
                let sol = align::solve_direction(&pair, config.gamma, kappa, config.eps_num)?;
                let rec = IterationRecord {
                    l_cls: l_cls_sum / t,
                    l_stl: l_stl_sum / t,
                    cosine: s,
                    w_star: Some(sol.w_star),
                    lambda: Some(sol.lambda()),
                    xi: sol.xi,
                };
                (sol.direction, rec)
            }
            other => {
                let direction = match other {
                    ObjectiveMode::ClsOnly => pair.attack.clone(),
                    ObjectiveMode::ClsPlusStl => {
                        align::baseline_combine(&pair, BaselineMethod::Sum)?
                    }
                    ObjectiveMode::PcGrad => {
                        align::baseline_combine(&pair, BaselineMethod::PcGrad)?
                    }
                    ObjectiveMode::CaGrad => align::baseline_combine(
                        &pair,
                        BaselineMethod::CaGrad { c: config.cagrad_c },
                    )?,
                    _ => unreachable!(),
                };
                let rec = IterationRecord {
                    l_cls: l_cls_sum / t,
                    l_stl: l_stl_sum / t,
                    cosine: s,
                    w_star: None,
                    lambda: None,
                    xi: None,
                };
                (direction, rec)
            }
        };
        curves.push(record);

        for (i, d) in deltas.data_mut().iter_mut().zip(&direction) {
            *i -= config.step_size * d;
        }
        deltas = project_linf(&deltas, config.epsilon);
        debug_assert!(deltas.max_abs() <= config.epsilon + 1e-15);
    }

    let frac_negative_cosine = if config.iterations == 0 {
        0.0
    } else {
        negative as f64 / config.iterations as f64
    };
    Ok(AttackArtifact {
        version: ARTIFACT_VERSION,
        config: config.clone(),
        deltas,
        curves,
        frac_negative_cosine,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_blobs, DataConfig};
    use crate::nn::{pretrain, PretrainConfig};
    use crate::trigger::{Geometry, TriggerSpec};

    fn setup(seed: u64) -> (ModelState, Dataset, TriggerSpec) {
        let cfg = DataConfig {
            classes: 3,
            dim: 16,
            n_per_class: 20,
            separation: 6.0,
            severity: 3,
            seed,
        };
        let (clean, shifted) = make_blobs(&cfg).unwrap();
        let (model, _) = pretrain(
            &clean,
            &PretrainConfig {
                seed,
                ..PretrainConfig::default()
            },
        )
        .unwrap();
        let trigger = TriggerSpec::patch(Geometry::square_for(16), 0.15, 1.0);
        (model, shifted, trigger)
    }

    fn quick_config(seed: u64) -> AttackConfig {
        AttackConfig {
            iterations: 8,
            seed,
            ..AttackConfig::default()
        }
    }

    #[test]
    fn sample_task_respects_ratio_draws() {
        let (_, data, trigger) = setup(50);
        let mut rng = sub_stream(1, "task");
        let task = sample_task(&data, &trigger, (0.05, 0.20), (0.40, 0.60), &mut rng).unwrap();
        let n = data.len();
        assert!(
            !task.victim_idx.is_empty()
                && task.victim_idx.len() <= (0.20 * n as f64).ceil() as usize
        );
        assert!(task.support_idx.len() >= (0.40 * n as f64).floor() as usize);
        assert!(!task.benign_idx.is_empty());
        // disjoint roles covering the pool
        let mut all: Vec<usize> = task
            .victim_idx
            .iter()
            .chain(&task.support_idx)
            .chain(&task.benign_idx)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn three_samples_get_one_role_each() {
        let (_, data, trigger) = setup(51);
        let tiny = data.select(&[0, 1, 2]);
        let mut rng = sub_stream(2, "task");
        let task = sample_task(&tiny, &trigger, (0.05, 0.20), (0.40, 0.60), &mut rng).unwrap();
        assert_eq!(task.victim_idx.len(), 1);
        assert_eq!(task.support_idx.len(), 1);
        assert_eq!(task.benign_idx.len(), 1);

        let two = data.select(&[0, 1]);
        let mut rng = sub_stream(2, "task");
        assert!(sample_task(&two, &trigger, (0.05, 0.20), (0.40, 0.60), &mut rng).is_err());
    }

    #[test]
    fn same_seed_gives_identical_partitions() {
        let (_, data, trigger) = setup(52);
        let draw = || {
            let mut rng = sub_stream(9, "task");
            sample_task(&data, &trigger, (0.05, 0.20), (0.40, 0.60), &mut rng).unwrap()
        };
        let (t1, t2) = (draw(), draw());
        assert_eq!(t1.victim_idx, t2.victim_idx);
        assert_eq!(t1.support_idx, t2.support_idx);
        assert_eq!(t1.benign_idx, t2.benign_idx);
    }

    #[test]
    fn identity_trigger_and_zero_delta_give_exactly_zero_stealth_gradient() {
        let (model, data, _) = setup(53);
        let identity = TriggerSpec::sig(Geometry::square_for(16), 10, 0.0);
        let mut rng = sub_stream(3, "task");
        let task = sample_task(&data, &identity, (0.05, 0.20), (0.40, 0.60), &mut rng).unwrap();
        let deltas = Tensor::zeros(vec![data.len(), data.dim()]);
        let surrogate = model.with_bn_mode(BnMode::BatchStats);
        let (pair, losses) = task_gradients(&surrogate, &task, &deltas, 0, None).unwrap();
        assert_eq!(losses.l_stl, 0.0);
        assert!(
            pair.stealth.iter().all(|&v| v == 0.0),
            "stealth gradient not exactly zero"
        );
    }

    #[test]
    fn real_trigger_couples_support_coordinates() {
        let (model, data, trigger) = setup(54);
        let mut rng = sub_stream(4, "task");
        let task = sample_task(&data, &trigger, (0.05, 0.20), (0.40, 0.60), &mut rng).unwrap();
        let deltas = Tensor::zeros(vec![data.len(), data.dim()]);
        let surrogate = model.with_bn_mode(BnMode::BatchStats);
        let (pair, _) = task_gradients(&surrogate, &task, &deltas, 0, None).unwrap();
        let dim = data.dim();
        let support_norm: f64 = task
            .support_idx
            .iter()
            .flat_map(|&r| pair.attack[r * dim..(r + 1) * dim].iter())
            .map(|v| v * v)
            .sum();
        assert!(support_norm > 0.0, "no coupling through batch statistics");
        // rows outside the support set carry no perturbation
        for &r in task.victim_idx.iter().chain(&task.benign_idx) {
            assert!(pair.attack[r * dim..(r + 1) * dim]
                .iter()
                .all(|&v| v == 0.0));
        }
    }

    #[test]
    fn running_stats_mode_is_rejected() {
        let (model, data, trigger) = setup(55);
        let mut rng = sub_stream(5, "task");
        let task = sample_task(&data, &trigger, (0.05, 0.20), (0.40, 0.60), &mut rng).unwrap();
        let deltas = Tensor::zeros(vec![data.len(), data.dim()]);
        assert!(matches!(
            task_gradients(&model, &task, &deltas, 0, None),
            Err(Error::NoCoupling)
        ));
    }

    #[test]
    fn projection_worked_examples() {
        let d = Tensor::row_vector(vec![0.2, -0.5]);
        let p = project_linf(&d, 0.3);
        assert_eq!(p.data(), &[0.2, -0.3]);

        let p = project_linf(&d, 0.0);
        assert_eq!(p.data(), &[0.0, 0.0]);

        // range clamp binds at application time
        let x = Tensor::row_vector(vec![0.95]);
        let delta = project_linf(&Tensor::row_vector(vec![0.06]), 16.0 / 255.0);
        let applied = apply_perturbation(&x, &delta).unwrap();
        assert_eq!(applied.data(), &[1.0]);
    }

    #[test]
    fn zero_iterations_leave_inputs_unchanged() {
        let (model, data, trigger) = setup(56);
        let cfg = AttackConfig {
            iterations: 0,
            ..quick_config(1)
        };
        let artifact = run_attack(&model, &data, &trigger, &cfg).unwrap();
        assert!(artifact.deltas.data().iter().all(|&v| v == 0.0));
        assert!(artifact.curves.is_empty());
        let applied = apply_perturbation(&data.x, &artifact.deltas).unwrap();
        assert_eq!(applied, data.x);
    }

    #[test]
    fn feasibility_holds_even_with_aggressive_steps() {
        let (model, data, trigger) = setup(57);
        let cfg = AttackConfig {
            iterations: 5,
            step_size: 10.0,
            ..quick_config(2)
        };
        let artifact = run_attack(&model, &data, &trigger, &cfg).unwrap();
        assert!(artifact.deltas.max_abs() <= cfg.epsilon + 1e-15);
    }

    #[test]
    fn attack_runs_are_bit_reproducible() {
        let (model, data, trigger) = setup(58);
        let cfg = quick_config(3);
        let a1 = run_attack(&model, &data, &trigger, &cfg).unwrap();
        let a2 = run_attack(&model, &data, &trigger, &cfg).unwrap();
        assert_eq!(a1.to_json().unwrap(), a2.to_json().unwrap());
        let back = AttackArtifact::from_json(&a1.to_json().unwrap()).unwrap();
        assert_eq!(back.deltas.bits(), a1.deltas.bits());
    }

    #[test]
    fn recorded_cosine_matches_recomputation_from_observed_gradients() {
        let (model, data, trigger) = setup(59);
        let cfg = quick_config(4);
        let mut seen: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        let artifact = run_attack_with_observer(&model, &data, &trigger, &cfg, |_, a, c| {
            seen.push((a.to_vec(), c.to_vec()));
        })
        .unwrap();
        assert_eq!(seen.len(), artifact.curves.len());
        for (rec, (a, c)) in artifact.curves.iter().zip(&seen) {
            let s = align::cosine(a, c, cfg.eps_num);
            assert_eq!(s.to_bits(), rec.cosine.to_bits());
        }
    }

    #[test]
    fn euclid_mode_equals_ours_with_kappa_zero_bitwise() {
        let (model, data, trigger) = setup(60);
        let ours0 = AttackConfig {
            kappa: 0.0,
            objective_mode: ObjectiveMode::Ours,
            ..quick_config(5)
        };
        let euclid = AttackConfig {
            objective_mode: ObjectiveMode::EuclidTr,
            ..ours0.clone()
        };
        let a1 = run_attack(&model, &data, &trigger, &ours0).unwrap();
        let a2 = run_attack(&model, &data, &trigger, &euclid).unwrap();
        assert_eq!(a1.deltas.bits(), a2.deltas.bits());
    }

    #[test]
    fn fixed_task_descent_is_monotone_at_tiny_steps() {
        let (model, data, trigger) = setup(61);
        let surrogate = model.with_bn_mode(BnMode::BatchStats);
        let mut rng = sub_stream(6, "task");
        let task = sample_task(&data, &trigger, (0.05, 0.20), (0.40, 0.60), &mut rng).unwrap();
        let mut deltas = Tensor::zeros(vec![data.len(), data.dim()]);
        let mut last = f64::INFINITY;
        for _ in 0..30 {
            let (pair, losses) = task_gradients(&surrogate, &task, &deltas, 0, None).unwrap();
            assert!(losses.l_cls <= last + 1e-12, "{} > {}", losses.l_cls, last);
            last = losses.l_cls;
            for (d, g) in deltas.data_mut().iter_mut().zip(&pair.attack) {
                *d -= 1e-4 * g;
            }
            deltas = project_linf(&deltas, 16.0 / 255.0);
        }
    }

    #[test]
    fn defaults_match_the_published_settings() {
        let cfg = AttackConfig::default();
        assert_eq!(cfg.iterations, 500);
        assert_eq!(cfg.tasks_per_iter, 1);
        assert_eq!(cfg.step_size, 0.008);
        assert_eq!(cfg.epsilon, 16.0 / 255.0);
        assert_eq!(cfg.gamma, 0.5);
        assert_eq!(cfg.kappa, 10.0);
        assert_eq!(cfg.victim_ratio, (0.05, 0.20));
        assert_eq!(cfg.support_ratio, (0.40, 0.60));
    }

    #[test]
    fn multi_task_aggregation_averages_gradients() {
        let (model, data, trigger) = setup(63);
        let cfg = AttackConfig {
            iterations: 3,
            tasks_per_iter: 3,
            ..quick_config(9)
        };
        let mut seen = Vec::new();
        let artifact = run_attack_with_observer(&model, &data, &trigger, &cfg, |_, a, c| {
            seen.push((a.to_vec(), c.to_vec()));
        })
        .unwrap();
        assert_eq!(artifact.curves.len(), 3);
        assert!(artifact.deltas.max_abs() <= cfg.epsilon + 1e-15);
        // recorded cosine is computed from the T-averaged gradients
        for (rec, (a, c)) in artifact.curves.iter().zip(&seen) {
            let s = align::cosine(a, c, cfg.eps_num);
            assert_eq!(s.to_bits(), rec.cosine.to_bits());
        }
        // the same seed with T=1 consumes fewer rng draws, so trajectories differ
        let single = AttackConfig {
            tasks_per_iter: 1,
            ..cfg.clone()
        };
        let a1 = run_attack(&model, &data, &trigger, &single).unwrap();
        assert_ne!(a1.deltas.bits(), artifact.deltas.bits());
    }

    #[test]
    fn augmentation_is_deterministic_and_bounded() {
        let rows = Tensor::from_rows(&[vec![0.5; 8], vec![0.1; 8]]).unwrap();
        let mut r1 = sub_stream(7, "aug");
        let mut r2 = sub_stream(7, "aug");
        let a = augment_rows(&rows, 0.05, &mut r1);
        let b = augment_rows(&rows, 0.05, &mut r2);
        assert_eq!(a.bits(), b.bits());
        for (x, y) in a.data().iter().zip(rows.data()) {
            assert!((x - y).abs() <= 0.15 + 1e-12);
            assert!(*x >= 0.0 && *x <= 1.0);
        }
        let mut r3 = sub_stream(7, "aug");
        let same = augment_rows(&rows, 0.0, &mut r3);
        assert_eq!(same, rows);
    }

    #[test]
    fn attack_loss_drops_over_a_seeded_run() {
        let (model, data, trigger) = setup(62);
        let cfg = AttackConfig {
            iterations: 60,
            objective_mode: ObjectiveMode::Ours,
            ..quick_config(8)
        };
        let artifact = run_attack(&model, &data, &trigger, &cfg).unwrap();
        let first = artifact.curves.first().unwrap().l_cls;
        let last = artifact.curves.last().unwrap().l_cls;
        assert!(last < first, "attack loss did not fall: {first} -> {last}");
    }
}
