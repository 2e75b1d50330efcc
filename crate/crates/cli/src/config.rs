//! Experiment configuration file (TOML) and command-line overrides. Flags
//! always win over file values.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use ttalab_core::attack::ObjectiveMode;
use ttalab_core::pipeline::ExperimentSpec;
use ttalab_core::tta::{DefenseKind, TtaMethod};

/// Sweep axes: empty vectors mean "use the spec's single value".
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepAxes {
    pub attacker_ratio: Vec<f64>,
    pub victim_fraction: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub severity: Vec<u8>,
    pub tta_method: Vec<TtaMethod>,
    pub objective_mode: Vec<ObjectiveMode>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub spec: ExperimentSpec,
    pub sweep: SweepAxes,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        config.spec.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

/// Overrides shared by every subcommand; each maps onto one config path.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Root seed for all derived sub-streams.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Objective mode: ours, cls-only, cls-plus-stl, pcgrad, cagrad, euclid-tr.
    #[arg(long, global = true)]
    pub mode: Option<String>,
    /// TTA method: tent, rpl, entropy-filtered.
    #[arg(long, global = true)]
    pub tta: Option<String>,
    /// l-infinity perturbation budget.
    #[arg(long, global = true)]
    pub eps: Option<f64>,
    /// Trust-radius factor.
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    /// Misalignment scaling of the metric.
    #[arg(long, global = true)]
    pub kappa: Option<f64>,
    /// Shift severity of the deployment data (0..=5).
    #[arg(long, global = true)]
    pub severity: Option<u8>,
    /// Attacker-to-user volume ratio.
    #[arg(long, global = true)]
    pub attacker_ratio: Option<f64>,
    /// Triggered fraction of user rows.
    #[arg(long, global = true)]
    pub victim_frac: Option<f64>,
    /// Serving defense: none, medbn, ema.
    #[arg(long, global = true)]
    pub defense: Option<String>,
    /// Server-side adaptation step size.
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    /// Attack outer iterations.
    #[arg(long, global = true)]
    pub iterations: Option<usize>,
}

pub fn parse_mode(s: &str) -> Result<ObjectiveMode> {
    Ok(match s.to_ascii_lowercase().as_str() {
        "ours" => ObjectiveMode::Ours,
        "cls-only" | "cls_only" => ObjectiveMode::ClsOnly,
        "cls-plus-stl" | "cls_plus_stl" | "sum" => ObjectiveMode::ClsPlusStl,
        "pcgrad" => ObjectiveMode::PcGrad,
        "cagrad" => ObjectiveMode::CaGrad,
        "euclid-tr" | "euclid_tr" | "euclidean" => ObjectiveMode::EuclidTr,
        other => bail!("unknown objective mode '{other}'"),
    })
}

pub fn parse_tta(s: &str) -> Result<TtaMethod> {
    Ok(match s.to_ascii_lowercase().as_str() {
        "tent" => TtaMethod::Tent,
        "rpl" => TtaMethod::Rpl,
        "entropy-filtered" | "entropy_filtered" | "eata-lite" => TtaMethod::EntropyFiltered,
        other => bail!("unknown TTA method '{other}'"),
    })
}

pub fn parse_defense(s: &str) -> Result<DefenseKind> {
    Ok(match s.to_ascii_lowercase().as_str() {
        "none" => DefenseKind::None,
        "medbn" => DefenseKind::MedBn,
        "ema" => DefenseKind::Ema,
        other => bail!("unknown defense '{other}'"),
    })
}

impl Overrides {
    pub fn apply(&self, config: &mut ExperimentConfig) -> Result<()> {
        let spec = &mut config.spec;
        if let Some(seed) = self.seed {
            spec.seed = seed;
        }
        if let Some(mode) = &self.mode {
            spec.attack.objective_mode = parse_mode(mode)?;
        }
        if let Some(tta) = &self.tta {
            spec.tta.method = parse_tta(tta)?;
        }
        if let Some(eps) = self.eps {
            spec.attack.epsilon = eps;
        }
        if let Some(gamma) = self.gamma {
            spec.attack.gamma = gamma;
        }
        if let Some(kappa) = self.kappa {
            spec.attack.kappa = kappa;
        }
        if let Some(severity) = self.severity {
            spec.data.severity = severity;
        }
        if let Some(ratio) = self.attacker_ratio {
            spec.stream.attacker_ratio = ratio;
        }
        if let Some(frac) = self.victim_frac {
            spec.stream.victim_fraction = frac;
        }
        if let Some(defense) = &self.defense {
            spec.tta.defense = parse_defense(defense)?;
        }
        if let Some(lr) = self.lr {
            spec.tta.lr = lr;
        }
        if let Some(iters) = self.iterations {
            spec.attack.iterations = iters;
        }
        spec.validate()?;
        Ok(())
    }
}
