//! TOML experiment config for `train` and `sweep`.
//!
//! ```toml
//! seed = 7
//!
//! [env]
//! rewards = [0.0, 1.0, 2.0]
//!
//! [rpg]
//! divergence = "urkl"
//! style = "reinforce"
//!
//! [train]
//! lr = 0.1
//! iterations = 200
//! ref_every_k = 10
//! ```
//!
//! Every section except `[env]` is optional. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use rpg_core::clipping::{AdvantageFlow, ClipParams};
use rpg_core::divergences::DivergenceSpec;
use rpg_core::objectives::{LossStyle, RpgConfig};
use rpg_core::training::{BanditEnv, BatchMode, RefUpdateRule, TrainConfig};
use rpg_core::RpgError;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const DEFAULT_BETA: f64 = 1e-4;
pub const DEFAULT_GRAD_NORM_CLIP: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Gradcheck,
    AuditGrpo,
    Train,
    Estimate,
    Sweep,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::Gradcheck => "gradcheck",
            Self::AuditGrpo => "audit-grpo",
            Self::Train => "train",
            Self::Estimate => "estimate",
            Self::Sweep => "sweep",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Optional; when present it must match the subcommand.
    pub command: Option<Command>,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub env: EnvSection,
    #[serde(default)]
    pub rpg: RpgSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub clip: ClipSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    /// Deterministic reward per arm.
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RpgSection {
    /// `fkl`, `rkl`, `ufkl` or `urkl`.
    pub divergence: String,
    pub style: LossStyle,
    pub beta: f64,
    pub include_z: bool,
}

impl Default for RpgSection {
    fn default() -> Self {
        Self { divergence: "rkl".into(), style: LossStyle::Differentiable, beta: DEFAULT_BETA, include_z: true }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs_per_iter: usize,
    pub iterations: usize,
    /// Reset the reference every `k` iterations.
    pub ref_every_k: Option<usize>,
    /// Reset the reference once `KL(π_θ ‖ π̃_old)` exceeds this value.
    pub ref_kl_threshold: Option<f64>,
    /// `inf` disables norm clipping.
    pub grad_norm_clip: f64,
    pub batch_mode: BatchMode,
    pub line_search: bool,
    pub advantage_flow: AdvantageFlow,
    pub initial_logits: Option<Vec<f64>>,
    pub initial_reference: Option<Vec<f64>>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            lr: 0.1,
            batch_size: 64,
            epochs_per_iter: 1,
            iterations: 200,
            ref_every_k: None,
            ref_kl_threshold: None,
            grad_norm_clip: DEFAULT_GRAD_NORM_CLIP,
            batch_mode: BatchMode::Sampled,
            line_search: false,
            advantage_flow: AdvantageFlow::Differentiable,
            initial_logits: None,
            initial_reference: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipSection {
    pub enabled: bool,
    pub eps_low: f64,
    pub eps_high: f64,
    pub c: f64,
}

impl Default for ClipSection {
    fn default() -> Self {
        let p = ClipParams::<f64>::default();
        Self { enabled: true, eps_low: p.eps_low, eps_high: p.eps_high, c: p.c }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub seeds: Vec<u64>,
}

/// Everything a training run needs, with defaults filled in.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedRun {
    pub rewards: Vec<f64>,
    pub train: TrainConfig<f64>,
}

impl ResolvedRun {
    pub fn env(&self) -> CliResult<BanditEnv<f64>> {
        BanditEnv::new(self.rewards.clone()).map_err(|e| section_error("env", e))
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut out = self.clone();
        out.train.seed = seed;
        out
    }
}

fn section_error(section: &str, e: RpgError) -> CliError {
    let msg = match e {
        RpgError::InvalidConfig(m) => m,
        other => other.to_string(),
    };
    CliError::Config(format!("[{section}] {msg}"))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("{origin}: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn check_command(&self, expected: Command) -> CliResult<()> {
        match self.command {
            Some(c) if c != expected => Err(CliError::Config(format!(
                "key `command`: config is for `{}` but was run with `{}`",
                c.name(),
                expected.name()
            ))),
            _ => Ok(()),
        }
    }

    pub fn resolve(&self) -> CliResult<ResolvedRun> {
        let env = BanditEnv::new(self.env.rewards.clone()).map_err(|e| section_error("env", e))?;

        let spec: DivergenceSpec =
            self.rpg.divergence.parse().map_err(|e: RpgError| section_error("rpg", e))?;
        let mut rpg = RpgConfig::new(spec, self.rpg.style, self.rpg.beta).map_err(|e| section_error("rpg", e))?;
        rpg.include_z = self.rpg.include_z;

        let clip = if self.clip.enabled {
            let c = &self.clip;
            Some(ClipParams::new(c.eps_low, c.eps_high, c.c).map_err(|e| section_error("clip", e))?)
        } else {
            None
        };

        let t = &self.train;
        let ref_update = match (t.ref_every_k, t.ref_kl_threshold) {
            (Some(_), Some(_)) => {
                return Err(CliError::Config(
                    "[train] set at most one of `ref_every_k` and `ref_kl_threshold`".into(),
                ))
            }
            (Some(k), None) => RefUpdateRule::EveryK { k },
            (None, Some(kappa)) => RefUpdateRule::KlThreshold { kappa },
            (None, None) => RefUpdateRule::Never,
        };
        let grad_norm_clip = if t.grad_norm_clip == f64::INFINITY { None } else { Some(t.grad_norm_clip) };

        let train = TrainConfig {
            rpg,
            clip,
            advantage_flow: t.advantage_flow,
            lr: t.lr,
            batch_size: t.batch_size,
            epochs_per_iter: t.epochs_per_iter,
            iterations: t.iterations,
            ref_update,
            grad_norm_clip,
            seed: self.seed,
            batch_mode: t.batch_mode,
            line_search: t.line_search,
            initial_logits: t.initial_logits.clone(),
            initial_reference: t.initial_reference.clone(),
        };
        train.validate(env.n_arms()).map_err(|e| section_error("train", e))?;
        Ok(ResolvedRun { rewards: self.env.rewards.clone(), train })
    }
}
