//! Iterative off-policy training on multi-armed bandits.
//!
//! Each iteration draws a batch from the current reference `π̃_old`, takes
//! `K` gradient steps on the (optionally clipped) surrogate with the batch
//! mean reward as baseline, and then applies the reference-update rule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::clipping::{dual_clip_loss, reinforce_clip_loss, AdvantageFlow, ClipParams, ReinforceClipInput};
use crate::divergences::{divergence_exact, kl_exact, Direction, Normalization};
use crate::error::{check_len, Result, RpgError};
use crate::measures::{enumeration_batch, rng_from_seed, sample_batch_with, Batch, FiniteMeasure, SoftmaxPolicy};
use crate::objectives::{
    exact_objective, kl_component, log_ratio_offset, register_policy, surrogate_term, LossStyle, PolicyVars,
    RpgConfig,
};
use crate::scalar::{norm2, Scalar};

/// Bandit with a deterministic reward per arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditEnv<T> {
    rewards: Vec<T>,
}

impl<T: Scalar> BanditEnv<T> {
    pub fn new(rewards: Vec<T>) -> Result<Self> {
        if rewards.len() < 2 {
            return Err(RpgError::InvalidConfig(format!("a bandit needs at least 2 arms, got {}", rewards.len())));
        }
        if let Some(x) = rewards.iter().position(|r| !r.is_finite()) {
            return Err(RpgError::InvalidConfig(format!("reward of arm {x} is not finite")));
        }
        Ok(Self { rewards })
    }

    pub fn n_arms(&self) -> usize {
        self.rewards.len()
    }

    pub fn rewards(&self) -> &[T] {
        &self.rewards
    }

    pub fn reward(&self, arm: usize) -> T {
        self.rewards[arm]
    }

    pub fn best_arm(&self) -> usize {
        (0..self.rewards.len())
            .fold(0, |best, x| if self.rewards[x] > self.rewards[best] { x } else { best })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum RefUpdateRule<T> {
    /// `π_old ← π_θ` after every iteration divisible by `k`.
    EveryK { k: usize },
    /// `π_old ← π_θ` once `KL(π_θ ‖ π̃_old)` exceeds `kappa`.
    KlThreshold { kappa: T },
    Never,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchMode {
    #[default]
    Sampled,
    /// One entry per arm weighted by `π̃_old`; the batch size is ignored.
    Enumeration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig<T> {
    pub rpg: RpgConfig<T>,
    #[serde(default)]
    pub clip: Option<ClipParams<T>>,
    #[serde(default)]
    pub advantage_flow: AdvantageFlow,
    pub lr: T,
    pub batch_size: usize,
    pub epochs_per_iter: usize,
    pub iterations: usize,
    pub ref_update: RefUpdateRule<T>,
    #[serde(default)]
    pub grad_norm_clip: Option<T>,
    pub seed: u64,
    #[serde(default)]
    pub batch_mode: BatchMode,
    /// Halve the step until the exact objective does not decrease.
    #[serde(default)]
    pub line_search: bool,
    /// Starting logits; uniform when absent.
    #[serde(default)]
    pub initial_logits: Option<Vec<T>>,
    /// Starting reference measure; the initial policy when absent.
    #[serde(default)]
    pub initial_reference: Option<Vec<T>>,
}

impl<T: Scalar> TrainConfig<T> {
    /// Unclipped, never-updated reference, sampled batches of 64.
    pub fn new(rpg: RpgConfig<T>, lr: T, iterations: usize, seed: u64) -> Self {
        Self {
            rpg,
            clip: None,
            advantage_flow: AdvantageFlow::default(),
            lr,
            batch_size: 64,
            epochs_per_iter: 1,
            iterations,
            ref_update: RefUpdateRule::Never,
            grad_norm_clip: None,
            seed,
            batch_mode: BatchMode::Sampled,
            line_search: false,
            initial_logits: None,
            initial_reference: None,
        }
    }

    pub fn validate(&self, n_arms: usize) -> Result<()> {
        self.rpg.validate()?;
        if let Some(p) = &self.clip {
            p.validate()?;
        }
        let invalid = |msg: String| Err(RpgError::InvalidConfig(msg));
        if !(self.lr > T::zero()) || !self.lr.is_finite() {
            return invalid(format!("lr must be > 0, got {}", self.lr));
        }
        if self.batch_size == 0 || self.epochs_per_iter == 0 || self.iterations == 0 {
            return invalid("batch_size, epochs_per_iter and iterations must all be >= 1".into());
        }
        match self.ref_update {
            RefUpdateRule::EveryK { k: 0 } => return invalid("ref_update.every_k needs k >= 1".into()),
            RefUpdateRule::KlThreshold { kappa } if !(kappa > T::zero()) => {
                return invalid(format!("ref_update.kl_threshold needs kappa > 0, got {kappa}"))
            }
            _ => {}
        }
        if let Some(c) = self.grad_norm_clip {
            if !(c > T::zero()) {
                return invalid(format!("grad_norm_clip must be > 0, got {c}"));
            }
        }
        if let Some(l) = &self.initial_logits {
            check_len(n_arms, l.len())?;
        }
        if let Some(r) = &self.initial_reference {
            check_len(n_arms, r.len())?;
        }
        Ok(())
    }
}

/// One row of the training trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord<T> {
    /// 1-based.
    pub iteration: usize,
    /// Exact objective against the current reference.
    pub j_exact: T,
    /// Surrogate loss averaged over the epochs of the iteration.
    pub loss_mean: T,
    pub mean_reward: T,
    pub entropy: T,
    /// Configured divergence between `π_θ` and the current reference.
    pub div_to_old: T,
    /// Configured divergence between `π_θ` and the initial reference.
    pub div_to_initial: T,
    /// Norm of the last epoch's gradient before norm clipping.
    pub grad_norm: T,
    pub ref_updated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace<T> {
    pub records: Vec<TrainRecord<T>>,
    pub final_logits: Vec<T>,
}

impl<T: Scalar> TrainTrace<T> {
    pub fn final_policy(&self) -> Result<SoftmaxPolicy<T>> {
        SoftmaxPolicy::new(self.final_logits.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError<T: std::fmt::Debug> {
    #[error(transparent)]
    Invalid(#[from] RpgError),
    #[error("training diverged at iteration {iteration}, epoch {epoch}: {reason}")]
    Diverged { iteration: usize, epoch: usize, reason: String, partial: TrainTrace<T> },
}

/// `θ − α·g`, with `g` rescaled to norm `clip` when it is longer.
pub fn optimizer_step<T: Scalar>(params: &[T], grad: &[T], lr: T, grad_norm_clip: Option<T>) -> Result<Vec<T>> {
    check_len(params.len(), grad.len())?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(RpgError::NumericalError("non-finite gradient".into()));
    }
    let norm = norm2(grad);
    let scale = match grad_norm_clip {
        Some(c) if norm > c => c / norm,
        _ => T::one(),
    };
    Ok(params.iter().zip(grad).map(|(&p, &g)| p - lr * (scale * g)).collect())
}

/// Whether the reference should be reset to the current policy after the
/// given (1-based) iteration.
pub fn reference_update_check<T: Scalar>(
    iteration: usize,
    policy: &SoftmaxPolicy<T>,
    old: &FiniteMeasure<T>,
    rule: &RefUpdateRule<T>,
) -> Result<bool> {
    Ok(match *rule {
        RefUpdateRule::EveryK { k } => k > 0 && iteration.is_multiple_of(k),
        RefUpdateRule::KlThreshold { kappa } => kl_exact(&policy.probs(), &old.probs())? > kappa,
        RefUpdateRule::Never => false,
    })
}

/// The training loss on a batch.
///
/// Without clip parameters this is [`crate::objectives::surrogate_loss`].
/// With them, samples whose weight lies strictly inside `(1 − ε1, 1 + ε2)`
/// keep the unclipped term; the others go through [`dual_clip_loss`]
/// (differentiable style) or [`reinforce_clip_loss`] (REINFORCE style). For
/// forward variants only the reward part is clipped and the regularizer
/// term is added unclipped.
pub fn training_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &PolicyVars,
    rpg: &RpgConfig<T>,
    clip: Option<&ClipParams<T>>,
    flow: AdvantageFlow,
    batch: &Batch<T>,
    baseline: T,
) -> Result<Var> {
    let spec = rpg.spec();
    let z = batch.z_old();
    let mut terms = Vec::with_capacity(batch.len());
    for (mass, s) in batch.weighted() {
        let lp = *pv
            .log_probs
            .get(s.outcome)
            .ok_or(RpgError::OutcomeOutOfRange { outcome: s.outcome, n: pv.log_probs.len() })?;
        let log_old = log_ratio_offset(spec, s, z);
        let advantage = s.reward - baseline;
        let log_w_value = tape.value(lp) - log_old;
        let w_value = log_w_value.exp();

        let term = match clip {
            Some(p) if !p.in_band(w_value) => match rpg.style {
                LossStyle::Reinforce => {
                    let c_kl = rpg.beta * kl_component(spec, w_value, log_w_value);
                    let input = ReinforceClipInput { log_w: log_w_value, advantage, c_kl };
                    reinforce_clip_loss(tape, lp, input, p)?.0
                }
                LossStyle::Differentiable => {
                    let log_w = tape.add_scalar(lp, -log_old);
                    let w = tape.exp(log_w);
                    let a_hat = match (spec.direction, spec.normalization) {
                        (Direction::Reverse, Normalization::Normalized) => {
                            let t = tape.scale(log_w, -rpg.beta);
                            tape.add_scalar(t, advantage - rpg.beta)
                        }
                        (Direction::Reverse, Normalization::Unnormalized) => {
                            let t = tape.scale(log_w, -rpg.beta);
                            tape.add_scalar(t, advantage)
                        }
                        (Direction::Forward, _) => tape.constant(advantage),
                    };
                    let a_hat = match flow {
                        AdvantageFlow::Differentiable => a_hat,
                        AdvantageFlow::Detached => tape.stop_gradient(a_hat),
                    };
                    let clipped = dual_clip_loss(tape, w, a_hat, p);
                    match (spec.direction, spec.normalization) {
                        (Direction::Reverse, _) => clipped,
                        (Direction::Forward, Normalization::Normalized) => {
                            let reg = tape.scale(lp, -rpg.beta);
                            tape.add(clipped, reg)
                        }
                        (Direction::Forward, Normalization::Unnormalized) => {
                            let d = tape.sub(w, log_w);
                            let d = tape.add_scalar(d, -T::one());
                            let reg = tape.scale(d, rpg.beta);
                            tape.add(clipped, reg)
                        }
                    }
                }
            },
            _ => surrogate_term(tape, rpg, lp, log_old, advantage),
        };
        terms.push((mass, term));
    }
    let mean = tape.weighted_sum(&terms);
    Ok(tape.scale(mean, rpg.loss_scale(z)))
}

/// Loss value and gradient of [`training_loss`] at `policy`.
pub fn loss_and_gradient<T: Scalar>(
    cfg: &TrainConfig<T>,
    policy: &SoftmaxPolicy<T>,
    batch: &Batch<T>,
    baseline: T,
) -> Result<(T, Vec<T>)> {
    let mut tape = Tape::new();
    let pv = register_policy(&mut tape, policy)?;
    let loss = training_loss(&mut tape, &pv, &cfg.rpg, cfg.clip.as_ref(), cfg.advantage_flow, batch, baseline)?;
    Ok((tape.value(loss), tape.backward(loss)))
}

const MAX_HALVINGS: usize = 60;

/// Runs the full training loop. Deterministic for a fixed configuration.
pub fn run_training<T: Scalar>(env: &BanditEnv<T>, cfg: &TrainConfig<T>) -> std::result::Result<TrainTrace<T>, TrainError<T>> {
    let n = env.n_arms();
    cfg.validate(n)?;
    let mut policy = match &cfg.initial_logits {
        Some(l) => SoftmaxPolicy::new(l.clone())?,
        None => SoftmaxPolicy::uniform(n)?,
    };
    let initial_ref = match &cfg.initial_reference {
        Some(w) => FiniteMeasure::new(w.clone())?,
        None => policy.to_measure(),
    };
    let mut old = initial_ref.clone();
    let mut rng = rng_from_seed(cfg.seed);
    let spec = cfg.rpg.spec();
    let mut records = Vec::with_capacity(cfg.iterations);

    let diverged = |records: &Vec<TrainRecord<T>>, policy: &SoftmaxPolicy<T>, iteration, epoch, reason: String| {
        TrainError::Diverged {
            iteration,
            epoch,
            reason,
            partial: TrainTrace { records: records.clone(), final_logits: policy.logits().to_vec() },
        }
    };

    for iteration in 1..=cfg.iterations {
        let reward = |x: usize| env.reward(x);
        let batch = match cfg.batch_mode {
            BatchMode::Sampled => sample_batch_with(&old, reward, cfg.batch_size, &mut rng)?,
            BatchMode::Enumeration => enumeration_batch(&old, reward)?,
        };
        let baseline = batch.mean_reward();

        let mut loss_total = T::zero();
        let mut grad_norm = T::zero();
        for epoch in 1..=cfg.epochs_per_iter {
            let (loss, grad) = match loss_and_gradient(cfg, &policy, &batch, baseline) {
                Ok(v) => v,
                Err(e) => return Err(diverged(&records, &policy, iteration, epoch, e.to_string())),
            };
            grad_norm = norm2(&grad);
            if !loss.is_finite() || !grad_norm.is_finite() {
                let reason = format!("loss {loss}, gradient norm {grad_norm}");
                return Err(diverged(&records, &policy, iteration, epoch, reason));
            }
            loss_total = loss_total + loss;

            let mut lr = cfg.lr;
            let j_before = if cfg.line_search {
                Some(exact_objective(&cfg.rpg, &policy, &old, env.rewards())?)
            } else {
                None
            };
            let mut halvings = 0;
            let next = loop {
                let logits = optimizer_step(policy.logits(), &grad, lr, cfg.grad_norm_clip)?;
                let candidate = match SoftmaxPolicy::new(logits) {
                    Ok(p) => p,
                    Err(e) => return Err(diverged(&records, &policy, iteration, epoch, e.to_string())),
                };
                let Some(j0) = j_before else { break candidate };
                let j1 = exact_objective(&cfg.rpg, &candidate, &old, env.rewards())?;
                if j1 >= j0 {
                    break candidate;
                }
                halvings += 1;
                if halvings > MAX_HALVINGS {
                    break policy.clone();
                }
                lr = lr * T::lit(0.5);
            };
            policy = next;
        }

        let ref_updated = reference_update_check(iteration, &policy, &old, &cfg.ref_update)?;
        if ref_updated {
            old = policy.to_measure();
        }
        let record = TrainRecord {
            iteration,
            j_exact: exact_objective(&cfg.rpg, &policy, &old, env.rewards())?,
            loss_mean: loss_total / T::lit(cfg.epochs_per_iter as f64),
            mean_reward: baseline,
            entropy: policy.entropy(),
            div_to_old: divergence_exact(spec, &policy, &old)?,
            div_to_initial: divergence_exact(spec, &policy, &initial_ref)?,
            grad_norm,
            ref_updated,
        };
        if !record.j_exact.is_finite() || !record.div_to_old.is_finite() {
            return Err(diverged(&records, &policy, iteration, cfg.epochs_per_iter, "non-finite metrics".into()));
        }
        records.push(record);
    }

    Ok(TrainTrace { records, final_logits: policy.logits().to_vec() })
}
