//! KL-regularized objectives `J(θ) = E_{π_θ}[R] − β·D`, their exact
//! gradients, and the surrogate losses whose autodiff gradient is `−∇J`.
//!
//! Eight variants: {forward, reverse} × {normalized, unnormalized} ×
//! {differentiable, REINFORCE-style}. Samples always come from the
//! normalized reference `π̃_old = π_old / Z_old`. The importance weight is
//! `w = π_θ/π_old` against the raw measure for the unnormalized variants and
//! `w̃ = π_θ/π̃_old` for the normalized ones.
//!
//! | variant | gradient weight `W(x)` (times `∇log π_θ(x)`, mean over `π̃_old`) |
//! |---------|------------------------------------------------|
//! | FKL     | `w̃R + β`                                       |
//! | RKL     | `w̃(R − β(ln w̃ + 1))`                            |
//! | UFKL    | `Z(wR − β(w − 1))`                              |
//! | URKL    | `Z·w(R − β ln w)`                               |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::divergences::{divergence_exact, Direction, DivergenceSpec, Normalization};
use crate::error::{check_len, Result, RpgError};
use crate::measures::{Batch, FiniteMeasure, OutcomeSample, SoftmaxPolicy};
use crate::scalar::{dot, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossStyle {
    /// Importance-weighted loss differentiated through `w`.
    Differentiable,
    /// `−SG(W(x))·log π_θ(x)`.
    Reinforce,
}

impl LossStyle {
    pub const ALL: [Self; 2] = [Self::Differentiable, Self::Reinforce];

    pub fn name(self) -> &'static str {
        match self {
            Self::Differentiable => "differentiable",
            Self::Reinforce => "reinforce",
        }
    }
}

/// Selects one of the eight surrogate losses plus the regularization strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RpgConfig<T> {
    pub direction: Direction,
    pub normalization: Normalization,
    pub style: LossStyle,
    pub beta: T,
    /// Multiply unnormalized losses by `Z_old`. Dropping it rescales the
    /// gradient by `1/Z_old` without changing its direction.
    #[serde(default = "default_true")]
    pub include_z: bool,
}

fn default_true() -> bool {
    true
}

impl<T: Scalar> RpgConfig<T> {
    pub fn new(spec: DivergenceSpec, style: LossStyle, beta: T) -> Result<Self> {
        let cfg = Self {
            direction: spec.direction,
            normalization: spec.normalization,
            style,
            beta,
            include_z: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= T::zero()) || !self.beta.is_finite() {
            return Err(RpgError::InvalidConfig(format!("beta must be >= 0, got {}", self.beta)));
        }
        Ok(())
    }

    /// All eight (direction × normalization × style) variants.
    pub fn all_variants(beta: T) -> Result<Vec<Self>> {
        let mut out = Vec::with_capacity(8);
        for spec in DivergenceSpec::ALL {
            for style in LossStyle::ALL {
                out.push(Self::new(spec, style, beta)?);
            }
        }
        Ok(out)
    }

    pub fn spec(&self) -> DivergenceSpec {
        DivergenceSpec::new(self.direction, self.normalization)
    }

    pub fn name(&self) -> String {
        format!("{}-{}", self.spec().name(), self.style.name())
    }

    /// Overall factor applied to the mean loss.
    pub fn loss_scale(&self, z_old: T) -> T {
        if self.normalization == Normalization::Unnormalized && self.include_z {
            z_old
        } else {
            T::one()
        }
    }
}

impl<T: Scalar> fmt::Display for RpgConfig<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (beta={})", self.name(), self.beta)
    }
}

impl FromStr for LossStyle {
    type Err = RpgError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| RpgError::InvalidConfig(format!("unknown loss style `{s}`")))
    }
}

/// Per-sample importance ratio in the log domain for a given variant:
/// `ln w` against the raw measure (unnormalized) or `ln w̃` (normalized).
pub fn log_ratio_offset<T: Scalar>(spec: DivergenceSpec, sample: &OutcomeSample<T>, z_old: T) -> T {
    match spec.normalization {
        Normalization::Normalized => sample.log_pi_old,
        Normalization::Unnormalized => sample.log_pi_old + z_old.ln(),
    }
}

/// The KL part of the gradient weight divided by `β`, so that
/// `W = w·(R − b) + β·kl_component` (ignoring `Z_old`).
pub fn kl_component<T: Scalar>(spec: DivergenceSpec, w: T, log_w: T) -> T {
    match (spec.direction, spec.normalization) {
        (Direction::Forward, Normalization::Normalized) => T::one(),
        (Direction::Reverse, Normalization::Normalized) => -w * (log_w + T::one()),
        (Direction::Forward, Normalization::Unnormalized) => T::one() - w,
        (Direction::Reverse, Normalization::Unnormalized) => -w * log_w,
    }
}

/// REINFORCE weight `W(x)` without the `Z_old` factor; `advantage` is `R − b`.
pub fn reinforce_weight<T: Scalar>(spec: DivergenceSpec, beta: T, advantage: T, log_w: T) -> T {
    let w = log_w.exp();
    w * advantage + beta * kl_component(spec, w, log_w)
}

/// Logits registered as tape parameters together with their log-softmax.
#[derive(Debug, Clone)]
pub struct PolicyVars {
    pub theta: Vec<Var>,
    pub log_probs: Vec<Var>,
}

pub fn register_policy<T: Scalar>(tape: &mut Tape<T>, policy: &SoftmaxPolicy<T>) -> Result<PolicyVars> {
    let theta = tape.params(policy.logits());
    let log_probs = tape.log_softmax(&theta)?;
    Ok(PolicyVars { theta, log_probs })
}

/// Unscaled per-sample loss term; `advantage` is `R − b`.
pub fn surrogate_term<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &RpgConfig<T>,
    log_prob: Var,
    log_old: T,
    advantage: T,
) -> Var {
    let spec = cfg.spec();
    let beta = cfg.beta;
    match cfg.style {
        LossStyle::Reinforce => {
            let log_w = tape.value(log_prob) - log_old;
            let weight = reinforce_weight(spec, beta, advantage, log_w);
            tape.scale(log_prob, -weight)
        }
        LossStyle::Differentiable => {
            let log_w = tape.add_scalar(log_prob, -log_old);
            let w = tape.exp(log_w);
            let reward_term = tape.scale(w, -advantage);
            let reg = match (spec.direction, spec.normalization) {
                // −β log π_θ
                (Direction::Forward, Normalization::Normalized) => tape.scale(log_prob, -beta),
                // β w̃ ln w̃
                (Direction::Reverse, Normalization::Normalized) => {
                    let wl = tape.mul(w, log_w);
                    tape.scale(wl, beta)
                }
                // β (w − ln w − 1)
                (Direction::Forward, Normalization::Unnormalized) => {
                    let d = tape.sub(w, log_w);
                    let d = tape.add_scalar(d, -T::one());
                    tape.scale(d, beta)
                }
                // β (w ln w − w)
                (Direction::Reverse, Normalization::Unnormalized) => {
                    let wl = tape.mul(w, log_w);
                    let d = tape.sub(wl, w);
                    tape.scale(d, beta)
                }
            };
            tape.add(reward_term, reg)
        }
    }
}

/// Batch surrogate loss `L̂(θ)`: the mass-weighted mean of the per-sample
/// terms, times `Z_old` for unnormalized variants when `include_z` is set.
/// The baseline is subtracted from every reward.
pub fn surrogate_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &PolicyVars,
    cfg: &RpgConfig<T>,
    batch: &Batch<T>,
    baseline: T,
) -> Result<Var> {
    cfg.validate()?;
    let spec = cfg.spec();
    let z = batch.z_old();
    let mut terms = Vec::with_capacity(batch.len());
    for (mass, s) in batch.weighted() {
        let lp = *pv
            .log_probs
            .get(s.outcome)
            .ok_or(RpgError::OutcomeOutOfRange { outcome: s.outcome, n: pv.log_probs.len() })?;
        let term = surrogate_term(tape, cfg, lp, log_ratio_offset(spec, s, z), s.reward - baseline);
        terms.push((mass, term));
    }
    let mean = tape.weighted_sum(&terms);
    Ok(tape.scale(mean, cfg.loss_scale(z)))
}

/// `J(θ) = Σ π_θ R − β·D` by enumeration.
pub fn exact_objective<T: Scalar>(
    cfg: &RpgConfig<T>,
    policy: &SoftmaxPolicy<T>,
    reference: &FiniteMeasure<T>,
    rewards: &[T],
) -> Result<T> {
    check_len(policy.len(), rewards.len())?;
    let expected_reward = dot(&policy.probs(), rewards);
    if cfg.beta == T::zero() {
        return Ok(expected_reward);
    }
    Ok(expected_reward - cfg.beta * divergence_exact(cfg.spec(), policy, reference)?)
}

/// `∇J(θ)` from the closed-form importance-weighted expressions, summed over
/// the reference support. The style field of `cfg` is irrelevant here and
/// `Z_old` is always included.
///
/// The reference must have full support: the importance-sampled forms only
/// see outcomes the reference can produce.
pub fn exact_gradient<T: Scalar>(
    cfg: &RpgConfig<T>,
    policy: &SoftmaxPolicy<T>,
    reference: &FiniteMeasure<T>,
    rewards: &[T],
) -> Result<Vec<T>> {
    cfg.validate()?;
    check_len(policy.len(), reference.len())?;
    check_len(policy.len(), rewards.len())?;
    if let Some(x) = (0..reference.len()).find(|&x| reference.weights()[x] == T::zero()) {
        return Err(RpgError::SupportError { outcome: x });
    }
    let spec = cfg.spec();
    let probs = policy.probs();
    let log_probs = policy.log_probs();
    let ref_probs = reference.probs();
    let z = reference.total_mass();
    let scale = if spec.is_normalized() { T::one() } else { z };

    let mut grad = vec![T::zero(); policy.len()];
    for x in 0..policy.len() {
        let log_old = if spec.is_normalized() { ref_probs[x].ln() } else { reference.weights()[x].ln() };
        let weight = scale * reinforce_weight(spec, cfg.beta, rewards[x], log_probs[x] - log_old);
        let coeff = ref_probs[x] * weight;
        for (i, g) in grad.iter_mut().enumerate() {
            let score = if i == x { T::one() - probs[i] } else { -probs[i] };
            *g = *g + coeff * score;
        }
    }
    Ok(grad)
}

/// Closed-form maximizer of the normalized reverse-KL objective,
/// `π* ∝ π̃_old · exp(R/β)`.
pub fn rkl_optimum<T: Scalar>(reference: &FiniteMeasure<T>, rewards: &[T], beta: T) -> Result<SoftmaxPolicy<T>> {
    if !(beta > T::zero()) {
        return Err(RpgError::DomainError("the reverse-KL optimum needs beta > 0".into()));
    }
    check_len(reference.len(), rewards.len())?;
    let logits = (0..reference.len())
        .map(|x| Ok(reference.log_weight(x)? + rewards[x] / beta))
        .collect::<Result<Vec<_>>>()?;
    SoftmaxPolicy::new(logits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageVariant {
    /// `(R − b) − β(ln w + 1)`
    Rkl,
    /// `(R − b) − β ln w`
    Urkl,
    /// `R − b`; the forward weight does not factor as `w × (…)`.
    FklSimplified,
    UfklSimplified,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegularizedAdvantage<T> {
    pub value: T,
    pub variant: AdvantageVariant,
}

impl<T> RegularizedAdvantage<T> {
    /// Whether the KL terms were dropped from the advantage.
    pub fn is_simplified(&self) -> bool {
        matches!(self.variant, AdvantageVariant::FklSimplified | AdvantageVariant::UfklSimplified)
    }
}

pub fn advantage_variant(spec: DivergenceSpec) -> AdvantageVariant {
    match (spec.direction, spec.normalization) {
        (Direction::Forward, Normalization::Normalized) => AdvantageVariant::FklSimplified,
        (Direction::Reverse, Normalization::Normalized) => AdvantageVariant::Rkl,
        (Direction::Forward, Normalization::Unnormalized) => AdvantageVariant::UfklSimplified,
        (Direction::Reverse, Normalization::Unnormalized) => AdvantageVariant::Urkl,
    }
}

/// The advantage analogue multiplying `w` in the regularized gradient.
pub fn regularized_advantage<T: Scalar>(
    cfg: &RpgConfig<T>,
    reward: T,
    w: T,
    baseline: T,
) -> Result<RegularizedAdvantage<T>> {
    if !(w > T::zero()) || !w.is_finite() {
        return Err(RpgError::DomainError(format!("importance weight must be positive, got {w}")));
    }
    let base = reward - baseline;
    let variant = advantage_variant(cfg.spec());
    let value = match variant {
        AdvantageVariant::Rkl => base - cfg.beta * (w.ln() + T::one()),
        AdvantageVariant::Urkl => base - cfg.beta * w.ln(),
        AdvantageVariant::FklSimplified | AdvantageVariant::UfklSimplified => base,
    };
    Ok(RegularizedAdvantage { value, variant })
}

/// Generalized policy gradient `E_{π_θ}[f ∇log π_θ + ∇f]` by enumeration.
///
/// `f` builds `f(x, θ)` on a fresh tape from the logit parameters and the
/// outcome id.
pub fn gppt_gradient<T: Scalar, F>(policy: &SoftmaxPolicy<T>, mut f: F) -> Result<Vec<T>>
where
    F: FnMut(&mut Tape<T>, &[Var], usize) -> Result<Var>,
{
    let probs = policy.probs();
    let n = policy.len();
    let mut grad = vec![T::zero(); n];
    for (x, &px) in probs.iter().enumerate() {
        let mut tape = Tape::new();
        let theta = tape.params(policy.logits());
        let fx = f(&mut tape, &theta, x)?;
        let value = tape.value(fx);
        let direct = tape.backward(fx);
        for i in 0..n {
            let score = if i == x { T::one() - probs[i] } else { -probs[i] };
            grad[i] = grad[i] + px * (value * score + direct[i]);
        }
    }
    Ok(grad)
}

/// Dense row-major square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    n: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![T::zero(); n * n] }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn mul_vec(&self, v: &[T]) -> Result<Vec<T>> {
        check_len(self.n, v.len())?;
        Ok((0..self.n).map(|i| dot(self.row(i), v)).collect())
    }

    /// `vᵀ M v`
    pub fn quadratic_form(&self, v: &[T]) -> Result<T> {
        Ok(dot(v, &self.mul_vec(v)?))
    }
}

/// Fisher information `E_{π_θ}[s sᵀ]` of the score `s = ∇log π_θ(x)`, by
/// enumeration. For a softmax it equals `diag(p) − p pᵀ`.
pub fn fisher_matrix<T: Scalar>(policy: &SoftmaxPolicy<T>) -> Matrix<T> {
    let n = policy.len();
    let probs = policy.probs();
    let mut f = Matrix::zeros(n);
    for (x, &px) in probs.iter().enumerate() {
        let s = policy.score(x).expect("outcome in range");
        for i in 0..n {
            for j in 0..n {
                f.set(i, j, f.get(i, j) + px * s[i] * s[j]);
            }
        }
    }
    f
}

/// Maximizer of the local quadratic model `gᵀΔ − (β/2) ΔᵀFΔ`:
/// `Δθ* = (1/β) F⁺ g`.
///
/// The softmax Fisher matrix `diag(p) − ppᵀ` is singular along the all-ones
/// direction. On its complement the pseudoinverse has the closed form
/// `v = g/p − mean(g/p)·1` for a gradient `g` orthogonal to the ones vector;
/// any ones-component of `g` is projected out first.
pub fn npg_direction<T: Scalar>(policy: &SoftmaxPolicy<T>, grad: &[T], beta: T) -> Result<Vec<T>> {
    if !(beta > T::zero()) || !beta.is_finite() {
        return Err(RpgError::DomainError(format!("beta must be > 0, got {beta}")));
    }
    check_len(policy.len(), grad.len())?;
    let n = T::lit(grad.len() as f64);
    let g_mean = grad.iter().copied().sum::<T>() / n;
    let probs = policy.probs();
    let v: Vec<T> = grad.iter().zip(&probs).map(|(&g, &p)| (g - g_mean) / p).collect();
    let v_mean = v.iter().copied().sum::<T>() / n;
    Ok(v.into_iter().map(|x| (x - v_mean) / beta).collect())
}

/// `J0 + gᵀΔ − (β/2) ΔᵀFΔ`.
pub fn npg_quadratic_model<T: Scalar>(j0: T, grad: &[T], fisher: &Matrix<T>, beta: T, delta: &[T]) -> Result<T> {
    check_len(grad.len(), delta.len())?;
    Ok(j0 + dot(grad, delta) - T::lit(0.5) * beta * fisher.quadratic_form(delta)?)
}
