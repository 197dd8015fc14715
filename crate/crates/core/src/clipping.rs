//! Dual-clip stabilization of the importance weight.
//!
//! Two forms live here and are kept separate:
//!
//! - [`dual_clip_loss`] is the fully differentiable PPO-style dual clip,
//!   `max(−wÂ, −clip(w)Â)` with an extra `−cÂ` ceiling when `Â < 0`.
//! - [`reinforce_clip_loss`] routes the gradient through `log π_θ` only, with
//!   the importance weight and KL component detached, and replaces the whole
//!   expression by a constant on the clipped segments.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Result, RpgError};
use crate::scalar::Scalar;

/// `ε1` (lower), `ε2` (upper) and the dual-clip factor `c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipParams<T> {
    pub eps_low: T,
    pub eps_high: T,
    pub c: T,
}

impl<T: Scalar> Default for ClipParams<T> {
    fn default() -> Self {
        Self { eps_low: T::lit(0.2), eps_high: T::lit(0.28), c: T::lit(2.25) }
    }
}

impl<T: Scalar> ClipParams<T> {
    pub fn new(eps_low: T, eps_high: T, c: T) -> Result<Self> {
        let p = Self { eps_low, eps_high, c };
        p.validate()?;
        Ok(p)
    }

    /// Requires `0 < ε1 < 1`, `ε2 > 0` and `c > 1 + ε2`.
    pub fn validate(&self) -> Result<()> {
        let ok = self.eps_low > T::zero()
            && self.eps_low < T::one()
            && self.eps_high > T::zero()
            && self.eps_high.is_finite()
            && self.c > self.high()
            && self.c.is_finite();
        if ok {
            Ok(())
        } else {
            Err(RpgError::InvalidConfig(format!(
                "clip params need 0 < eps_low < 1, eps_high > 0, c > 1 + eps_high; got ({}, {}, {})",
                self.eps_low, self.eps_high, self.c
            )))
        }
    }

    pub fn low(&self) -> T {
        T::one() - self.eps_low
    }

    pub fn high(&self) -> T {
        T::one() + self.eps_high
    }

    /// `w` strictly inside `(1 − ε1, 1 + ε2)`, where no clip is active for
    /// either sign of the advantage.
    pub fn in_band(&self, w: T) -> bool {
        w > self.low() && w < self.high()
    }
}

/// Whether the advantage in [`dual_clip_loss`] carries gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvantageFlow {
    /// `Â` stays on the tape, so its `β ln w` term is differentiated too.
    #[default]
    Differentiable,
    /// `Â` is wrapped in a stop-gradient before clipping.
    Detached,
}

/// Which segment of the clipped loss a sample falls on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipBranch {
    /// Gradient flows through the weight (or `log π_θ`).
    Unclipped,
    /// Upper plateau: positive advantage, `w ≥ 1 + ε2`.
    High,
    /// Lower plateau: negative advantage, `w ≤ 1 − ε1`.
    Low,
    /// Dual-clip ceiling: negative advantage, `w ≥ c`.
    Capped,
}

impl ClipBranch {
    pub fn has_gradient(self) -> bool {
        self == Self::Unclipped
    }
}

pub fn clip<T: Scalar>(w: T, lo: T, hi: T) -> Result<T> {
    if lo > hi {
        return Err(RpgError::DomainError(format!("clip bounds reversed: {lo} > {hi}")));
    }
    Ok(w.max(lo).min(hi))
}

/// Segment selected by [`dual_clip_loss`] for a weight and advantage value.
pub fn dual_clip_branch<T: Scalar>(w: T, a_hat: T, p: &ClipParams<T>) -> ClipBranch {
    if a_hat >= T::zero() {
        if w > p.high() && a_hat > T::zero() {
            ClipBranch::High
        } else {
            ClipBranch::Unclipped
        }
    } else if w < p.low() {
        ClipBranch::Low
    } else if w > p.c {
        ClipBranch::Capped
    } else {
        ClipBranch::Unclipped
    }
}

/// Dual-clip loss on the tape.
///
/// `Â ≥ 0`: `max(−wÂ, −clip(w, 1−ε1, 1+ε2)Â)`.
/// `Â < 0`: `min(max(−wÂ, −clip(w)Â), −cÂ)`.
///
/// The sign test reads the value of `Â`; both arms are built with tape-level
/// `max`/`min` and ties resolve to the unclipped operand.
pub fn dual_clip_loss<T: Scalar>(tape: &mut Tape<T>, w: Var, a_hat: Var, p: &ClipParams<T>) -> Var {
    let lo = tape.constant(p.low());
    let hi = tape.constant(p.high());
    let raised = tape.max(w, lo);
    let w_clipped = tape.min(raised, hi);

    let wa = tape.mul(w, a_hat);
    let unclipped = tape.neg(wa);
    let ca = tape.mul(w_clipped, a_hat);
    let clipped = tape.neg(ca);
    let pessimistic = tape.max(unclipped, clipped);
    if tape.value(a_hat) >= T::zero() {
        pessimistic
    } else {
        let ceiling = tape.scale(a_hat, -p.c);
        tape.min(pessimistic, ceiling)
    }
}

/// Per-sample inputs of [`reinforce_clip_loss`], all as plain values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReinforceClipInput<T> {
    /// `ln w` of the configured variant.
    pub log_w: T,
    /// `R − b`.
    pub advantage: T,
    /// `β ×` the KL component of the REINFORCE weight, so that the weight is
    /// `w·(R − b) + c_kl`.
    pub c_kl: T,
}

/// REINFORCE-style dual clip for one sample.
///
/// With `ℓ = −log π_θ(x)` and `A′ = (R − b) + C_KL/w`, the loss is
/// `ψ·SG(w)` with `ψ = A′ℓ` on the unclipped segments, so its gradient is
/// `−(w(R − b) + C_KL)∇log π_θ`. Clipped segments replace `w` by `1 + ε2`,
/// `1 − ε1` or `c` and detach `ℓ`, giving a constant. `ψ = 0` is treated as
/// non-negative.
pub fn reinforce_clip_loss<T: Scalar>(
    tape: &mut Tape<T>,
    log_prob: Var,
    input: ReinforceClipInput<T>,
    p: &ClipParams<T>,
) -> Result<(Var, ClipBranch)> {
    let w = input.log_w.exp();
    if !(w > T::zero()) || !w.is_finite() || !input.advantage.is_finite() || !input.c_kl.is_finite() {
        return Err(RpgError::NumericalError(format!(
            "non-finite clip input (w={w}, advantage={}, c_kl={})",
            input.advantage, input.c_kl
        )));
    }
    let ell = tape.neg(log_prob);
    let a_prime = input.advantage + input.c_kl / w;
    let psi_value = a_prime * tape.value(ell);

    let in_band = |tape: &mut Tape<T>| {
        let psi = tape.scale(ell, a_prime);
        tape.scale(psi, w)
    };
    let plateau = |tape: &mut Tape<T>, w_bound: T| {
        let ell_sg = tape.stop_gradient(ell);
        let psi = tape.scale(ell_sg, input.advantage + input.c_kl / w_bound);
        tape.scale(psi, w_bound)
    };

    Ok(if psi_value >= T::zero() {
        if w < p.high() {
            (in_band(tape), ClipBranch::Unclipped)
        } else {
            (plateau(tape, p.high()), ClipBranch::High)
        }
    } else if w <= p.low() {
        (plateau(tape, p.low()), ClipBranch::Low)
    } else if w < p.c {
        (in_band(tape), ClipBranch::Unclipped)
    } else {
        let ell_sg = tape.stop_gradient(ell);
        let reward_part = tape.scale(ell_sg, input.advantage * p.c);
        let kl_part = tape.scale(ell_sg, input.c_kl);
        (tape.add(reward_part, kl_part), ClipBranch::Capped)
    })
}
