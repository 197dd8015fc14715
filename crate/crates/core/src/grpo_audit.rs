//! Audit of the k3 KL penalty used by group-relative policy optimization.
//!
//! The penalty `k3(π_ref/π_θ)` is evaluated on samples from `π_old`. Without
//! the importance weight `w = π_θ/π̃_old` its expected gradient is not the
//! gradient of `UKL(π_θ ‖ π_ref)`; with the weight it is. Everything here is
//! computed by enumeration, so the bias is measured exactly.

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::divergences::ukl_exact;
use crate::error::{check_len, Result, RpgError};
use crate::measures::{FiniteMeasure, SoftmaxPolicy};
use crate::scalar::{norm2, norm_inf, Scalar};

fn log_prob_at(log_probs: &[Var], x: usize) -> Result<Var> {
    log_probs
        .get(x)
        .copied()
        .ok_or(RpgError::OutcomeOutOfRange { outcome: x, n: log_probs.len() })
}

/// `k3(π_ref(x)/π_θ(x))` on the tape, with the raw reference weight in the
/// numerator.
pub fn grpo_kl_term<T: Scalar>(
    tape: &mut Tape<T>,
    log_probs: &[Var],
    reference: &FiniteMeasure<T>,
    x: usize,
) -> Result<Var> {
    let lp = log_prob_at(log_probs, x)?;
    let log_ref = reference.log_weight(x).map_err(|e| match e {
        RpgError::ZeroSupportSample { outcome } => RpgError::SupportError { outcome },
        other => other,
    })?;
    // ln y = ln π_ref − ln π_θ;  k3 = y − 1 − ln y
    let neg_lp = tape.neg(lp);
    let log_y = tape.add_scalar(neg_lp, log_ref);
    let y = tape.exp(log_y);
    let d = tape.sub(y, log_y);
    Ok(tape.add_scalar(d, -T::one()))
}

/// `w(x)·k3(π_ref(x)/π_θ(x))` with `w = π_θ/π̃_old` kept differentiable.
pub fn corrected_kl_term<T: Scalar>(
    tape: &mut Tape<T>,
    log_probs: &[Var],
    reference: &FiniteMeasure<T>,
    old: &FiniteMeasure<T>,
    x: usize,
) -> Result<Var> {
    check_len(reference.len(), old.len())?;
    let lp = log_prob_at(log_probs, x)?;
    let log_old = old.log_weight(x)? - old.total_mass().ln();
    let log_w = tape.add_scalar(lp, -log_old);
    let w = tape.exp(log_w);
    let k = grpo_kl_term(tape, log_probs, reference, x)?;
    Ok(tape.mul(w, k))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport<T> {
    /// `∇ E_{π̃_old}[k3(π_ref/π_θ)]`
    pub uncorrected_grad: Vec<T>,
    /// `∇ E_{π̃_old}[w·k3(π_ref/π_θ)]`
    pub corrected_grad: Vec<T>,
    /// Central finite differences of `UKL(π_θ ‖ π_ref)`.
    pub true_ukl_grad: Vec<T>,
    /// `‖uncorrected − true‖₂`
    pub bias_norm: T,
    /// `‖uncorrected − true‖∞`
    pub bias_inf: T,
    /// `bias_norm / ‖true‖₂`; infinite when the true gradient vanishes but the bias does not.
    pub relative_bias: T,
    /// `‖corrected − true‖∞`
    pub corrected_error: T,
}

impl<T: Scalar> AuditReport<T> {
    pub fn corrected_within(&self, tol: T) -> bool {
        self.corrected_error <= tol
    }
}

fn enumeration_gradient<T: Scalar>(
    policy: &SoftmaxPolicy<T>,
    old: &FiniteMeasure<T>,
    mut term: impl FnMut(&mut Tape<T>, &[Var], usize) -> Result<Var>,
) -> Result<Vec<T>> {
    let mut tape = Tape::new();
    let theta = tape.params(policy.logits());
    let log_probs = tape.log_softmax(&theta)?;
    let probs = old.probs();
    let mut terms = Vec::with_capacity(probs.len());
    for x in old.support() {
        terms.push((probs[x], term(&mut tape, &log_probs, x)?));
    }
    let total = tape.weighted_sum(&terms);
    Ok(tape.backward(total))
}

/// Central-difference gradient of `UKL(π_θ ‖ π_ref)` in the logits.
pub fn ukl_fd_gradient<T: Scalar>(policy: &SoftmaxPolicy<T>, reference: &FiniteMeasure<T>) -> Result<Vec<T>> {
    let h = T::fd_step();
    let mut logits = policy.logits().to_vec();
    let mut grad = Vec::with_capacity(logits.len());
    let eval = |l: &[T]| -> Result<T> {
        let p = SoftmaxPolicy::new(l.to_vec())?;
        ukl_exact(&p.probs(), reference.weights())
    };
    for i in 0..logits.len() {
        let base = logits[i];
        logits[i] = base + h;
        let up = eval(&logits)?;
        logits[i] = base - h;
        let down = eval(&logits)?;
        logits[i] = base;
        grad.push((up - down) / (h + h));
    }
    Ok(grad)
}

/// Expected gradients of the uncorrected and corrected penalties under
/// `π̃_old`, against the finite-difference gradient of `UKL(π_θ ‖ π_ref)`.
///
/// `old` and `reference` must both have full support.
pub fn audit_bias<T: Scalar>(
    policy: &SoftmaxPolicy<T>,
    reference: &FiniteMeasure<T>,
    old: &FiniteMeasure<T>,
) -> Result<AuditReport<T>> {
    check_len(policy.len(), reference.len())?;
    check_len(policy.len(), old.len())?;
    for m in [reference, old] {
        if let Some(x) = (0..m.len()).find(|&x| m.weights()[x] == T::zero()) {
            return Err(RpgError::SupportError { outcome: x });
        }
    }
    let uncorrected_grad = enumeration_gradient(policy, old, |t, lp, x| grpo_kl_term(t, lp, reference, x))?;
    let corrected_grad = enumeration_gradient(policy, old, |t, lp, x| corrected_kl_term(t, lp, reference, old, x))?;
    let true_ukl_grad = ukl_fd_gradient(policy, reference)?;

    let diff = |a: &[T]| -> Vec<T> { a.iter().zip(&true_ukl_grad).map(|(&x, &y)| x - y).collect() };
    let bias = diff(&uncorrected_grad);
    let bias_norm = norm2(&bias);
    let true_norm = norm2(&true_ukl_grad);
    let relative_bias = if true_norm > T::zero() {
        bias_norm / true_norm
    } else if bias_norm > T::zero() {
        T::infinity()
    } else {
        T::zero()
    };
    let report = AuditReport {
        bias_inf: norm_inf(&bias),
        corrected_error: norm_inf(&diff(&corrected_grad)),
        uncorrected_grad,
        corrected_grad,
        true_ukl_grad,
        bias_norm,
        relative_bias,
    };
    Ok(report)
}
