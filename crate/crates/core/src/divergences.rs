//! Exact KL / unnormalized KL by enumeration, the k1/k2/k3 estimator
//! functionals, and Monte-Carlo divergence estimates from a batch.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result, RpgError};
use crate::measures::{Batch, BatchKind, FiniteMeasure, SoftmaxPolicy};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// `D(π_old ‖ π_θ)`, mass-covering.
    Forward,
    /// `D(π_θ ‖ π_old)`, mode-seeking.
    Reverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Plain KL against the normalized reference `π̃_old`.
    Normalized,
    /// KL plus mass correction against the raw reference measure.
    Unnormalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DivergenceSpec {
    pub direction: Direction,
    pub normalization: Normalization,
}

impl DivergenceSpec {
    pub const FKL: Self = Self::new(Direction::Forward, Normalization::Normalized);
    pub const RKL: Self = Self::new(Direction::Reverse, Normalization::Normalized);
    pub const UFKL: Self = Self::new(Direction::Forward, Normalization::Unnormalized);
    pub const URKL: Self = Self::new(Direction::Reverse, Normalization::Unnormalized);

    pub const ALL: [Self; 4] = [Self::FKL, Self::RKL, Self::UFKL, Self::URKL];

    pub const fn new(direction: Direction, normalization: Normalization) -> Self {
        Self { direction, normalization }
    }

    pub fn is_normalized(self) -> bool {
        self.normalization == Normalization::Normalized
    }

    pub fn name(self) -> &'static str {
        match (self.direction, self.normalization) {
            (Direction::Forward, Normalization::Normalized) => "fkl",
            (Direction::Reverse, Normalization::Normalized) => "rkl",
            (Direction::Forward, Normalization::Unnormalized) => "ufkl",
            (Direction::Reverse, Normalization::Unnormalized) => "urkl",
        }
    }
}

impl fmt::Display for DivergenceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DivergenceSpec {
    type Err = RpgError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| RpgError::InvalidConfig(format!("unknown divergence `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    /// `−ln y`
    K1,
    /// `½ (ln y)²`, biased for KL.
    K2,
    /// `y − 1 − ln y`
    K3,
}

impl EstimatorKind {
    pub const ALL: [Self; 3] = [Self::K1, Self::K2, Self::K3];

    pub fn name(self) -> &'static str {
        match self {
            Self::K1 => "k1",
            Self::K2 => "k2",
            Self::K3 => "k3",
        }
    }
}

/// `Σ p log(p/q)` with `0·log 0 = 0`.
pub fn kl_exact<T: Scalar>(p: &[T], q: &[T]) -> Result<T> {
    check_len(p.len(), q.len())?;
    let mut total = T::zero();
    for (x, (&px, &qx)) in p.iter().zip(q).enumerate() {
        if px == T::zero() {
            continue;
        }
        if !(qx > T::zero()) {
            return Err(RpgError::SupportError { outcome: x });
        }
        total = total + px * (px.ln() - qx.ln());
    }
    Ok(total)
}

/// Unnormalized KL `UKL(a‖b) = Σ a log(a/b) + Σ (b − a)`.
pub fn ukl_exact<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    let generalized = kl_exact(a, b)?;
    let mass: T = a.iter().zip(b).map(|(&ax, &bx)| bx - ax).sum();
    Ok(generalized + mass)
}

/// The divergence selected by `spec` between the policy and the reference.
pub fn divergence_exact<T: Scalar>(
    spec: DivergenceSpec,
    policy: &SoftmaxPolicy<T>,
    reference: &FiniteMeasure<T>,
) -> Result<T> {
    check_len(reference.len(), policy.len())?;
    let theta = policy.probs();
    match (spec.direction, spec.normalization) {
        (Direction::Forward, Normalization::Normalized) => kl_exact(&reference.probs(), &theta),
        (Direction::Reverse, Normalization::Normalized) => kl_exact(&theta, &reference.probs()),
        (Direction::Forward, Normalization::Unnormalized) => ukl_exact(reference.weights(), &theta),
        (Direction::Reverse, Normalization::Unnormalized) => ukl_exact(&theta, reference.weights()),
    }
}

pub fn k_estimator<T: Scalar>(kind: EstimatorKind, y: T) -> Result<T> {
    if !(y > T::zero()) || !y.is_finite() {
        return Err(RpgError::DomainError(format!("estimator ratio must be positive, got {y}")));
    }
    let ln_y = y.ln();
    Ok(match kind {
        EstimatorKind::K1 => -ln_y,
        EstimatorKind::K2 => T::lit(0.5) * ln_y * ln_y,
        EstimatorKind::K3 => y - T::one() - ln_y,
    })
}

pub fn k3<T: Scalar>(y: T) -> Result<T> {
    k_estimator(EstimatorKind::K3, y)
}

/// `Σ_x sampling(x) · k3(ratio(x))` over the support of `sampling`.
pub fn k3_expectation_exact<T: Scalar>(sampling: &[T], ratio_fn: impl Fn(usize) -> T) -> Result<T> {
    let mut total = T::zero();
    for (x, &p) in sampling.iter().enumerate() {
        if p > T::zero() {
            total = total + p * k3(ratio_fn(x))?;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate<T> {
    pub estimate: T,
    pub stderr: T,
    pub n: usize,
}

/// Estimates the divergence selected by `spec` from a batch drawn from
/// `π̃_old`, using the per-sample functional `kind`.
///
/// Forward divergences apply the functional to `π_θ/π_old` directly; reverse
/// divergences importance-weight the functional of `π_old/π_θ`. For an
/// enumeration batch the estimate is exact and the standard error is zero.
pub fn divergence_mc<T: Scalar>(
    spec: DivergenceSpec,
    kind: EstimatorKind,
    batch: &Batch<T>,
    policy: &SoftmaxPolicy<T>,
) -> Result<McEstimate<T>> {
    let log_z = batch.z_old().ln();
    let log_probs = policy.log_probs();
    let values = batch
        .samples()
        .iter()
        .map(|s| {
            let lp = *log_probs
                .get(s.outcome)
                .ok_or(RpgError::OutcomeOutOfRange { outcome: s.outcome, n: policy.len() })?;
            let (log_w, scale) = match spec.normalization {
                Normalization::Normalized => (lp - s.log_pi_old, T::one()),
                Normalization::Unnormalized => (lp - s.log_pi_old - log_z, batch.z_old()),
            };
            let w = log_w.exp();
            let v = match spec.direction {
                Direction::Forward => k_estimator(kind, w)?,
                Direction::Reverse => w * k_estimator(kind, (-log_w).exp())?,
            };
            Ok(scale * v)
        })
        .collect::<Result<Vec<T>>>()?;

    let mean: T = batch.masses().iter().zip(&values).map(|(&m, &v)| m * v).sum();
    let n = values.len();
    let stderr = match batch.kind() {
        BatchKind::Enumeration => T::zero(),
        BatchKind::Sampled if n < 2 => T::infinity(),
        BatchKind::Sampled => {
            let nf = T::lit(n as f64);
            let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / (nf - T::one());
            (var / nf).sqrt()
        }
    };
    Ok(McEstimate { estimate: mean, stderr, n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{enumeration_batch, sample_batch};

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn kl_examples() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_exact(&p, &p).unwrap(), 0.0);
        assert!((kl_exact(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - LN2).abs() < 1e-15);
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        let v = kl_exact(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.510826).abs() < 1e-6);
    }

    #[test]
    fn kl_support_violation() {
        assert_eq!(kl_exact(&[0.5, 0.5], &[1.0, 0.0]), Err(RpgError::SupportError { outcome: 1 }));
        assert!(kl_exact(&[0.5, 0.5], &[1.0]).is_err());
    }

    #[test]
    fn ukl_examples() {
        let p = [0.4, 0.6];
        assert_eq!(ukl_exact(&p, &p).unwrap(), 0.0);

        // Forward UKL against a mass-4 reference equals
        // Z·KL(π̃_old‖π_θ) + Z ln Z + (1 − Z).
        let old = FiniteMeasure::new(vec![2.0, 2.0]).unwrap();
        let policy = SoftmaxPolicy::<f64>::uniform(2).unwrap();
        let v = divergence_exact(DivergenceSpec::UFKL, &policy, &old).unwrap();
        let z = 4.0;
        let kl = kl_exact(&old.probs(), &policy.probs()).unwrap();
        assert!((v - (z * kl + z * z.ln() + (1.0 - z))).abs() < 1e-12);
        assert!((v - (4.0 * 4f64.ln() - 3.0)).abs() < 1e-12);

        // Reverse UKL with Z = 2 and π_θ = π̃_old: −ln 2 + (2 − 1).
        let old = FiniteMeasure::new(vec![0.6, 1.4]).unwrap();
        let policy = SoftmaxPolicy::from_measure(&old).unwrap();
        let v = divergence_exact(DivergenceSpec::URKL, &policy, &old).unwrap();
        assert!((v - (1.0 - LN2)).abs() < 1e-12);
        assert!((v - 0.306853).abs() < 1e-6);
    }

    #[test]
    fn estimator_values() {
        assert_eq!(k3(1.0).unwrap(), 0.0);
        assert!((k3(2.0).unwrap() - (1.0 - LN2)).abs() < 1e-15);
        assert!((k3(0.5).unwrap() - (0.5 - 1.0 + LN2)).abs() < 1e-15);
        assert!((k3(0.5f64).unwrap() - 0.193147).abs() < 1e-6);
        assert!((k_estimator(EstimatorKind::K1, 2.0).unwrap() + LN2).abs() < 1e-15);
        assert!((k_estimator(EstimatorKind::K2, 2.0).unwrap() - 0.5 * LN2 * LN2).abs() < 1e-15);
        assert!(matches!(k3(0.0), Err(RpgError::DomainError(_))));
        assert!(matches!(k3(-1.0), Err(RpgError::DomainError(_))));
    }

    #[test]
    fn k3_expectation_examples() {
        assert_eq!(k3_expectation_exact(&[0.3, 0.7], |_| 1.0).unwrap(), 0.0);
        assert!(k3_expectation_exact(&[0.3, 0.7], |_| -1.0).is_err());
        // zero-probability outcomes are never evaluated
        assert!(k3_expectation_exact(&[0.0, 1.0], |x| if x == 0 { -1.0 } else { 1.0 }).is_ok());
    }

    #[test]
    fn k3_identities_both_directions() {
        let old = FiniteMeasure::new(vec![0.3f64, 1.1, 0.6]).unwrap();
        let policy = SoftmaxPolicy::new(vec![0.2, -0.7, 1.3]).unwrap();
        let pt = policy.probs();
        let w = old.weights();

        let rev = k3_expectation_exact(&pt, |x| w[x] / pt[x]).unwrap();
        let urkl = divergence_exact(DivergenceSpec::URKL, &policy, &old).unwrap();
        assert!((rev - urkl).abs() < 1e-12);

        let fwd = old.total_mass() * k3_expectation_exact(&old.probs(), |x| pt[x] / w[x]).unwrap();
        let ufkl = divergence_exact(DivergenceSpec::UFKL, &policy, &old).unwrap();
        assert!((fwd - ufkl).abs() < 1e-12);
    }

    #[test]
    fn mc_on_policy_is_zero() {
        let old = FiniteMeasure::new(vec![0.2f64, 0.5, 0.3]).unwrap();
        let policy = SoftmaxPolicy::from_measure(&old).unwrap();
        let batch = sample_batch(&old, |_| 0.0, 1000, 5).unwrap();
        for spec in DivergenceSpec::ALL {
            for kind in EstimatorKind::ALL {
                let e = divergence_mc(spec, kind, &batch, &policy).unwrap();
                assert!(e.estimate.abs() <= 3.0 * e.stderr + 1e-12, "{spec} {kind:?}: {e:?}");
            }
        }
    }

    #[test]
    fn mc_enumeration_batch_is_exact() {
        let old = FiniteMeasure::new(vec![0.3, 1.1, 0.6]).unwrap();
        let policy = SoftmaxPolicy::new(vec![0.2, -0.7, 1.3]).unwrap();
        let batch = enumeration_batch(&old, |_| 0.0f64).unwrap();
        for spec in DivergenceSpec::ALL {
            let e = divergence_mc(spec, EstimatorKind::K3, &batch, &policy).unwrap();
            let exact = divergence_exact(spec, &policy, &old).unwrap();
            assert_eq!(e.stderr, 0.0);
            assert!((e.estimate - exact).abs() < 1e-12, "{spec}");
        }
        // k1 is exact for normalized KL
        for spec in [DivergenceSpec::FKL, DivergenceSpec::RKL] {
            let e = divergence_mc(spec, EstimatorKind::K1, &batch, &policy).unwrap();
            let exact = divergence_exact(spec, &policy, &old).unwrap();
            assert!((e.estimate - exact).abs() < 1e-12, "{spec}");
        }
    }

    #[test]
    fn mc_three_outcome_instance() {
        let old = FiniteMeasure::new(vec![0.5f64, 0.3, 0.2]).unwrap();
        let policy = SoftmaxPolicy::new(vec![0.4, 0.1, -0.3]).unwrap();
        let batch = sample_batch(&old, |_| 0.0, 100_000, 17).unwrap();
        for spec in DivergenceSpec::ALL {
            let e = divergence_mc(spec, EstimatorKind::K3, &batch, &policy).unwrap();
            let exact = divergence_exact(spec, &policy, &old).unwrap();
            assert!((e.estimate - exact).abs() <= 3.0 * e.stderr, "{spec}: {e:?} vs {exact}");
        }
    }

    #[test]
    fn k2_tracks_kl_for_near_identical_pair() {
        // k2 is biased; for a small perturbation the bias is O(KL^{3/2}).
        let old = FiniteMeasure::new(vec![0.25f64, 0.25, 0.5]).unwrap();
        let mut logits = SoftmaxPolicy::from_measure(&old).unwrap().logits().to_vec();
        logits[0] += 0.05;
        let policy = SoftmaxPolicy::new(logits).unwrap();
        let exact = divergence_exact(DivergenceSpec::FKL, &policy, &old).unwrap();
        let enum_batch = enumeration_batch(&old, |_| 0.0).unwrap();
        let k2_exact = divergence_mc(DivergenceSpec::FKL, EstimatorKind::K2, &enum_batch, &policy)
            .unwrap()
            .estimate;
        let bias = (k2_exact - exact).abs();
        assert!(bias < 0.05 * exact, "bias {bias} vs kl {exact}");

        let batch = sample_batch(&old, |_| 0.0, 100_000, 23).unwrap();
        let e = divergence_mc(DivergenceSpec::FKL, EstimatorKind::K2, &batch, &policy).unwrap();
        assert!((e.estimate - exact).abs() <= 3.0 * e.stderr + bias);
    }

    #[test]
    fn k1_misses_the_mass_term_of_unnormalized_divergences() {
        let reference = FiniteMeasure::new(vec![0.3f64, 0.9, 0.5]).unwrap();
        let z = reference.total_mass();
        let policy = SoftmaxPolicy::new(vec![0.2, -0.1, 0.4]).unwrap();
        let batch = enumeration_batch(&reference, |_| 0.0).unwrap();
        let k1 = |spec| divergence_mc(spec, EstimatorKind::K1, &batch, &policy).unwrap().estimate;
        let exact = |spec| divergence_exact(spec, &policy, &reference).unwrap();
        assert!((k1(DivergenceSpec::UFKL) - (exact(DivergenceSpec::UFKL) + z - 1.0)).abs() < 1e-12);
        assert!((k1(DivergenceSpec::URKL) - (exact(DivergenceSpec::URKL) + 1.0 - z)).abs() < 1e-12);
    }

    #[test]
    fn spec_names_roundtrip() {
        for spec in DivergenceSpec::ALL {
            assert_eq!(spec.name().parse::<DivergenceSpec>().unwrap(), spec);
        }
        assert!("jsd".parse::<DivergenceSpec>().is_err());
    }
}
