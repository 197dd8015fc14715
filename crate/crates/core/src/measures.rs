//! Finite measures, softmax policies, batches and sampling.
//!
//! A [`FiniteMeasure`] is a nonnegative weight vector over outcomes
//! `0..N`. It need not be normalized: its total mass plays the role of
//! `Z_old` in the unnormalized objectives. Importance weights are always
//! taken against the raw (unnormalized) weights; sampling always uses the
//! normalized probabilities.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_len, Result, RpgError};
use crate::scalar::{log_sum_exp, Scalar};

/// Seedable generator used for every random draw in the crate.
///
/// ChaCha with 8 rounds: identical seeds give identical streams on every
/// platform and across releases of `rand_chacha`.
pub type RpgRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> RpgRng {
    RpgRng::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMeasure<T> {
    weights: Vec<T>,
}

impl<T: Scalar> FiniteMeasure<T> {
    pub fn new(weights: Vec<T>) -> Result<Self> {
        validate_weights(&weights)?;
        Ok(Self { weights })
    }

    /// Uniform probability distribution over `n` outcomes.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(RpgError::DegenerateMeasure("empty outcome space".into()));
        }
        Self::new(vec![T::one() / T::lit(n as f64); n])
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weight(&self, x: usize) -> Result<T> {
        self.weights
            .get(x)
            .copied()
            .ok_or(RpgError::OutcomeOutOfRange { outcome: x, n: self.len() })
    }

    pub fn total_mass(&self) -> T {
        self.weights.iter().copied().sum()
    }

    /// Normalized probabilities `weights / Z`.
    pub fn probs(&self) -> Vec<T> {
        let z = self.total_mass();
        self.weights.iter().map(|&w| w / z).collect()
    }

    /// The normalized measure (total mass 1).
    pub fn normalized(&self) -> Self {
        Self { weights: self.probs() }
    }

    /// `ln π_old(x)` of the raw weight; errors on zero mass.
    pub fn log_weight(&self, x: usize) -> Result<T> {
        let w = self.weight(x)?;
        if w > T::zero() {
            Ok(w.ln())
        } else {
            Err(RpgError::ZeroSupportSample { outcome: x })
        }
    }

    pub fn has_full_support(&self) -> bool {
        self.weights.iter().all(|&w| w > T::zero())
    }

    /// Outcomes with strictly positive mass.
    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > T::zero())
            .map(|(x, _)| x)
    }

    /// Same shape, total mass rescaled to `z`.
    pub fn with_total_mass(&self, z: T) -> Result<Self> {
        if !(z > T::zero()) || !z.is_finite() {
            return Err(RpgError::DegenerateMeasure(format!("target mass {z} must be positive")));
        }
        let scale = z / self.total_mass();
        Self::new(self.weights.iter().map(|&w| w * scale).collect())
    }
}

fn validate_weights<T: Scalar>(weights: &[T]) -> Result<()> {
    if weights.is_empty() {
        return Err(RpgError::DegenerateMeasure("empty outcome space".into()));
    }
    if let Some((i, w)) = weights
        .iter()
        .enumerate()
        .find(|(_, w)| !w.is_finite() || **w < T::zero())
    {
        return Err(RpgError::DegenerateMeasure(format!("weight {i} is {w}")));
    }
    if !weights.iter().any(|&w| w > T::zero()) {
        return Err(RpgError::DegenerateMeasure("all weights are zero".into()));
    }
    Ok(())
}

/// Splits a weight vector into normalized probabilities and total mass.
pub fn normalize<T: Scalar>(weights: &[T]) -> Result<(Vec<T>, T)> {
    validate_weights(weights)?;
    let z: T = weights.iter().copied().sum();
    Ok((weights.iter().map(|&w| w / z).collect(), z))
}

/// Logit-parameterized categorical distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPolicy<T> {
    logits: Vec<T>,
}

impl<T: Scalar> SoftmaxPolicy<T> {
    pub fn new(logits: Vec<T>) -> Result<Self> {
        if logits.is_empty() {
            return Err(RpgError::DegenerateMeasure("empty outcome space".into()));
        }
        if let Some(i) = logits.iter().position(|l| !l.is_finite()) {
            return Err(RpgError::NumericalError(format!("logit {i} is not finite")));
        }
        Ok(Self { logits })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(vec![T::zero(); n])
    }

    /// Policy whose probabilities equal the normalized weights of `m`.
    /// Every outcome must have positive mass: a softmax has full support.
    pub fn from_measure(m: &FiniteMeasure<T>) -> Result<Self> {
        let logits = (0..m.len()).map(|x| m.log_weight(x)).collect::<Result<Vec<_>>>()?;
        Self::new(logits)
    }

    pub fn logits(&self) -> &[T] {
        &self.logits
    }

    pub fn set_logits(&mut self, logits: Vec<T>) -> Result<()> {
        check_len(self.logits.len(), logits.len())?;
        *self = Self::new(logits)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn log_normalizer(&self) -> T {
        log_sum_exp(&self.logits)
    }

    pub fn log_prob(&self, x: usize) -> Result<T> {
        let l = self
            .logits
            .get(x)
            .copied()
            .ok_or(RpgError::OutcomeOutOfRange { outcome: x, n: self.len() })?;
        Ok(l - self.log_normalizer())
    }

    pub fn log_probs(&self) -> Vec<T> {
        let lse = self.log_normalizer();
        self.logits.iter().map(|&l| l - lse).collect()
    }

    pub fn prob(&self, x: usize) -> Result<T> {
        self.log_prob(x).map(T::exp)
    }

    pub fn probs(&self) -> Vec<T> {
        self.log_probs().into_iter().map(T::exp).collect()
    }

    pub fn entropy(&self) -> T {
        self.log_probs()
            .into_iter()
            .map(|lp| -lp.exp() * lp)
            .sum()
    }

    /// The policy's distribution as a (normalized) finite measure.
    pub fn to_measure(&self) -> FiniteMeasure<T> {
        FiniteMeasure { weights: self.probs() }
    }

    /// Score vector `∇_θ log π_θ(x) = e_x − p`.
    pub fn score(&self, x: usize) -> Result<Vec<T>> {
        if x >= self.len() {
            return Err(RpgError::OutcomeOutOfRange { outcome: x, n: self.len() });
        }
        let mut s: Vec<T> = self.probs().into_iter().map(|p| -p).collect();
        s[x] = s[x] + T::one();
        Ok(s)
    }
}

/// `π_θ(x) / π_old(x)` against the raw weight of `reference`, computed in the
/// log domain.
pub fn importance_weight<T: Scalar>(
    policy: &SoftmaxPolicy<T>,
    reference: &FiniteMeasure<T>,
    x: usize,
) -> Result<T> {
    check_len(policy.len(), reference.len())?;
    let log_old = reference.log_weight(x)?;
    Ok((policy.log_prob(x)? - log_old).exp())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutcomeSample<T> {
    pub outcome: usize,
    pub reward: T,
    /// `ln π̃_old(x)`, the log of the normalized sampling probability.
    pub log_pi_old: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchKind {
    /// i.i.d. draws, each entry carries mass `1/n`.
    Sampled,
    /// One entry per support point, carrying mass `π̃_old(x)`. Means over
    /// such a batch are exact expectations.
    Enumeration,
}

/// Outcomes drawn from `π̃_old` together with the information needed to
/// rebuild importance weights: stored `ln π̃_old(x)` and the reference
/// total mass.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    samples: Vec<OutcomeSample<T>>,
    masses: Vec<T>,
    z_old: T,
    kind: BatchKind,
}

impl<T: Scalar> Batch<T> {
    /// Wraps externally collected samples as an i.i.d. batch.
    pub fn from_samples(samples: Vec<OutcomeSample<T>>, z_old: T) -> Result<Self> {
        if samples.is_empty() {
            return Err(RpgError::InvalidConfig("batch must contain at least one sample".into()));
        }
        if !(z_old > T::zero()) || !z_old.is_finite() {
            return Err(RpgError::DegenerateMeasure(format!("reference mass {z_old}")));
        }
        for s in &samples {
            if !s.log_pi_old.is_finite() {
                return Err(RpgError::ZeroSupportSample { outcome: s.outcome });
            }
            if !s.reward.is_finite() {
                return Err(RpgError::NumericalError(format!(
                    "reward of outcome {} is not finite",
                    s.outcome
                )));
            }
        }
        let m = T::one() / T::lit(samples.len() as f64);
        let masses = vec![m; samples.len()];
        Ok(Self { samples, masses, z_old, kind: BatchKind::Sampled })
    }

    pub fn samples(&self) -> &[OutcomeSample<T>] {
        &self.samples
    }

    /// Per-entry mass used by every batch mean (sums to one).
    pub fn masses(&self) -> &[T] {
        &self.masses
    }

    pub fn kind(&self) -> BatchKind {
        self.kind
    }

    pub fn z_old(&self) -> T {
        self.z_old
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Entries paired with their mass.
    pub fn weighted(&self) -> impl Iterator<Item = (T, &OutcomeSample<T>)> + '_ {
        self.masses.iter().copied().zip(self.samples.iter())
    }

    /// Weighted mean of a per-entry quantity.
    pub fn mean_by(&self, mut f: impl FnMut(&OutcomeSample<T>) -> T) -> T {
        self.weighted().map(|(m, s)| m * f(s)).sum()
    }

    /// Batch-mean baseline `b = (1/N) Σ R_i`.
    pub fn mean_reward(&self) -> T {
        self.mean_by(|s| s.reward)
    }
}

/// Draws `n` i.i.d. outcomes from `normalize(reference)`.
pub fn sample_batch<T: Scalar>(
    reference: &FiniteMeasure<T>,
    reward_fn: impl Fn(usize) -> T,
    n: usize,
    seed: u64,
) -> Result<Batch<T>> {
    sample_batch_with(reference, reward_fn, n, &mut rng_from_seed(seed))
}

/// Same as [`sample_batch`] but continues an existing random stream.
pub fn sample_batch_with<T: Scalar, R: Rng + ?Sized>(
    reference: &FiniteMeasure<T>,
    reward_fn: impl Fn(usize) -> T,
    n: usize,
    rng: &mut R,
) -> Result<Batch<T>> {
    if n == 0 {
        return Err(RpgError::InvalidConfig("batch size must be at least 1".into()));
    }
    let probs = reference.probs();
    let weights: Vec<f64> = probs.iter().map(|p| p.to_f64_lossy()).collect();
    let dist = WeightedIndex::new(&weights)
        .map_err(|e| RpgError::DegenerateMeasure(e.to_string()))?;
    let samples = (0..n)
        .map(|_| {
            let x = dist.sample(rng);
            OutcomeSample { outcome: x, reward: reward_fn(x), log_pi_old: probs[x].ln() }
        })
        .collect();
    Batch::from_samples(samples, reference.total_mass())
}

/// Zero-variance pseudo-batch: one entry per support point of `reference`,
/// weighted by `π̃_old(x)`.
pub fn enumeration_batch<T: Scalar>(
    reference: &FiniteMeasure<T>,
    reward_fn: impl Fn(usize) -> T,
) -> Result<Batch<T>> {
    let probs = reference.probs();
    let (samples, masses): (Vec<_>, Vec<_>) = reference
        .support()
        .map(|x| {
            let s = OutcomeSample { outcome: x, reward: reward_fn(x), log_pi_old: probs[x].ln() };
            (s, probs[x])
        })
        .unzip();
    if let Some(s) = samples.iter().find(|s| !s.reward.is_finite()) {
        return Err(RpgError::NumericalError(format!("reward of outcome {} is not finite", s.outcome)));
    }
    Ok(Batch { samples, masses, z_old: reference.total_mass(), kind: BatchKind::Enumeration })
}
