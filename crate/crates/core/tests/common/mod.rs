//! Oracles shared by the integration tests. Nothing here calls into the
//! objective or divergence code under test; everything is recomputed from
//! the definitions.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rpg_core::divergences::{Direction, DivergenceSpec, Normalization};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub logits: Vec<f64>,
    /// Raw reference weights with total mass `z`.
    pub reference: Vec<f64>,
    pub rewards: Vec<f64>,
    pub z: f64,
}

/// Random logits, full-support reference with mass `z`, and rewards in [-1, 1].
pub fn random_instance(rng: &mut impl Rng, n: usize, z: f64) -> Instance {
    let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let reference = raw.iter().map(|w| w * z / s).collect();
    let rewards = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Instance { logits, reference, rewards, z }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `Σ a ln(a/b) − a + b`; reduces to KL for probability vectors.
pub fn ukl(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| if x > 0.0 { x * (x / y).ln() - x + y } else { y })
        .sum()
}

/// `E_π[R] − β·D` written out directly from the definitions.
pub fn oracle_objective(spec: DivergenceSpec, beta: f64, logits: &[f64], reference: &[f64], rewards: &[f64]) -> f64 {
    let p = softmax(logits);
    let z: f64 = reference.iter().sum();
    let q: Vec<f64> = reference.iter().map(|w| w / z).collect();
    let reward: f64 = p.iter().zip(rewards).map(|(a, r)| a * r).sum();
    let div = match (spec.direction, spec.normalization) {
        (Direction::Forward, Normalization::Normalized) => ukl(&q, &p),
        (Direction::Reverse, Normalization::Normalized) => ukl(&p, &q),
        (Direction::Forward, Normalization::Unnormalized) => ukl(reference, &p),
        (Direction::Reverse, Normalization::Unnormalized) => ukl(&p, reference),
    };
    reward - beta * div
}

/// Central differences with step `h`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let base = x[i];
            x[i] = base + h;
            let up = f(&x);
            x[i] = base - h;
            let down = f(&x);
            x[i] = base;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

/// Score vector `e_x − p`.
pub fn score(p: &[f64], x: usize) -> Vec<f64> {
    (0..p.len()).map(|i| if i == x { 1.0 - p[i] } else { -p[i] }).collect()
}
