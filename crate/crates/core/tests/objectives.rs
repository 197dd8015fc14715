mod common;

use proptest::prelude::*;
use rpg_core::autodiff::Tape;
use rpg_core::divergences::DivergenceSpec;
use rpg_core::measures::{enumeration_batch, sample_batch, Batch, FiniteMeasure, SoftmaxPolicy};
use rpg_core::objectives::{
    exact_gradient, exact_objective, gppt_gradient, npg_direction, register_policy, rkl_optimum,
    surrogate_loss, LossStyle, RpgConfig,
};

use common::*;

fn grad(cfg: &RpgConfig<f64>, policy: &SoftmaxPolicy<f64>, batch: &Batch<f64>, b: f64) -> Vec<f64> {
    let mut tape = Tape::new();
    let pv = register_policy(&mut tape, policy).unwrap();
    let loss = surrogate_loss(&mut tape, &pv, cfg, batch, b).unwrap();
    tape.backward(loss)
}

#[test]
fn rkl_objective_matches_independent_enumeration() {
    let logits = vec![0.3, -0.8, 1.1];
    let reference = vec![0.25, 0.45, 0.3];
    let rewards = vec![0.7, -0.2, 1.5];
    let cfg = RpgConfig::new(DivergenceSpec::RKL, LossStyle::Differentiable, 0.5).unwrap();
    let j = exact_objective(
        &cfg,
        &SoftmaxPolicy::new(logits.clone()).unwrap(),
        &FiniteMeasure::new(reference.clone()).unwrap(),
        &rewards,
    )
    .unwrap();
    // Written out term by term.
    let p = softmax(&logits);
    let mut expected = 0.0;
    for x in 0..3 {
        expected += p[x] * rewards[x] - 0.5 * p[x] * (p[x] / reference[x]).ln();
    }
    assert!((j - expected).abs() < 1e-14);
}

#[test]
fn exact_gradient_matches_finite_differences_n5() {
    let mut rng = rng(11);
    let inst = random_instance(&mut rng, 5, 1.4);
    let policy = SoftmaxPolicy::new(inst.logits.clone()).unwrap();
    let reference = FiniteMeasure::new(inst.reference.clone()).unwrap();
    for cfg in RpgConfig::all_variants(0.3).unwrap() {
        let g = exact_gradient(&cfg, &policy, &reference, &inst.rewards).unwrap();
        let fd = fd_gradient(
            |l| oracle_objective(cfg.spec(), cfg.beta, l, &inst.reference, &inst.rewards),
            &inst.logits,
            6e-6,
        );
        assert!(max_abs_diff(&g, &fd) <= 1e-6 * max_abs(&fd).max(1e-3), "{cfg}");
    }
}

#[test]
fn reinforce_gradient_does_not_depend_on_the_baseline_in_expectation() {
    let mut rng = rng(12);
    let inst = random_instance(&mut rng, 6, 0.8);
    let policy = SoftmaxPolicy::new(inst.logits.clone()).unwrap();
    let reference = FiniteMeasure::new(inst.reference.clone()).unwrap();
    let batch = enumeration_batch(&reference, |x| inst.rewards[x]).unwrap();
    for spec in DivergenceSpec::ALL {
        let cfg = RpgConfig::new(spec, LossStyle::Reinforce, 0.4).unwrap();
        let base = grad(&cfg, &policy, &batch, 0.0);
        for b in [-3.0, 0.25, 10.0] {
            assert!(max_abs_diff(&grad(&cfg, &policy, &batch, b), &base) < 1e-10, "{spec} b={b}");
        }
    }
}

#[test]
fn dropping_z_rescales_unnormalized_gradients() {
    let mut rng = rng(13);
    let inst = random_instance(&mut rng, 4, 1.9);
    let policy = SoftmaxPolicy::new(inst.logits.clone()).unwrap();
    let reference = FiniteMeasure::new(inst.reference.clone()).unwrap();
    let batch = sample_batch(&reference, |x| inst.rewards[x], 50, 1).unwrap();
    for spec in [DivergenceSpec::UFKL, DivergenceSpec::URKL] {
        for style in LossStyle::ALL {
            let with = RpgConfig::new(spec, style, 0.2).unwrap();
            let without = RpgConfig { include_z: false, ..with };
            let a = grad(&with, &policy, &batch, 0.1);
            let b: Vec<f64> = grad(&without, &policy, &batch, 0.1).iter().map(|g| g * inst.z).collect();
            assert!(max_abs_diff(&a, &b) < 1e-12);
        }
    }
}

#[test]
fn rkl_closed_form_optimum_is_stationary() {
    let mut rng = rng(14);
    for beta in [0.1, 0.5, 2.0] {
        let inst = random_instance(&mut rng, 5, 1.3);
        let reference = FiniteMeasure::new(inst.reference.clone()).unwrap();
        let opt = rkl_optimum(&reference, &inst.rewards, beta).unwrap();
        let cfg = RpgConfig::new(DivergenceSpec::RKL, LossStyle::Reinforce, beta).unwrap();
        let g = exact_gradient(&cfg, &opt, &reference, &inst.rewards).unwrap();
        assert!(max_abs(&g) <= 1e-8, "{g:?}");
    }
}

#[test]
fn gppt_with_reward_and_log_prob() {
    let mut rng = rng(15);
    let inst = random_instance(&mut rng, 4, 1.0);
    let policy = SoftmaxPolicy::new(inst.logits.clone()).unwrap();
    let r = inst.rewards.clone();

    let g = gppt_gradient(&policy, |t, _, x| Ok(t.constant(r[x]))).unwrap();
    let fd = fd_gradient(|l| softmax(l).iter().zip(&r).map(|(p, r)| p * r).sum(), &inst.logits, 6e-6);
    assert!(max_abs_diff(&g, &fd) < 1e-9);

    let g = gppt_gradient(&policy, |t, th, x| Ok(t.log_softmax(th)?[x])).unwrap();
    let fd = fd_gradient(|l| softmax(l).iter().map(|p| p * p.ln()).sum(), &inst.logits, 6e-6);
    assert!(max_abs_diff(&g, &fd) < 1e-9);
}

#[test]
fn npg_direction_halves_when_beta_doubles() {
    let policy = SoftmaxPolicy::new(vec![0.2, -0.4, 0.9, 0.0]).unwrap();
    let g: Vec<f64> = vec![0.3, -0.1, -0.5, 0.3];
    let a = npg_direction(&policy, &g, 0.7).unwrap();
    let b = npg_direction(&policy, &g, 1.4).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - 2.0 * y).abs() < 1e-12);
    }
}

fn instance_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (2usize..7).prop_flat_map(|n| {
        (
            prop::collection::vec(-2.0f64..2.0, n),
            prop::collection::vec(0.05f64..2.0, n),
            prop::collection::vec(-1.0f64..1.0, n),
        )
    })
}

proptest! {
    #[test]
    fn enumeration_surrogate_is_negative_exact_gradient(
        (logits, reference, rewards) in instance_strategy(),
        beta in 0.0f64..1.5,
    ) {
        let policy = SoftmaxPolicy::new(logits).unwrap();
        let reference = FiniteMeasure::new(reference).unwrap();
        let batch = enumeration_batch(&reference, |x| rewards[x]).unwrap();
        for cfg in RpgConfig::all_variants(beta).unwrap() {
            let sur = grad(&cfg, &policy, &batch, 0.0);
            let exact = exact_gradient(&cfg, &policy, &reference, &rewards).unwrap();
            let scale = max_abs(&exact).max(1.0);
            for (s, e) in sur.iter().zip(&exact) {
                prop_assert!((s + e).abs() <= 1e-10 * scale, "{}", cfg);
            }
        }
    }

    #[test]
    fn styles_agree_on_sampled_batches(
        (logits, reference, rewards) in instance_strategy(),
        beta in 0.0f64..1.5,
        seed in any::<u64>(),
    ) {
        let policy = SoftmaxPolicy::new(logits).unwrap();
        let reference = FiniteMeasure::new(reference).unwrap();
        let batch = sample_batch(&reference, |x| rewards[x], 32, seed).unwrap();
        let b = batch.mean_reward();
        for spec in DivergenceSpec::ALL {
            let d = grad(&RpgConfig::new(spec, LossStyle::Differentiable, beta).unwrap(), &policy, &batch, b);
            let r = grad(&RpgConfig::new(spec, LossStyle::Reinforce, beta).unwrap(), &policy, &batch, b);
            let scale = max_abs(&d).max(1.0);
            prop_assert!(max_abs_diff(&d, &r) <= 1e-10 * scale, "{}", spec);
        }
    }

    #[test]
    fn surrogate_gradients_sum_to_zero((logits, reference, rewards) in instance_strategy(), seed in any::<u64>()) {
        // Softmax shift invariance: adding a constant to every logit leaves the loss unchanged.
        let policy = SoftmaxPolicy::new(logits).unwrap();
        let reference = FiniteMeasure::new(reference).unwrap();
        let batch = sample_batch(&reference, |x| rewards[x], 16, seed).unwrap();
        for cfg in RpgConfig::all_variants(0.3).unwrap() {
            let g = grad(&cfg, &policy, &batch, 0.0);
            prop_assert!(g.iter().sum::<f64>().abs() < 1e-10);
        }
    }
}
