mod common;

use rpg_core::clipping::ClipParams;
use rpg_core::divergences::DivergenceSpec;
use rpg_core::measures::{sample_batch, FiniteMeasure, SoftmaxPolicy};
use rpg_core::objectives::{kl_component, LossStyle, RpgConfig};
use rpg_core::training::{
    loss_and_gradient, run_training, BanditEnv, BatchMode, RefUpdateRule, TrainConfig,
};

use common::*;

fn env() -> BanditEnv<f64> {
    BanditEnv::new(vec![0.2, 1.0, -0.5, 0.6]).unwrap()
}

#[test]
fn clip_is_neutral_when_weights_stay_in_band() {
    // Reference reset every iteration and a single epoch: every weight is 1
    // when the loss is evaluated.
    for rpg in RpgConfig::all_variants(0.1).unwrap() {
        let mut cfg = TrainConfig::new(rpg, 0.3, 60, 9);
        cfg.ref_update = RefUpdateRule::EveryK { k: 1 };
        let plain = run_training(&env(), &cfg).unwrap();
        cfg.clip = Some(ClipParams::default());
        let clipped = run_training(&env(), &cfg).unwrap();
        assert_eq!(plain, clipped, "{rpg}");
    }
}

#[test]
fn clip_changes_trace_when_weights_leave_band() {
    let rpg = RpgConfig::new(DivergenceSpec::URKL, LossStyle::Reinforce, 0.05).unwrap();
    let mut cfg = TrainConfig::new(rpg, 1.0, 40, 9);
    cfg.epochs_per_iter = 8;
    let plain = run_training(&env(), &cfg).unwrap();
    cfg.clip = Some(ClipParams::default());
    let clipped = run_training(&env(), &cfg).unwrap();
    assert_ne!(plain.final_logits, clipped.final_logits);
}

#[test]
fn on_policy_gradient_after_reference_reset() {
    let mut rng = rng(21);
    for spec in [DivergenceSpec::RKL, DivergenceSpec::URKL] {
        for style in LossStyle::ALL {
            let rpg = RpgConfig::new(spec, style, 0.3).unwrap();
            let cfg = TrainConfig::new(rpg, 0.1, 1, 0);
            let inst = random_instance(&mut rng, 5, 1.0);
            let policy = SoftmaxPolicy::new(inst.logits.clone()).unwrap();
            let old = policy.to_measure();
            let batch = sample_batch(&old, |x| inst.rewards[x], 40, 3).unwrap();
            let b = batch.mean_reward();
            let (_, g) = loss_and_gradient(&cfg, &policy, &batch, b).unwrap();

            // −mean[(R − b + β·C(w = 1)) ∇log π]
            let p = policy.probs();
            let mut expected = vec![0.0; 5];
            for (m, s) in batch.weighted() {
                let weight = s.reward - b + 0.3 * kl_component(spec, 1.0, 0.0);
                for (e, sc) in expected.iter_mut().zip(score(&p, s.outcome)) {
                    *e -= m * weight * sc;
                }
            }
            assert!(max_abs_diff(&g, &expected) < 1e-10, "{rpg}");
        }
    }
}

#[test]
fn reference_updates_reset_divergence_to_old() {
    let rpg = RpgConfig::new(DivergenceSpec::RKL, LossStyle::Differentiable, 0.2).unwrap();
    let mut cfg = TrainConfig::new(rpg, 0.3, 50, 4);
    cfg.ref_update = RefUpdateRule::EveryK { k: 10 };
    let trace = run_training(&env(), &cfg).unwrap();
    let updates: Vec<_> = trace.records.iter().filter(|r| r.ref_updated).map(|r| r.iteration).collect();
    assert_eq!(updates, vec![10, 20, 30, 40, 50]);
    for r in &trace.records {
        if r.ref_updated {
            assert!(r.div_to_old.abs() < 1e-12);
        } else {
            assert!(r.div_to_old > 0.0);
        }
    }
    let last = trace.records.last().unwrap();
    assert!(last.div_to_initial > trace.records[9].div_to_initial);
}

#[test]
fn kl_threshold_rule_fires() {
    let rpg = RpgConfig::new(DivergenceSpec::RKL, LossStyle::Reinforce, 0.01).unwrap();
    let mut cfg = TrainConfig::new(rpg, 0.5, 80, 5);
    cfg.ref_update = RefUpdateRule::KlThreshold { kappa: 0.02 };
    let trace = run_training(&env(), &cfg).unwrap();
    assert!(trace.records.iter().any(|r| r.ref_updated));
    assert!(trace.records.iter().all(|r| r.div_to_old <= 0.02 + 1.0));
}

#[test]
fn same_seed_same_trace() {
    let rpg = RpgConfig::new(DivergenceSpec::UFKL, LossStyle::Differentiable, 0.1).unwrap();
    let mut cfg = TrainConfig::new(rpg, 0.2, 80, 77);
    cfg.clip = Some(ClipParams::default());
    cfg.epochs_per_iter = 3;
    cfg.initial_reference = Some(vec![0.5, 0.2, 0.4, 0.6]);
    assert_eq!(run_training(&env(), &cfg).unwrap(), run_training(&env(), &cfg).unwrap());
}

#[test]
fn line_search_keeps_objective_monotone() {
    for rpg in RpgConfig::all_variants(0.5).unwrap() {
        let mut cfg = TrainConfig::new(rpg, 5.0, 60, 0);
        cfg.batch_mode = BatchMode::Enumeration;
        cfg.line_search = true;
        cfg.initial_reference = Some(vec![0.1, 0.6, 0.2, 0.9]);
        let trace = run_training(&env(), &cfg).unwrap();
        for w in trace.records.windows(2) {
            assert!(w[1].j_exact >= w[0].j_exact, "{rpg}");
        }
    }
}

#[test]
fn fixed_reference_rkl_reaches_tilted_distribution() {
    let beta = 0.8;
    let reference = vec![0.4, 0.1, 0.3, 0.2];
    let rpg = RpgConfig::new(DivergenceSpec::RKL, LossStyle::Reinforce, beta).unwrap();
    let mut cfg = TrainConfig::new(rpg, 0.5, 2000, 0);
    cfg.batch_mode = BatchMode::Enumeration;
    cfg.initial_reference = Some(reference.clone());
    let e = env();
    let trace = run_training(&e, &cfg).unwrap();
    let fin = trace.final_policy().unwrap().probs();
    let tilted: Vec<f64> = reference.iter().zip(e.rewards()).map(|(q, r)| q * (r / beta).exp()).collect();
    let s: f64 = tilted.iter().sum();
    for (a, t) in fin.iter().zip(&tilted) {
        assert!((a - t / s).abs() < 1e-6);
    }
    let measure = FiniteMeasure::new(reference).unwrap();
    assert_eq!(measure.len(), 4);
}
