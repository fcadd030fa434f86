use std::ops::ControlFlow;

use msrt_core::datagen::gen_dataset;
use msrt_core::msr::BackboneSpec;
use msrt_core::nn::Module;
use msrt_core::train::{
    adam_step, cross_entropy, evaluate, f1_scores, roc_auc, train, train_with, AdamState,
    ConfusionMatrix, TrainConfig,
};
use msrt_core::{Model, ModelConfig, Param};
use proptest::prelude::*;

fn labels(n: usize, c: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..c, n)
}

proptest! {
    #[test]
    fn cross_entropy_is_nonnegative(
        (rows, ys) in (1usize..6, 2usize..12)
            .prop_flat_map(|(b, c)| (prop::collection::vec(prop::collection::vec(-30.0f64..30.0, c), b), labels(b, c)))
    ) {
        prop_assert!(cross_entropy(&rows, &ys).unwrap() >= 0.0);
    }

    #[test]
    fn uniform_logits_cost_ln_c(c in 2usize..40, v in -100.0f64..100.0, y in 0usize..40) {
        let y = y % c;
        let l = cross_entropy(&[vec![v; c]], &[y]).unwrap();
        prop_assert!((l - (c as f64).ln()).abs() <= 1e-12 * v.abs().max(1.0));
        prop_assert_eq!(cross_entropy(&[vec![0.0; c]], &[y]).unwrap(), (c as f64).ln());
    }

    #[test]
    fn confusion_and_f1_match_recount(
        (truth, pred) in (1usize..300).prop_flat_map(|n| (labels(n, 10), labels(n, 10)))
    ) {
        let cm = ConfusionMatrix::from_predictions(&truth, &pred, 10).unwrap();
        let r = f1_scores(&cm);
        for c in 0..10 {
            let pairs = truth.iter().zip(&pred);
            let tp = pairs.clone().filter(|&(&t, &p)| t == c && p == c).count() as u64;
            let fp = pairs.clone().filter(|&(&t, &p)| t != c && p == c).count() as u64;
            let fn_ = pairs.clone().filter(|&(&t, &p)| t == c && p != c).count() as u64;
            for p in 0..10 {
                let n = truth.iter().zip(&pred).filter(|&(&t, &q)| t == c && q == p).count() as u64;
                prop_assert_eq!(cm.counts[c][p], n);
            }
            let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
            let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
            let f = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
            prop_assert_eq!(r.precision[c], precision);
            prop_assert_eq!(r.recall[c], recall);
            prop_assert_eq!(r.f1[c], f);
            prop_assert_eq!(r.degenerate.contains(&c), tp + fp == 0 || tp + fn_ == 0);
        }
    }

    #[test]
    fn auc_is_the_pairwise_statistic(
        (scores, truth) in (2usize..200)
            .prop_flat_map(|n| (prop::collection::vec(0u8..12, n), prop::collection::vec(any::<bool>(), n)))
    ) {
        prop_assume!(truth.iter().any(|&t| t) && truth.iter().any(|&t| !t));
        let s: Vec<f64> = scores.iter().map(|&v| v as f64 / 11.0).collect();
        let roc = roc_auc(&s, &truth).unwrap();
        let (mut twice, mut pos, mut neg) = (0u64, 0u64, 0u64);
        for (i, &ti) in truth.iter().enumerate() {
            if ti { pos += 1 } else { neg += 1 }
            for (j, &tj) in truth.iter().enumerate() {
                if ti && !tj {
                    twice += if s[i] > s[j] { 2 } else if s[i] == s[j] { 1 } else { 0 };
                }
            }
        }
        prop_assert_eq!(roc.auc, twice as f64 / (2 * pos * neg) as f64);
        prop_assert_eq!(roc.points.first(), Some(&(0.0, 0.0)));
        prop_assert_eq!(roc.points.last(), Some(&(1.0, 1.0)));
    }

    #[test]
    fn adam_with_zero_rate_is_identity(
        (w, g) in (1usize..20).prop_flat_map(|n| (prop::collection::vec(-5.0f64..5.0, n), prop::collection::vec(-5.0f64..5.0, n))),
        steps in 1usize..5,
    ) {
        let mut p = Param::new(&[w.len()], w.clone()).unwrap();
        let cfg = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
        let mut state = AdamState::new(&[w.len()]);
        for _ in 0..steps {
            adam_step(&mut [&mut p], &[g.clone()], &mut state, &cfg).unwrap();
        }
        prop_assert_eq!(p.data(), &w[..]);
    }
}

fn small_run(seed: u64) -> (Vec<u64>, Vec<u64>) {
    let data = gen_dataset(2, 5).unwrap();
    let samples: Vec<&[f64]> = data.iter().map(|r| r.samples.as_slice()).collect();
    let ys: Vec<usize> = data.iter().map(|r| r.label).collect();
    let mut model = Model::new(ModelConfig {
        seed,
        ..ModelConfig::toy(1000, 8)
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        learning_rate: 1e-3,
        seed,
        ..TrainConfig::default()
    };
    let out = train(&mut model, &samples, &ys, &cfg).unwrap();
    assert_eq!(out.steps, cfg.steps_for(samples.len()));
    let losses = out.trajectory.iter().map(|e| e.loss.to_bits()).collect();
    let mut named = Vec::new();
    model.named_params("", &mut named);
    let weights = named.iter().flat_map(|(_, p)| p.data().iter().map(|v| v.to_bits())).collect();
    (losses, weights)
}

#[test]
fn training_is_reproducible_under_seed() {
    let a = small_run(3);
    assert_eq!(a, small_run(3));
    assert_ne!(a.0, small_run(4).0);
}

/// Narrower than the default model so the overfit run stays fast.
fn overfit_model() -> Model {
    Model::new(ModelConfig {
        backbone: BackboneSpec {
            stem_channels: 8,
            stem_kernel: 7,
            stage_channels: [8, 16, 16, 32],
            blocks_per_stage: 1,
        },
        fpn_channels: 16,
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        d_ff: 32,
        ..ModelConfig::default()
    })
    .unwrap()
}

#[test]
fn overfit_loss_trends_down() {
    let data = gen_dataset(8, 11).unwrap();
    let samples: Vec<&[f64]> = data.iter().map(|r| r.samples.as_slice()).collect();
    let ys: Vec<usize> = data.iter().map(|r| r.label).collect();
    let mut model = overfit_model();
    let cfg = TrainConfig {
        epochs: 200,
        learning_rate: 5e-4,
        ..TrainConfig::default()
    };
    let out = train_with(&mut model, &samples, &ys, &cfg, |m, _| {
        if evaluate(m, &samples, &ys).unwrap().accuracy >= 0.99 {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })
    .unwrap();
    let losses: Vec<f64> = out.trajectory.iter().map(|e| e.loss).collect();
    assert!(losses.len() < 200, "never fit: {losses:?}");
    let upticks: Vec<f64> = losses[2..]
        .windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| w[1] / w[0] - 1.0)
        .collect();
    assert!(
        upticks.len() <= 2 && upticks.iter().all(|&u| u < 0.05),
        "losses {losses:?}"
    );
}
