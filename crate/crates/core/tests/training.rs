//! Training loops: step schedules, bookkeeping and reproducibility.

use icrlab::data::{sample_sentence, Sentence, TaskConfig};
use icrlab::model::{AttentionKind, FamilyTag, ModelId};
use icrlab::training::{
    algorithm1, initial_scale, ngd_step_scalars, noise_log_odds, phase_one_length, train_finite, train_full,
    train_population, GradientSource, Optimizer, TrainConfig,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model(family: FamilyTag, kind: AttentionKind) -> ModelId {
    ModelId { family, kind }
}

fn dataset(cfg: &TaskConfig, m: usize, seed: u64) -> Vec<Sentence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m).map(|_| sample_sentence(cfg, &mut rng).unwrap()).collect()
}

#[test]
fn softmax_scale_and_phase_length() {
    assert!((initial_scale(5, 256) - 14.862_944).abs() < 1e-6);
    assert_eq!(phase_one_length(5, 256, 0.1), 139);
    assert!((noise_log_odds(0.5)).abs() < 1e-15);
    assert!((noise_log_odds(0.8) - 4f64.ln()).abs() < 1e-15);
}

#[test]
fn exact_gradient_schedule_with_five_triggers() {
    let cfg = TaskConfig::default();
    let tcfg = TrainConfig { steps: 300, gradient: GradientSource::Exact, eval_every: 100, eval_size: 64, ..TrainConfig::default() };
    let out = train_population(&cfg, model(FamilyTag::Reparam, AttentionKind::Linear), &tcfg).unwrap();
    assert_eq!(out.trajectory.records.len(), 301);
    for q in 1..=5 {
        let col = out.trajectory.column(&format!("lambda_{q}")).unwrap();
        for (t, l) in col.iter().enumerate() {
            let expect = 0.1 * t as f64 / 5f64.sqrt();
            assert!((l - expect).abs() <= 1e-12 * expect.max(1.0), "q {q} t {t}: {l} vs {expect}");
        }
    }
    // Step-0 population loss of the zero model is ln N.
    assert!((out.trajectory.records[0].loss_pop - 60f64.ln()).abs() < 1e-12);
    assert!(out.trajectory.stall_steps().is_empty());
}

#[test]
fn relu_scheme_follows_the_same_schedule() {
    let cfg = TaskConfig { triggers: vec![1], ..TaskConfig::default() };
    let tcfg = TrainConfig { steps: 100, gradient: GradientSource::Exact, eval_every: 50, eval_size: 32, ..TrainConfig::default() };
    let lin = train_population(&cfg, model(FamilyTag::Reparam, AttentionKind::Linear), &tcfg).unwrap();
    let relu = train_population(&cfg, model(FamilyTag::Reparam, AttentionKind::Relu), &tcfg).unwrap();
    assert_eq!(lin.trajectory.column("lambda_1"), relu.trajectory.column("lambda_1"));
}

#[test]
fn unknown_noise_schedule_is_linear_in_t() {
    let cfg = TaskConfig::default().with_noise(0.3);
    let data = dataset(&cfg, 2048, 21);
    let tcfg = TrainConfig { steps: 250, eval_every: 50, eval_size: 64, ..TrainConfig::default() };
    let (out, stats) = algorithm1(&cfg, AttentionKind::Linear, &data, &tcfg).unwrap();
    assert_eq!(stats.size, 2048);
    let lam = out.trajectory.column("lambda").unwrap();
    for (t, l) in lam.iter().enumerate() {
        assert!((l - 0.1 * t as f64).abs() <= 1e-12 * (0.1 * t as f64).max(1.0), "t {t}: {l}");
    }
    let emp: Vec<f64> = out.trajectory.records.iter().map(|r| r.loss_emp).collect();
    assert!(emp.windows(2).all(|w| w[1] < w[0]));
    assert_eq!(out.params.scalars.gamma, Some(stats.gamma_hat));
}

#[test]
fn unknown_noise_rejects_softmax() {
    let cfg = TaskConfig::default().with_noise(0.3);
    let data = dataset(&cfg, 64, 22);
    assert!(algorithm1(&cfg, AttentionKind::Softmax, &data, &TrainConfig::default()).is_err());
}

#[test]
fn zero_steps_records_only_the_start() {
    let cfg = TaskConfig { context_len: 32, embed_dim: 128, ..TaskConfig::default() };
    let tcfg = TrainConfig { steps: 0, batch_size: 16, eval_size: 16, init_std: 0.0, ..TrainConfig::default() };
    let out = train_population(&cfg, model(FamilyTag::Origin, AttentionKind::Linear), &tcfg).unwrap();
    assert_eq!(out.trajectory.records.len(), 1);
    let r = &out.trajectory.records[0];
    assert!((r.loss_pop - 60f64.ln()).abs() < 1e-12);
    assert!(!r.stalled);
    assert!(r.loss_ood.is_finite());
}

#[test]
fn zero_origin_init_stalls_attention_blocks() {
    // With V = W = 0 only F receives gradient; the record is not a stall
    // because one block moved.
    let cfg = TaskConfig { context_len: 32, ..TaskConfig::default() };
    let tcfg = TrainConfig { steps: 3, batch_size: 16, eval_size: 16, init_std: 0.0, ..TrainConfig::default() };
    let out = train_population(&cfg, model(FamilyTag::Origin, AttentionKind::Relu), &tcfg).unwrap();
    let v = out.trajectory.column("norm_v").unwrap();
    let f = out.trajectory.column("norm_f").unwrap();
    assert_eq!(v[1], 0.0);
    assert!((f[1] - 0.1).abs() < 1e-12);
}

#[test]
fn same_seed_same_trajectory() {
    let cfg = TaskConfig { context_len: 32, ..TaskConfig::default() }.with_noise(0.4);
    let tcfg = TrainConfig { steps: 5, batch_size: 32, eval_size: 32, eval_every: 2, seed: 9, ..TrainConfig::default() };
    let m = model(FamilyTag::ReparamW, AttentionKind::Softmax);
    let a = train_population(&cfg, m, &tcfg).unwrap();
    let b = train_population(&cfg, m, &tcfg).unwrap();
    // NaN fields compare unequal, so compare the debug strings.
    assert_eq!(format!("{:?}", a.trajectory), format!("{:?}", b.trajectory));
    let c = train_population(&cfg, m, &TrainConfig { seed: 10, ..tcfg }).unwrap();
    assert_ne!(format!("{:?}", a.trajectory), format!("{:?}", c.trajectory));
}

#[test]
fn exact_gradient_needs_scalar_model() {
    let cfg = TaskConfig::default();
    let tcfg = TrainConfig { steps: 1, gradient: GradientSource::Exact, ..TrainConfig::default() };
    assert!(train_population(&cfg, model(FamilyTag::Origin, AttentionKind::Linear), &tcfg).is_err());
    assert!(train_full(&cfg, model(FamilyTag::Reparam, AttentionKind::Linear), &tcfg).is_err());
}

#[test]
fn invalid_settings_are_rejected() {
    let cfg = TaskConfig::default();
    let m = model(FamilyTag::Reparam, AttentionKind::Linear);
    for bad in [
        TrainConfig { eta: 0.0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { eval_every: 0, ..TrainConfig::default() },
    ] {
        assert!(train_population(&cfg, m, &bad).is_err());
    }
}

#[test]
fn finite_training_reduces_loss() {
    let cfg = TaskConfig::default();
    let data = dataset(&cfg, 256, 23);
    let tcfg = TrainConfig { batch_size: 64, eval_size: 64, ..TrainConfig::default() };
    let out = train_finite(&cfg, model(FamilyTag::Reparam, AttentionKind::Softmax), &data, 5, &tcfg).unwrap();
    assert_eq!(out.trajectory.records.len(), 5 * 4 + 1);
    let first = out.trajectory.records[0].loss_pop;
    let last = out.trajectory.last().loss_pop;
    assert!(last < first, "{first} -> {last}");
    assert!(train_finite(&cfg, model(FamilyTag::Reparam, AttentionKind::Linear), &[], 1, &tcfg).is_err());
}

#[test]
fn plain_unknown_noise_steps_follow_the_derivative() {
    let cfg = TaskConfig::default().with_noise(0.5);
    let data = dataset(&cfg, 512, 24);
    let tcfg = TrainConfig { steps: 3, optimizer: Optimizer::Plain, eta: 1.0, eval_size: 16, ..TrainConfig::default() };
    let (out, _) = algorithm1(&cfg, AttentionKind::Relu, &data, &tcfg).unwrap();
    let lam = out.trajectory.column("lambda").unwrap();
    for (t, r) in out.trajectory.records.iter().take(3).enumerate() {
        assert!((lam[t + 1] - lam[t] - r.grad_norm).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn normalized_step_has_length_eta(g in proptest::collection::vec(-5.0f64..5.0, 1..6), eta in 0.01f64..1.0) {
        prop_assume!(g.iter().any(|x| x.abs() > 1e-6));
        let mut x = vec![0.0; g.len()];
        prop_assert!(ngd_step_scalars(&mut x, &g, eta));
        let len = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((len - eta).abs() < 1e-12);
        let dot: f64 = x.iter().zip(&g).map(|(a, b)| a * b).sum();
        prop_assert!(dot < 0.0);
    }

    #[test]
    fn zero_gradient_is_a_stall(n in 1usize..6) {
        let mut x = vec![1.5; n];
        prop_assert!(!ngd_step_scalars(&mut x, &vec![0.0; n], 0.1));
        prop_assert!(x.iter().all(|&v| v == 1.5));
    }
}

#[test]
fn normalized_step_survives_tiny_gradients() {
    let mut x = vec![0.0; 3];
    assert!(ngd_step_scalars(&mut x, &[3e-170, 4e-170, 0.0], 0.1));
    assert!((x[0] + 0.06).abs() < 1e-15 && (x[1] + 0.08).abs() < 1e-15);
    let mut y = vec![0.0; 2];
    assert!(ngd_step_scalars(&mut y, &[3e-310, 4e-310], 0.1));
    assert!((y[0] + 0.06).abs() < 1e-6 && (y[1] + 0.08).abs() < 1e-6);
}
