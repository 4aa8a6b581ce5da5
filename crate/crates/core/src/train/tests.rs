use std::collections::BTreeMap;

use super::*;
use crate::data::{generate, make_split, SyntheticSpec};
use crate::model::{load_checkpoint, AdapterConfig, BackboneConfig, HeadConfig};

fn toy_setup(seed: u64) -> (Model, Dataset, GcdSplit) {
    let spec = SyntheticSpec {
        num_classes: 4,
        num_seen: 2,
        samples_per_class: 12,
        token_len: 2,
        token_dim: 4,
        class_separation: 3.0,
        noise_sigma: 0.5,
        seed,
    };
    let data = generate(&spec).unwrap();
    let split = make_split(&data, 2, 0.5, seed).unwrap();
    let bb = BackboneConfig {
        embed_dim: 8,
        num_blocks: 2,
        num_heads: 2,
        mlp_hidden: 16,
        seq_len: 3,
        token_dim: 4,
    };
    let mut m = Model::new_backbone(&bb, seed).unwrap();
    m.freeze_backbone();
    m.attach_adapters(
        &AdapterConfig {
            bottleneck_dim: 4,
            adapted_blocks: 2,
            ..AdapterConfig::default()
        },
        seed,
    )
    .unwrap();
    m.attach_heads(
        &HeadConfig {
            proj_dim: 4,
            num_classes: 4,
        },
        seed,
    )
    .unwrap();
    (m, data, split)
}

fn toy_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        warmup_epochs: 1,
        batch_size: 8,
        ..TrainConfig::default()
    }
}

#[test]
fn cosine_lr_endpoints() {
    assert_eq!(cosine_lr(0, 0.1, 60), 0.1);
    assert!((cosine_lr(60, 0.1, 60) - 1e-4).abs() < 1e-15);
    assert!((cosine_lr(30, 0.1, 60) - 0.5 * (0.1 + 1e-4)).abs() < 1e-15);
    for e in 0..60 {
        assert!(cosine_lr(e + 1, 0.1, 60) <= cosine_lr(e, 0.1, 60));
    }
}

#[test]
fn teacher_schedule_values() {
    let s = TeacherSchedule::default();
    assert_eq!(teacher_temp(0, &s), 0.07);
    assert!((teacher_temp(15, &s) - 0.055).abs() < 1e-15);
    assert_eq!(teacher_temp(30, &s), 0.04);
    assert_eq!(teacher_temp(59, &s), 0.04);
}

#[test]
fn sgd_matches_unrolled_recurrence() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::vector(vec![1.0, -2.0]), true);
    store.insert("f", Tensor::vector(vec![3.0]), false);
    let (lr, mu, wd) = (0.1, 0.9, 0.01);
    let g1 = [0.5, 0.25];
    let g2 = [-1.0, 2.0];
    let mut opt = Sgd::new();
    for g in [g1, g2] {
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::vector(g.to_vec()));
        grads.insert("f".to_string(), Tensor::vector(vec![1.0]));
        opt.step(&mut store, &grads, lr, mu, wd).unwrap();
    }
    for (i, p0) in [1.0, -2.0].into_iter().enumerate() {
        let v1 = g1[i];
        let p1 = p0 - lr * (v1 + wd * p0);
        let v2 = mu * v1 + g2[i];
        let p2 = p1 - lr * (v2 + wd * p1);
        assert!((store.get("w").unwrap().data()[i] - p2).abs() < 1e-15);
    }
    assert_eq!(store.get("f").unwrap().data(), &[3.0]);
}

#[test]
fn run_estimates_pi_once_and_keeps_backbone() {
    let (m, data, split) = toy_setup(1);
    let frozen = m.params.frozen_fingerprint();
    let dir = tempfile::tempdir().unwrap();
    let out = train_run(m, &data, &split, &toy_cfg(), Some(dir.path())).unwrap();
    assert_eq!(out.pi_estimates, 1);
    assert_eq!(out.metrics.len(), 3);
    assert!(!out.metrics[0].da_active && out.metrics[1].da_active);
    assert_eq!(out.model.params.frozen_fingerprint(), frozen);
    for r in &out.metrics {
        assert!((r.loss.total - r.loss.recombine(0.35)).abs() < 1e-12);
    }
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv, metrics_csv(&out.metrics));
    assert!(csv.starts_with("epoch,lr,tau_t,"));
    let (warm, meta) = load_checkpoint(&dir.path().join("warmup.ckpt")).unwrap();
    assert_eq!(meta.epoch, 1);
    assert_eq!(warm.params.frozen_fingerprint(), frozen);
    let (fin, _) = load_checkpoint(&dir.path().join("final.ckpt")).unwrap();
    assert_eq!(fin, out.model);
}

#[test]
fn run_is_deterministic() {
    let (m, data, split) = toy_setup(2);
    let a = train_run(m.clone(), &data, &split, &toy_cfg(), None).unwrap();
    let b = train_run(m, &data, &split, &toy_cfg(), None).unwrap();
    assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
    assert_eq!(a.model, b.model);
}

#[test]
fn da_off_never_estimates() {
    let (m, data, split) = toy_setup(3);
    let cfg = TrainConfig {
        da_enabled: false,
        ..toy_cfg()
    };
    let out = train_run(m, &data, &split, &cfg, None).unwrap();
    assert_eq!(out.pi_estimates, 0);
    assert!(out.pi.is_none() && out.metrics.iter().all(|r| !r.da_active));
}

#[test]
fn zero_lr_leaves_params_unchanged() {
    let (m, data, split) = toy_setup(4);
    let cfg = TrainConfig {
        lr0: 0.0,
        ..toy_cfg()
    };
    let out = train_run(m.clone(), &data, &split, &cfg, None).unwrap();
    assert_eq!(out.model.params, m.params);
}

#[test]
fn nan_aborts_with_location() {
    let (mut m, data, split) = toy_setup(5);
    m.params.get_mut("head.prototypes").unwrap().data_mut()[0] = f64::NAN;
    match train_run(m, &data, &split, &toy_cfg(), None) {
        Err(Error::Diverged {
            epoch: 0, batch: 0, ..
        }) => {}
        other => panic!("expected divergence, got {:?}", other.err()),
    }
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig {
        batch_size: 7,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        warmup_epochs: 61,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        lr0: -1.0,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
    let json = serde_json::to_string(&TrainConfig::default()).unwrap();
    let back: TrainConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, TrainConfig::default());
}

#[test]
fn pretraining_moves_backbone_then_freezes() {
    let (m, data, _) = toy_setup(6);
    let before = m.params.get("backbone.embed.weight").unwrap().clone();
    let cfg = PretrainConfig {
        epochs: 2,
        batch_size: 16,
        ..PretrainConfig::default()
    };
    let p = pretrain(m, &data, &cfg).unwrap();
    assert_ne!(p.params.get("backbone.embed.weight").unwrap(), &before);
    assert_eq!(p.params.trainable_count(), 0);
    assert!(p.params.iter().all(|(n, _)| n.starts_with("backbone.")));
    assert_eq!(p.head.num_classes, 4);
}
