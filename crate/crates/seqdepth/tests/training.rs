//! End-to-end training pipeline checks on small synthetic datasets.

use seqdepth::adversary::DiscriminatorConfig;
use seqdepth::backbone::{BackboneConfig, BackbonePreset};
use seqdepth::error::Error;
use seqdepth::pipeline::{
    self, load_checkpoint, save_checkpoint, Models, TrainConfig,
};
use seqdepth::synthdata::{generate_synthetic_sequence, write_sequence, SceneSpec};
use std::path::Path;

fn small_backbone() -> BackboneConfig {
    BackboneConfig {
        preset: BackbonePreset::Tiny,
        encoder_channels: [8, 12, 16, 24],
        feature_channels: 16,
        output_stride: 4,
    }
}

fn small_disc() -> DiscriminatorConfig {
    DiscriminatorConfig {
        block_channels: [8, 8, 16, 16],
        ..Default::default()
    }
}

fn make_dataset(root: &Path, n_sequences: usize, n_frames: usize, seed: u64) {
    let spec = SceneSpec {
        n_objects: 4,
        resolution: (32, 32),
        ..SceneSpec::default()
    };
    for i in 0..n_sequences {
        let s = generate_synthetic_sequence(&spec, n_frames, seed + i as u64).unwrap();
        write_sequence(root, &format!("{i:06}"), &s, 1000.0).unwrap();
    }
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        warmup_epochs: 1,
        n_frames: 5,
        batch_sequences: 4,
        gen_lr: 1e-3,
        disc_lr: 0.01,
        seed: 7,
        use_clstm: true,
        use_gan: true,
        augment: true,
        backbone: small_backbone(),
        discriminator: small_disc(),
        ..TrainConfig::default()
    }
}

#[test]
fn train_evaluate_smoke_with_gan() {
    let tmp = tempfile::tempdir().unwrap();
    make_dataset(tmp.path(), 12, 5, 100);
    let cfg = quick_config();
    let out = pipeline::train(&cfg, tmp.path(), None).unwrap();

    // warmup honored: epoch 0 has no temporal term and no discriminator loss
    for s in out.log.steps.iter().filter(|s| s.epoch == 0) {
        assert_eq!(s.l_temporal, 0.0);
        assert_eq!(s.d_loss, 0.0);
    }
    // alternation after warmup: every step carries both updates
    let post: Vec<_> = out.log.steps.iter().filter(|s| s.epoch >= 1).collect();
    assert!(!post.is_empty());
    for s in &post {
        assert!(s.l_temporal > 0.0, "temporal term missing post-warmup");
        assert!(s.d_loss > 0.0, "discriminator update missing post-warmup");
    }
    // combined-objective accounting at every step
    for s in &out.log.steps {
        let expect = s.l_spatial + cfg.loss.alpha * s.l_temporal;
        assert!(
            (s.l_total - expect).abs() < 1e-6,
            "step {}: total {} vs spatial+alpha*temporal {}",
            s.step,
            s.l_total,
            expect
        );
    }
    // per-epoch validation records exist
    assert_eq!(out.log.epochs.len(), cfg.epochs);

    let report = pipeline::evaluate(&out.checkpoint, tmp.path(), 16).unwrap();
    report.validate().unwrap();
    assert!(report.rel > 0.0 && report.rel.is_finite());
    assert!(report.tcc > -1.0 && report.tcc <= 1.0);
    assert!(report.tmc.is_finite());
    assert_eq!(report.n_sequences, 12);
}

#[test]
fn same_seed_identical_trajectories_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    make_dataset(tmp.path(), 8, 5, 200);
    let cfg = TrainConfig {
        epochs: 1,
        warmup_epochs: 0,
        use_gan: false,
        ..quick_config()
    };
    let a = pipeline::train(&cfg, tmp.path(), None).unwrap();
    let b = pipeline::train(&cfg, tmp.path(), None).unwrap();
    assert_eq!(a.log.steps.len(), b.log.steps.len());
    for (x, y) in a.log.steps.iter().zip(b.log.steps.iter()) {
        assert!((x.l_total - y.l_total).abs() < 1e-6);
        assert!((x.l_depth - y.l_depth).abs() < 1e-6);
    }
    let ra = pipeline::evaluate(&a.checkpoint, tmp.path(), 5).unwrap();
    let rb = pipeline::evaluate(&b.checkpoint, tmp.path(), 5).unwrap();
    assert_eq!(ra, rb);
}

#[test]
fn overfit_single_batch_drops_spatial_loss() {
    // one batch of four sequences revisited every epoch
    let tmp = tempfile::tempdir().unwrap();
    make_dataset(tmp.path(), 4, 5, 300);
    let cfg = TrainConfig {
        epochs: 200,
        warmup_epochs: 199,
        use_gan: false,
        augment: false,
        gen_lr: 3e-3,
        lr_decay_every: 1000,
        ..quick_config()
    };
    let out = pipeline::train(&cfg, tmp.path(), None).unwrap();
    let first = out.log.steps.first().unwrap().l_spatial;
    let last = out.log.steps.last().unwrap().l_spatial;
    assert!(
        last < 0.2 * first,
        "spatial loss {last} did not fall below 20% of initial {first}"
    );
}

#[test]
fn checkpoint_restores_identical_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    make_dataset(tmp.path(), 6, 5, 400);
    let cfg = TrainConfig {
        epochs: 1,
        warmup_epochs: 0,
        use_gan: false,
        ..quick_config()
    };
    let out = pipeline::train(&cfg, tmp.path(), None).unwrap();
    let path = tmp.path().join("model.ckpt");
    save_checkpoint(&out.checkpoint, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();

    let m1 = Models::from_checkpoint(&out.checkpoint).unwrap();
    let m2 = Models::from_checkpoint(&loaded).unwrap();
    let spec = SceneSpec {
        n_objects: 3,
        resolution: (32, 32),
        ..SceneSpec::default()
    };
    let s = generate_synthetic_sequence(&spec, 4, 999).unwrap();
    let p1 = m1.predict_sequence(&s.rgb).unwrap();
    let p2 = m2.predict_sequence(&s.rgb).unwrap();
    for (a, b) in p1.iter().zip(p2.iter()) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}

#[test]
fn divergence_aborts_with_rescue_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    make_dataset(tmp.path(), 4, 5, 500);
    let rescue = tmp.path().join("rescue.ckpt");
    let cfg = TrainConfig {
        epochs: 30,
        warmup_epochs: 0,
        use_gan: false,
        gen_lr: 1e6, // force numerical blowup
        ..quick_config()
    };
    match pipeline::train(&cfg, tmp.path(), Some(&rescue)) {
        Err(Error::Divergence { .. }) => {
            assert!(rescue.exists(), "rescue checkpoint missing");
            let b = load_checkpoint(&rescue).unwrap();
            assert!(Models::from_checkpoint(&b).is_ok());
        }
        other => panic!("expected divergence, got {:?}", other.map(|_| ())),
    }
}
