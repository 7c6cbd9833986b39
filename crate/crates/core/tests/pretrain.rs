use otta::harness::pretrain::evaluate;
use otta::harness::{initial_model, load_checkpoint, pretrain, save_checkpoint, ExperimentConfig, PretrainConfig};
use otta::streamgen::{generate_source, StreamConfig};

fn quick() -> (ExperimentConfig, Vec<otta::streamgen::SourceSample>, PretrainConfig) {
    let cfg = ExperimentConfig::default();
    let source = generate_source(&StreamConfig {
        source_count: 600,
        ..cfg.stream.clone()
    })
    .unwrap();
    let p = PretrainConfig {
        max_epochs: 3,
        ..cfg.pretrain.clone()
    };
    (cfg, source, p)
}

#[test]
fn equal_seeds_give_identical_checkpoints() {
    let (cfg, source, p) = quick();
    let a = pretrain(initial_model(&cfg).unwrap(), &source, &p, 22).unwrap();
    let b = pretrain(initial_model(&cfg).unwrap(), &source, &p, 22).unwrap();
    let (mut ba, mut bb) = (Vec::new(), Vec::new());
    a.model.write_checkpoint(&mut ba).unwrap();
    b.model.write_checkpoint(&mut bb).unwrap();
    assert_eq!(ba, bb);
    assert_eq!(a.log_csv(), b.log_csv());
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let (cfg, source, p) = quick();
    let o = pretrain(initial_model(&cfg).unwrap(), &source, &p, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &o.model).unwrap();
    let back = load_checkpoint(&path).unwrap();
    for s in &source[..20] {
        assert_eq!(o.model.predict(&s.features).unwrap(), back.predict(&s.features).unwrap());
    }
}

#[test]
fn log_has_one_row_per_epoch_plus_baseline() {
    let (cfg, source, p) = quick();
    let o = pretrain(initial_model(&cfg).unwrap(), &source, &p, 3).unwrap();
    let csv = o.log_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epoch,train_loss,val_mpjpe_mm"));
    assert!(lines.next().unwrap().starts_with("0,,"));
    assert_eq!(lines.count(), o.log.len());
}

#[test]
fn training_beats_the_untrained_model() {
    let cfg = ExperimentConfig::default();
    let source = generate_source(&cfg.stream).unwrap();
    let init = initial_model(&cfg).unwrap();
    let n_val = (source.len() as f64 * cfg.pretrain.validation_fraction).round() as usize;
    let untrained = evaluate(&init, &source[..n_val]).unwrap();
    let o = pretrain(init, &source, &cfg.pretrain, cfg.seed).unwrap();
    assert_eq!(o.initial_val_mpjpe_mm, untrained);
    let trained = evaluate(&o.model, &source[..n_val]).unwrap();
    assert_eq!(trained, o.best_val_mpjpe_mm);
    // 2D keypoints alone leave limb depth ambiguous, which floors the
    // validation error well above a fifth of the untrained error
    assert!(untrained / trained >= 2.5, "untrained {untrained:.1} mm, trained {trained:.1} mm");
}

#[test]
fn invalid_pretrain_settings_are_rejected() {
    let (cfg, source, _) = quick();
    let bad = PretrainConfig {
        batch_size: 0,
        ..cfg.pretrain.clone()
    };
    assert!(pretrain(initial_model(&cfg).unwrap(), &source, &bad, 1).is_err());
}
