mod common;

use common::tiny_config;
use eegenv::classifier::CtaMtdnn;
use eegenv::codec::MlaCodec;
use eegenv::signal::{synth_generate, SplitMode, SynthConfig};
use eegenv::train::checkpoint::MANIFEST;
use eegenv::train::{
    prepare_data, pretrain_classifier, save_params, split_pairs, train_joint, Archive,
    JointOptions, MetricsLog, RunConfig, JOINT_LAST,
};
use eegenv::Error;

fn classifier(cfg: &RunConfig) -> CtaMtdnn<f64> {
    let (train, val, _) = prepare_data(cfg).unwrap();
    pretrain_classifier(&train, &val, cfg, &mut MetricsLog::memory())
        .unwrap()
        .model
}

#[test]
fn pretraining_needs_two_subjects() {
    let mut cfg = tiny_config();
    cfg.synth.n_subjects = 1;
    let (train, val, _) = prepare_data(&cfg).unwrap();
    let r = pretrain_classifier(&train, &val, &cfg, &mut MetricsLog::memory());
    assert!(matches!(r, Err(Error::InsufficientData(_))));
}

#[test]
fn pretraining_is_deterministic() {
    let cfg = tiny_config();
    let (train, val, _) = prepare_data(&cfg).unwrap();
    let a = pretrain_classifier(&train, &val, &cfg, &mut MetricsLog::memory()).unwrap();
    let b = pretrain_classifier(&train, &val, &cfg, &mut MetricsLog::memory()).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.params().checksum(), b.model.params().checksum());
}

/// Pretrain then joint-train into `dir/metrics.csv`.
fn full_run(cfg: &RunConfig, dir: &std::path::Path) -> Vec<u8> {
    let path = dir.join("metrics.csv");
    let mut log = MetricsLog::to_file(&path).unwrap();
    let (train, val, _) = prepare_data(cfg).unwrap();
    let cls = pretrain_classifier(&train, &val, cfg, &mut log)
        .unwrap()
        .model;
    train_joint(
        &train,
        &val,
        Some(&cls),
        cfg,
        &mut log,
        &JointOptions::default(),
    )
    .unwrap();
    std::fs::read(path).unwrap()
}

#[test]
fn metrics_csv_is_reproducible() {
    let cfg = tiny_config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = full_run(&cfg, a.path());
    let second = full_run(&cfg, b.path());
    assert!(!first.is_empty());
    assert_eq!(first, second);
    let text = String::from_utf8(first).unwrap();
    assert!(text.starts_with("epoch,phase,l_corr,l_var,val_pcc,probe_acc\n"));
    assert_eq!(
        text.lines().count(),
        1 + cfg.epochs_classifier + cfg.epochs_joint
    );
}

#[test]
fn joint_phase_leaves_classifier_untouched() {
    let cfg = tiny_config();
    let cls = classifier(&cfg);
    let before = cls.params().checksum();
    let (train, val, _) = prepare_data(&cfg).unwrap();
    let out = train_joint(
        &train,
        &val,
        Some(&cls),
        &cfg,
        &mut MetricsLog::memory(),
        &JointOptions::default(),
    )
    .unwrap();
    assert_eq!(cls.params().checksum(), before);
    assert!(out.counters.estimator_steps > 0);
}

#[test]
fn zero_lambda_matches_codec_only_training() {
    let mut cfg = tiny_config();
    cfg.lambda = 0.0;
    let cls = classifier(&cfg);
    let (train, val, _) = prepare_data(&cfg).unwrap();
    let joint = train_joint(
        &train,
        &val,
        Some(&cls),
        &cfg,
        &mut MetricsLog::memory(),
        &JointOptions::default(),
    )
    .unwrap();
    let alone = train_joint(
        &train,
        &val,
        None,
        &cfg,
        &mut MetricsLog::memory(),
        &JointOptions::default(),
    )
    .unwrap();
    assert!(joint.estimator.is_some() && alone.estimator.is_none());
    let gap = (joint.counters.best_val_pcc - alone.counters.best_val_pcc).abs();
    assert!(gap <= 0.02, "{gap}");
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let mut cfg = tiny_config();
    cfg.epochs_joint = 4;
    cfg.k = 2;
    let cls = classifier(&cfg);
    let (train, val, _) = prepare_data(&cfg).unwrap();

    let whole = train_joint(
        &train,
        &val,
        Some(&cls),
        &cfg,
        &mut MetricsLog::memory(),
        &JointOptions::default(),
    )
    .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let halted = JointOptions {
        checkpoint_dir: Some(dir.path()),
        halt_after: Some(2),
        ..JointOptions::default()
    };
    let first = train_joint(
        &train,
        &val,
        Some(&cls),
        &cfg,
        &mut MetricsLog::memory(),
        &halted,
    )
    .unwrap();
    assert_eq!(first.counters.epoch, 2);
    let resume_dir = dir.path().join(JOINT_LAST);
    let resumed = JointOptions {
        checkpoint_dir: Some(dir.path()),
        resume_from: Some(&resume_dir),
        ..JointOptions::default()
    };
    let rest = train_joint(
        &train,
        &val,
        Some(&cls),
        &cfg,
        &mut MetricsLog::memory(),
        &resumed,
    )
    .unwrap();

    assert_eq!(whole.history, rest.history);
    assert_eq!(whole.counters, rest.counters);
    assert_eq!(
        whole.codec.params().checksum(),
        rest.codec.params().checksum()
    );
    assert_eq!(
        whole.estimator.unwrap().params().checksum(),
        rest.estimator.unwrap().params().checksum()
    );
}

#[test]
fn resume_rejects_a_different_config() {
    let cfg = tiny_config();
    let (train, val, _) = prepare_data(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let opts = JointOptions {
        checkpoint_dir: Some(dir.path()),
        halt_after: Some(1),
        ..JointOptions::default()
    };
    train_joint(&train, &val, None, &cfg, &mut MetricsLog::memory(), &opts).unwrap();
    let mut other = cfg.clone();
    other.lr_codec *= 2.0;
    let resume_dir = dir.path().join(JOINT_LAST);
    let opts = JointOptions {
        resume_from: Some(&resume_dir),
        ..JointOptions::default()
    };
    let r = train_joint(&train, &val, None, &other, &mut MetricsLog::memory(), &opts);
    assert!(matches!(r, Err(Error::Checkpoint(_))), "{r:?}");
}

#[test]
fn divergence_aborts_without_checkpointing_the_bad_epoch() {
    let mut cfg = tiny_config();
    cfg.lr_codec = 1e200;
    let (train, val, _) = prepare_data(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let opts = JointOptions {
        checkpoint_dir: Some(dir.path()),
        ..JointOptions::default()
    };
    let r = train_joint(&train, &val, None, &cfg, &mut MetricsLog::memory(), &opts);
    assert!(matches!(r, Err(Error::NonFinite(_))), "{r:?}");
    assert!(!dir.path().join(JOINT_LAST).exists());
}

#[test]
fn codec_archive_does_not_load_into_classifier() {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let codec = MlaCodec::<f64>::new(cfg.codec_config(), 1).unwrap();
    save_params(dir.path(), "codec", codec.params(), serde_json::Value::Null).unwrap();
    let archive = Archive::load(dir.path()).unwrap();
    let mut cls = CtaMtdnn::<f64>::new(cfg.classifier_config(), 1).unwrap();
    let r = archive.restore("", cls.params_mut());
    assert!(matches!(r, Err(Error::CheckpointSlot { .. })), "{r:?}");

    let mut again = MlaCodec::<f64>::new(cfg.codec_config(), 2).unwrap();
    archive.restore("", again.params_mut()).unwrap();
    assert_eq!(again.params().checksum(), codec.params().checksum());
}

fn edit_manifest(dir: &std::path::Path, f: impl FnOnce(&mut serde_json::Value)) {
    let path = dir.join(MANIFEST);
    let mut v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    f(&mut v);
    std::fs::write(&path, v.to_string()).unwrap();
}

#[test]
fn archive_version_and_corruption_errors() {
    let cfg = tiny_config();
    let codec = MlaCodec::<f64>::new(cfg.codec_config(), 1).unwrap();

    let dir = tempfile::tempdir().unwrap();
    save_params(dir.path(), "codec", codec.params(), serde_json::Value::Null).unwrap();
    edit_manifest(dir.path(), |v| v["version"] = serde_json::json!(99));
    let r = Archive::load(dir.path());
    assert!(
        matches!(&r, Err(Error::Checkpoint(m)) if m.contains("version")),
        "{r:?}"
    );

    let dir = tempfile::tempdir().unwrap();
    save_params(dir.path(), "codec", codec.params(), serde_json::Value::Null).unwrap();
    std::fs::write(dir.path().join(MANIFEST), "{ not json").unwrap();
    let r = Archive::load(dir.path());
    assert!(
        matches!(&r, Err(Error::Checkpoint(m)) if m.contains("corrupt")),
        "{r:?}"
    );

    let dir = tempfile::tempdir().unwrap();
    save_params(dir.path(), "codec", codec.params(), serde_json::Value::Null).unwrap();
    edit_manifest(dir.path(), |v| {
        v["tensors"][0]["shape"] = serde_json::json!([100000])
    });
    assert!(Archive::load(dir.path()).is_err());
}

#[test]
fn cross_mode_classifier_covers_only_train_subjects() {
    let mut cfg = tiny_config();
    cfg.synth.n_subjects = 4;
    cfg.mode = SplitMode::Cross;
    let pairs = synth_generate(&SynthConfig {
        ..cfg.synth.clone()
    })
    .unwrap();
    let (train, val, test) = split_pairs(&pairs, &cfg).unwrap();
    assert!(train.subjects().is_disjoint(&test.subjects()));
    assert_eq!(train.subjects(), val.subjects());
    let out = pretrain_classifier(&train, &val, &cfg, &mut MetricsLog::memory()).unwrap();
    assert!(out.best_val_acc >= 0.0);
}
