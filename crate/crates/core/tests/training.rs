use std::path::Path;

use univip_core::data::{write_dataset, DatasetManifest};
use univip_core::model::{momentum_schedule, read_checkpoint};
use univip_core::train::{learning_rate, train, train_on, TrainConfig, TrainingSet};
use univip_core::{Error, Profile};

fn small_config(root: &Path, data: &Path) -> TrainConfig {
    let mut cfg = TrainConfig::for_profile(Profile::Desk);
    cfg.run.data = data.to_path_buf();
    cfg.run.out_dir = root.join("run");
    cfg.run.seed = 5;
    cfg.optim.batch_size = 8;
    cfg.optim.epochs = 2;
    cfg
}

fn records(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

// the default JSON float parser is not correctly rounded
fn close(a: f64, b: f64) {
    assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
}

#[test]
fn zero_epochs_writes_only_the_initial_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_dataset(&data, 1, 16, Profile::Desk).unwrap();
    let mut cfg = small_config(tmp.path(), &data);
    cfg.optim.epochs = 0;
    let out = train(&cfg).unwrap();
    assert_eq!(out.steps, 0);
    assert_eq!(out.checkpoints.len(), 1);
    let files: Vec<_> = std::fs::read_dir(cfg.run.out_dir.join("checkpoints"))
        .unwrap()
        .collect();
    assert_eq!(files.len(), 1);
    assert!(std::fs::read_to_string(&out.metrics).unwrap().is_empty());
    let state = read_checkpoint::<f32>(&out.checkpoints[0]).unwrap();
    assert_eq!(state.step, 0);
    assert_eq!(state.online, out.state.online);
}

#[test]
fn schedules_in_the_metrics_follow_the_closed_forms() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let manifest = write_dataset(&data, 2, 20, Profile::Desk).unwrap();
    let mut cfg = small_config(tmp.path(), &data);
    cfg.optim.epochs = 3;
    let set = TrainingSet::load(&manifest, &cfg).unwrap();
    let out = train_on(&cfg, &set).unwrap();
    // 20 samples at batch 8: two steps per epoch, the partial batch dropped
    assert_eq!(out.steps, 6);
    let recs = records(&out.metrics);
    assert_eq!(recs.len(), 6);
    for (i, r) in recs.iter().enumerate() {
        let step = i as u64;
        assert_eq!(r["step"].as_u64().unwrap(), step);
        assert_eq!(r["epoch"].as_u64().unwrap(), step / 2);
        close(r["lr"].as_f64().unwrap(), learning_rate(step, 6, 2, cfg.optim.base_lr));
        close(
            r["m"].as_f64().unwrap(),
            momentum_schedule(step, 6, cfg.optim.m0).unwrap(),
        );
        let parts = ["scene", "scene_instance", "instance"].map(|k| r[k].as_f64().unwrap());
        close(r["total"].as_f64().unwrap(), parts.iter().sum());
    }
    close(recs[0]["lr"].as_f64().unwrap(), cfg.optim.base_lr / 2.0);
    assert_eq!(out.checkpoints.len(), 4);
    assert_eq!(read_checkpoint::<f32>(out.checkpoints.last().unwrap()).unwrap().step, 6);
}

#[test]
fn scene_only_runs_without_instance_terms() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let manifest = write_dataset(&data, 3, 16, Profile::Desk).unwrap();
    let mut cfg = small_config(tmp.path(), &data);
    cfg.loss = univip_core::losses::LossTerms::scene_only();
    let set = TrainingSet::load(&manifest, &cfg).unwrap();
    let out = train_on(&cfg, &set).unwrap();
    for r in records(&out.metrics) {
        assert_eq!(r["scene_instance"].as_f64().unwrap(), 0.0);
        assert_eq!(r["instance"].as_f64().unwrap(), 0.0);
        assert_eq!(r["total"], r["scene"]);
    }
}

#[test]
fn different_seeds_give_different_streams() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let manifest = write_dataset(&data, 4, 16, Profile::Desk).unwrap();
    let mut cfg = small_config(tmp.path(), &data);
    let set = TrainingSet::load(&manifest, &cfg).unwrap();
    let a = std::fs::read(train_on(&cfg, &set).unwrap().metrics).unwrap();
    cfg.run.seed = 6;
    cfg.run.out_dir = tmp.path().join("other");
    let b = std::fs::read(train_on(&cfg, &set).unwrap().metrics).unwrap();
    assert_ne!(a, b);
}

#[test]
fn diverging_run_aborts_with_a_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let manifest = write_dataset(&data, 5, 16, Profile::Desk).unwrap();
    let mut cfg = small_config(tmp.path(), &data);
    cfg.optim.base_lr = 1e30;
    cfg.optim.warmup_epochs = 0;
    let set = TrainingSet::load(&manifest, &cfg).unwrap();
    let err = train_on(&cfg, &set).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    let dump: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(cfg.run.out_dir.join("nan_dump.json")).unwrap()).unwrap();
    assert_eq!(dump["sample_seeds"].as_array().unwrap().len(), 8);
}

#[test]
fn missing_dataset_and_profile_mismatch_are_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), &tmp.path().join("absent"));
    assert!(matches!(train(&cfg), Err(Error::Io { .. })));

    let data = tmp.path().join("data");
    write_dataset(&data, 6, 4, Profile::Desk).unwrap();
    let mut cfg = small_config(tmp.path(), &data);
    cfg.run.profile = Profile::Paper;
    assert!(train(&cfg).is_err());
    assert_eq!(DatasetManifest::load(&data).unwrap().len(), 4);
}
