//! Optimization loop, schedules, metrics and evaluation.

mod config;
mod eval;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use serde::Serialize;

pub use config::{OptimConfig, RunConfig, TrainConfig};
pub use eval::{
    extract_features, instance_dataset, knn_accuracy, knn_predict, linear_probe, logistic_regression, probe_checkpoint,
    InstanceSet, LogisticModel, ProbeConfig, ProbeReport,
};

use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::geometry::Bbox;
use crate::image::Image;
use crate::losses::{forward_batch, univip_loss, LossBreakdown};
use crate::model::{momentum_schedule, write_checkpoint, ModelState, ParamSet};
use crate::proposals::generate_proposals;
use crate::rng::{derive_seed, substream};
use crate::tensor::{Graph, Tensor};
use crate::views::build_training_sample;

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const SAMPLE_STREAM: u64 = 3;

/// Linear warm-up to `base_lr`, then cosine decay towards zero.
pub fn learning_rate(step: u64, total_steps: u64, warmup_steps: u64, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * (step + 1) as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1);
    let t = (step - warmup_steps).min(span) as f64 / span as f64;
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * t).cos())
}

/// SGD with momentum and L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Tensor<f32>>,
}

impl Sgd {
    pub fn new(params: &ParamSet<f32>, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum: momentum as f32,
            weight_decay: weight_decay as f32,
            velocity: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &[Tensor<f32>], lr: f64) {
        let lr = lr as f32;
        for ((p, g), v) in params.tensors_mut().zip(grads).zip(&mut self.velocity) {
            for ((x, &dx), vx) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vx = self.momentum * *vx + dx + self.weight_decay * *x;
                *x -= lr * *vx;
            }
        }
    }
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: usize,
    pub scene: f64,
    pub scene_instance: f64,
    pub instance: f64,
    pub total: f64,
    pub lr: f64,
    pub m: f64,
    pub fallback_rate: f64,
    pub sinkhorn_converged_rate: f64,
}

/// Decoded images with their proposals and ground truth.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub images: Vec<Image>,
    pub proposals: Vec<Vec<Bbox>>,
}

impl TrainingSet {
    pub fn load(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<Self> {
        let mut images = Vec::with_capacity(manifest.len());
        let mut proposals = Vec::with_capacity(manifest.len());
        for i in 0..manifest.len() {
            let s = manifest.read_sample(i)?;
            proposals.push(generate_proposals(&s.image, &cfg.proposals));
            images.push(s.image);
        }
        Ok(TrainingSet { images, proposals })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Stacked network inputs for one step.
pub struct Batch {
    pub scenes: Tensor<f32>,
    pub instances: Option<Tensor<f32>>,
    pub fallbacks: usize,
    pub seeds: Vec<u64>,
}

pub fn build_batch(set: &TrainingSet, indices: &[usize], seeds: &[u64], cfg: &TrainConfig) -> Result<Batch> {
    let (b, k) = (indices.len(), cfg.views.k);
    let (s, si) = (cfg.augment.scene_size, cfg.augment.instance_size);
    let scene_len = 3 * s * s;
    let mut scenes = vec![0.0f32; 2 * b * scene_len];
    let want_instances = cfg.loss.needs_instances();
    let mut instances = Vec::with_capacity(if want_instances { b * k * 3 * si * si } else { 0 });
    let mut fallbacks = 0;
    for (j, (&i, &seed)) in indices.iter().zip(seeds).enumerate() {
        let sample = build_training_sample(&set.images[i], &set.proposals[i], &cfg.views, &cfg.augment, seed)?;
        fallbacks += sample.view.fallback_used as usize;
        scenes[j * scene_len..(j + 1) * scene_len].copy_from_slice(sample.scenes[0].data());
        scenes[(b + j) * scene_len..(b + j + 1) * scene_len].copy_from_slice(sample.scenes[1].data());
        if want_instances {
            for t in &sample.instances {
                instances.extend_from_slice(t.data());
            }
        }
    }
    Ok(Batch {
        scenes: Tensor::new(&[2 * b, 3, s, s], scenes)?,
        instances: if want_instances {
            Some(Tensor::new(&[b * k, 3, si, si], instances)?)
        } else {
            None
        },
        fallbacks,
        seeds: seeds.to_vec(),
    })
}

pub struct StepOutput {
    pub breakdown: LossBreakdown,
    pub sinkhorn_converged: usize,
    pub samples: usize,
}

/// Forward, backward, SGD on the online network, EMA on the target.
pub fn train_step(
    state: &mut ModelState<f32>,
    sgd: &mut Sgd,
    batch: &Batch,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepOutput> {
    let mut g = Graph::<f32>::new();
    let online = state.bind_online(&mut g)?;
    let target = state.bind_target(&mut g)?;
    let scenes = g.constant(batch.scenes.clone())?;
    let instances = batch.instances.as_ref().map(|t| g.constant(t.clone())).transpose()?;
    let f = forward_batch(&mut g, &online, &target, scenes, instances, cfg.views.k)?;
    let out = univip_loss(&mut g, &f, cfg.loss, &cfg.sinkhorn, None)?;
    if !out.breakdown.total.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    g.backward(out.loss)?;
    let grads: Vec<Tensor<f32>> = online
        .vars
        .iter()
        .map(|&v| g.grad(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
        .collect();
    if grads.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite { op: "gradient" });
    }
    sgd.step(&mut state.online, &grads, lr);
    state.ema_update()?;
    state.step += 1;
    Ok(StepOutput {
        breakdown: out.breakdown,
        sinkhorn_converged: out.sinkhorn_converged(),
        samples: f.batch,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: ModelState<f32>,
    pub metrics: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub steps: u64,
}

pub fn initial_state(cfg: &TrainConfig) -> Result<ModelState<f32>> {
    ModelState::init(
        cfg.model.clone(),
        cfg.optim.m0,
        &mut substream(cfg.run.seed, 0, INIT_STREAM),
    )
}

fn checkpoint_path(out: &Path, epoch: usize) -> PathBuf {
    out.join("checkpoints").join(format!("epoch-{epoch:03}.uvip"))
}

fn write_nan_dump(out: &Path, step: u64, epoch: usize, indices: &[usize], seeds: &[u64], err: &Error) -> PathBuf {
    let path = out.join("nan_dump.json");
    let dump = serde_json::json!({
        "step": step,
        "epoch": epoch,
        "samples": indices,
        "sample_seeds": seeds,
        "error": err.to_string(),
    });
    // best effort; the caller reports the original error either way
    let _ = fs::write(&path, serde_json::to_vec_pretty(&dump).unwrap_or_default());
    path
}

/// Train from `cfg` using an already loaded dataset.
pub fn train_on(cfg: &TrainConfig, set: &TrainingSet) -> Result<TrainOutcome> {
    cfg.validate()?;
    let out = &cfg.run.out_dir;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let config_path = out.join("config.toml");
    fs::write(&config_path, cfg.to_toml()).map_err(|e| Error::io(&config_path, e))?;

    let b = cfg.optim.batch_size;
    if set.len() < b {
        return Err(Error::InvalidArgument(format!(
            "dataset of {} is smaller than batch {b}",
            set.len()
        )));
    }
    let steps_per_epoch = (set.len() / b) as u64;
    let total_steps = steps_per_epoch * cfg.optim.epochs as u64;
    let warmup_steps = (steps_per_epoch * cfg.optim.warmup_epochs as u64).min(total_steps);

    let mut state = initial_state(cfg)?;
    let mut sgd = Sgd::new(&state.online, cfg.optim.momentum, cfg.optim.weight_decay);
    let mut checkpoints = vec![checkpoint_path(out, 0)];
    write_checkpoint(&state, &checkpoints[0])?;

    let metrics_path = out.join("metrics.jsonl");
    let timing_path = out.join("timing.jsonl");
    let open = |p: &Path| File::create(p).map(BufWriter::new).map_err(|e| Error::io(p, e));
    let mut metrics = open(&metrics_path)?;
    let mut timing = open(&timing_path)?;
    let sample_base = derive_seed(cfg.run.seed, SAMPLE_STREAM);

    let mut step = 0u64;
    for epoch in 0..cfg.optim.epochs {
        let mut order: Vec<usize> = (0..set.len()).collect();
        order.shuffle(&mut substream(cfg.run.seed, epoch as u64, SHUFFLE_STREAM));
        for chunk in order.chunks_exact(b) {
            let started = Instant::now();
            let seeds: Vec<u64> = (0..b as u64)
                .map(|j| derive_seed(sample_base, step * b as u64 + j))
                .collect();
            let lr = learning_rate(step, total_steps, warmup_steps, cfg.optim.base_lr);
            let m = momentum_schedule(step, total_steps, cfg.optim.m0)?;
            state.momentum = m;
            let result = build_batch(set, chunk, &seeds, cfg).and_then(|batch| {
                let r = train_step(&mut state, &mut sgd, &batch, cfg, lr)?;
                Ok((r, batch.fallbacks))
            });
            let (r, fallbacks) = match result {
                Ok(v) => v,
                Err(e @ (Error::NonFinite { .. } | Error::Degenerate(_) | Error::Numeric(_))) => {
                    let dump = write_nan_dump(out, step, epoch, chunk, &seeds, &e);
                    return Err(Error::Numeric(format!(
                        "step {step} (epoch {epoch}) failed: {e}; batch seeds written to {}",
                        dump.display()
                    )));
                }
                Err(e) => return Err(e),
            };
            let record = MetricsRecord {
                step,
                epoch,
                scene: r.breakdown.scene,
                scene_instance: r.breakdown.scene_instance,
                instance: r.breakdown.instance,
                total: r.breakdown.total,
                lr,
                m,
                fallback_rate: fallbacks as f64 / b as f64,
                sinkhorn_converged_rate: if cfg.loss.instance {
                    r.sinkhorn_converged as f64 / r.samples as f64
                } else {
                    1.0
                },
            };
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(metrics, "{line}")
                .and_then(|_| metrics.flush())
                .map_err(|e| Error::io(&metrics_path, e))?;
            writeln!(
                timing,
                "{{\"step\":{step},\"seconds\":{:.6}}}",
                started.elapsed().as_secs_f64()
            )
            .and_then(|_| timing.flush())
            .map_err(|e| Error::io(&timing_path, e))?;
            if step.is_multiple_of(10) {
                info!(
                    "epoch {epoch} step {step}: total {:.4} lr {lr:.4} m {m:.5}",
                    record.total
                );
            }
            step += 1;
        }
        let path = checkpoint_path(out, epoch + 1);
        write_checkpoint(&state, &path)?;
        checkpoints.push(path);
    }
    Ok(TrainOutcome {
        state,
        metrics: metrics_path,
        checkpoints,
        steps: step,
    })
}

/// Load the dataset named in `cfg` and train.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let manifest = DatasetManifest::load(&cfg.run.data)?;
    if manifest.profile != cfg.run.profile {
        return Err(Error::InvalidArgument(format!(
            "dataset profile {} does not match run profile {}",
            manifest.profile, cfg.run.profile
        )));
    }
    let set = TrainingSet::load(&manifest, cfg)?;
    train_on(cfg, &set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_cosine() {
        assert_eq!(learning_rate(0, 100, 10, 0.5), 0.05);
        assert_eq!(learning_rate(9, 100, 10, 0.5), 0.5);
        assert_eq!(learning_rate(10, 100, 10, 0.5), 0.5);
        assert!((learning_rate(55, 100, 10, 0.5) - 0.25).abs() < 1e-12);
        assert!(learning_rate(100, 100, 10, 0.5).abs() < 1e-12);
        for s in 10..100 {
            let want = 0.25 * (1.0 + (std::f64::consts::PI * (s - 10) as f64 / 90.0).cos());
            assert!((learning_rate(s, 100, 10, 0.5) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_matches_hand_update() {
        let mut p = ParamSet::new(vec![("w".into(), Tensor::from_vec(vec![1.0f32, -2.0]))]);
        let mut sgd = Sgd::new(&p, 0.9, 0.1);
        let g = [Tensor::from_vec(vec![0.5f32, 0.5])];
        sgd.step(&mut p, &g, 0.1);
        // v = g + 0.1 w = [0.6, 0.3]
        assert!((p.get("w").unwrap().data()[0] - 0.94).abs() < 1e-6);
        sgd.step(&mut p, &g, 0.1);
        // v = 0.9 [0.6, 0.3] + [0.5, 0.5] + 0.1 [0.94, -2.03]
        assert!((p.get("w").unwrap().data()[0] - (0.94 - 0.1 * (0.54 + 0.5 + 0.094))).abs() < 1e-6);
    }
}
