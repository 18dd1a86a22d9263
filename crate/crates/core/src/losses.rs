//! Scene, scene-instance and instance losses and their equally weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{OnlineNet, TargetNet};
use crate::ot::{cost_values, instance_loss, marginal_weights, sinkhorn, SinkhornConfig, TransportPlan};
use crate::tensor::{Graph, Scalar, Tensor, Var, NORM_EPS};

/// Per-term on/off switches for level ablations. All on is the full
/// objective; scene only is plain BYOL.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossTerms {
    pub scene: bool,
    pub scene_instance: bool,
    pub instance: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        LossTerms {
            scene: true,
            scene_instance: true,
            instance: true,
        }
    }
}

impl LossTerms {
    pub fn scene_only() -> Self {
        LossTerms {
            scene: true,
            scene_instance: false,
            instance: false,
        }
    }

    pub fn needs_instances(&self) -> bool {
        self.scene_instance || self.instance
    }

    pub fn validate(&self) -> Result<()> {
        if self.scene || self.scene_instance || self.instance {
            Ok(())
        } else {
            Err(Error::InvalidArgument("at least one loss term must be enabled".into()))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub scene: f64,
    pub scene_instance: f64,
    pub instance: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(scene: f64, scene_instance: f64, instance: f64) -> Self {
        LossBreakdown {
            scene,
            scene_instance,
            instance,
            total: scene + scene_instance + instance,
        }
    }
}

/// `-cos(p, z)` along the last axis; one value per row.
pub fn neg_cosine<T: Scalar>(g: &mut Graph<T>, p: Var, z: Var) -> Result<Var> {
    let c = g.cosine(p, z, T::of(NORM_EPS))?;
    g.neg(c)
}

/// Online and target scene features for both views, each `[N, d]`.
#[derive(Clone, Copy, Debug)]
pub struct SceneFeatures {
    pub online: [Var; 2],
    pub target: [Var; 2],
}

/// `neg_cosine(f_o1, f_t2) + neg_cosine(f_o2, f_t1)` per sample.
pub fn scene_loss<T: Scalar>(g: &mut Graph<T>, f: &SceneFeatures) -> Result<Var> {
    let a = neg_cosine(g, f.online[0], f.target[1])?;
    let b = neg_cosine(g, f.online[1], f.target[0])?;
    g.add(a, b)
}

/// `neg_cosine(I, f_t1) + neg_cosine(I, f_t2)` per sample.
pub fn affinity_loss<T: Scalar>(g: &mut Graph<T>, fused: Var, f: &SceneFeatures) -> Result<Var> {
    let a = neg_cosine(g, fused, f.target[0])?;
    let b = neg_cosine(g, fused, f.target[1])?;
    g.add(a, b)
}

/// Everything the loss needs for a batch of `batch` samples.
#[derive(Clone, Copy, Debug)]
pub struct BatchFeatures {
    pub scenes: SceneFeatures,
    /// Online instance features `[B·K, d]`, sample-major.
    pub instances_online: Option<Var>,
    pub instances_target: Option<Var>,
    /// Fused instance vectors `[B, d]`.
    pub fused: Option<Var>,
    pub batch: usize,
    pub k: usize,
}

/// Run both networks. `scenes` is `[2B, 3, S, S]` with all first views
/// before all second views; `instances` is `[B·K, 3, s, s]`.
pub fn forward_batch<T: Scalar>(
    g: &mut Graph<T>,
    online: &OnlineNet,
    target: &TargetNet,
    scenes: Var,
    instances: Option<Var>,
    k: usize,
) -> Result<BatchFeatures> {
    let two_b = g.shape(scenes)[0];
    if two_b == 0 || !two_b.is_multiple_of(2) {
        return Err(Error::shape(
            "forward_batch",
            format!("scene stack of {two_b} is not two views per sample"),
        ));
    }
    let batch = two_b / 2;
    let fo = online.forward(g, scenes)?;
    let ft = target.forward(g, scenes)?;
    let scenes = SceneFeatures {
        online: [g.narrow(fo, 0, batch)?, g.narrow(fo, batch, batch)?],
        target: [g.narrow(ft, 0, batch)?, g.narrow(ft, batch, batch)?],
    };
    let (mut io, mut it, mut fused) = (None, None, None);
    if let Some(x) = instances {
        if g.shape(x)[0] != batch * k {
            return Err(Error::shape(
                "forward_batch",
                format!("{} instance crops for {batch} samples of {k}", g.shape(x)[0]),
            ));
        }
        let o = online.forward(g, x)?;
        it = Some(target.forward(g, x)?);
        fused = Some(online.fuse(g, o)?);
        io = Some(o);
    }
    Ok(BatchFeatures {
        scenes,
        instances_online: io,
        instances_target: it,
        fused,
        batch,
        k,
    })
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    /// Batch mean of per-sample totals; the value to differentiate.
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub per_sample: Vec<LossBreakdown>,
    /// One plan per sample when the instance term is on.
    pub plans: Vec<TransportPlan>,
}

impl LossOutput {
    pub fn sinkhorn_converged(&self) -> usize {
        self.plans.iter().filter(|p| p.converged).count()
    }
}

fn rows<T: Scalar>(g: &Graph<T>, v: Var, start: usize, len: usize) -> Result<Tensor<T>> {
    let t = g.value(v);
    let d = t.shape()[1];
    Tensor::new(&[len, d], t.data()[start * d..(start + len) * d].to_vec())
}

fn values<T: Scalar>(g: &Graph<T>, v: Var) -> Vec<f64> {
    g.value(v).data().iter().map(|x| x.f64()).collect()
}

/// Full objective over a batch. Transport plans are solved from the current
/// feature values unless `fixed_plans` supplies them.
pub fn univip_loss<T: Scalar>(
    g: &mut Graph<T>,
    f: &BatchFeatures,
    terms: LossTerms,
    sinkhorn_cfg: &SinkhornConfig,
    fixed_plans: Option<&[TransportPlan]>,
) -> Result<LossOutput> {
    terms.validate()?;
    let b = f.batch;
    let mut parts: Vec<Var> = Vec::new();
    let mut per_term = [vec![0.0; b], vec![0.0; b], vec![0.0; b]];

    if terms.scene {
        let s = scene_loss(g, &f.scenes)?;
        per_term[0] = values(g, s);
        parts.push(s);
    }
    if terms.scene_instance {
        let fused = f
            .fused
            .ok_or_else(|| Error::InvalidArgument("scene-instance term needs instance features".into()))?;
        let a = affinity_loss(g, fused, &f.scenes)?;
        per_term[1] = values(g, a);
        parts.push(a);
    }
    let mut plans = Vec::new();
    if terms.instance {
        let (io, it) = match (f.instances_online, f.instances_target) {
            (Some(o), Some(t)) => (o, t),
            _ => return Err(Error::InvalidArgument("instance term needs instance features".into())),
        };
        if fixed_plans.is_some_and(|p| p.len() != b) {
            return Err(Error::shape("univip_loss", "one fixed plan per sample required"));
        }
        let mut losses = Vec::with_capacity(b);
        for s in 0..b {
            let plan = match fixed_plans {
                Some(p) => p[s].clone(),
                None => {
                    let (o, t) = (rows(g, io, s * f.k, f.k)?, rows(g, it, s * f.k, f.k)?);
                    let scene = |v: Var| rows(g, v, s, 1);
                    let fo = [scene(f.scenes.online[0])?, scene(f.scenes.online[1])?];
                    let ft = [scene(f.scenes.target[0])?, scene(f.scenes.target[1])?];
                    let mw = marginal_weights(&o, &t, [&fo[0], &fo[1]], [&ft[0], &ft[1]])?;
                    sinkhorn(&cost_values(&o, &t)?, &mw.supply, &mw.demand, sinkhorn_cfg)?
                }
            };
            let o = g.narrow(io, s * f.k, f.k)?;
            let t = g.narrow(it, s * f.k, f.k)?;
            let l = instance_loss(g, o, t, &plan)?;
            per_term[2][s] = g.value(l).data()[0].f64();
            losses.push(l);
            plans.push(plan);
        }
        parts.push(g.concat(&losses, 0)?);
    }

    let mut sum = parts[0];
    for &p in &parts[1..] {
        sum = g.add(sum, p)?;
    }
    let loss = g.mean(sum)?;
    let per_sample: Vec<LossBreakdown> = (0..b)
        .map(|s| LossBreakdown::new(per_term[0][s], per_term[1][s], per_term[2][s]))
        .collect();
    let mean = |i: usize| per_term[i].iter().sum::<f64>() / b as f64;
    Ok(LossOutput {
        loss,
        breakdown: LossBreakdown::new(mean(0), mean(1), mean(2)),
        per_sample,
        plans,
    })
}
