//! Online and target networks.
//!
//! The online network is encoder → projection → predictor plus the fusion
//! layer that maps `K` concatenated instance features to one vector. The
//! target network is a structural copy of encoder and projection that is
//! only ever moved towards the online weights by [`ModelState::ema_update`].

mod checkpoint;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Output channels of each stride-2 3×3 conv block.
    pub channels: Vec<usize>,
    pub proj_hidden: usize,
    /// Feature dimension `d` after projection and prediction.
    pub dim: usize,
    pub pred_hidden: usize,
    /// Instances fused per sample.
    pub k: usize,
    /// Half-width of the uniform noise added to the block-averaging fusion init.
    pub fusion_noise: f64,
    /// Batch-standardize the hidden layer of the projection and predictor.
    pub head_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: vec![16, 32, 64, 64],
            proj_hidden: 64,
            dim: 32,
            pred_hidden: 64,
            k: 4,
            fusion_noise: 0.01,
            head_norm: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::InvalidArgument(
                "encoder needs at least one non-empty conv block".into(),
            ));
        }
        if self.proj_hidden == 0 || self.dim == 0 || self.pred_hidden == 0 || self.k == 0 {
            return Err(Error::InvalidArgument("model widths and k must be positive".into()));
        }
        Ok(())
    }

    /// Width of the pooled encoder output.
    pub fn feature_dim(&self) -> usize {
        *self.channels.last().expect("validated")
    }

    fn encoder_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c_in = 3;
        for (i, &c) in self.channels.iter().enumerate() {
            out.push((format!("encoder.conv{i}.weight"), vec![c, c_in, 3, 3]));
            out.push((format!("encoder.conv{i}.bias"), vec![c]));
            c_in = c;
        }
        out
    }

    fn mlp_shapes(prefix: &str, input: usize, hidden: usize, output: usize) -> Vec<(String, Vec<usize>)> {
        vec![
            (format!("{prefix}.fc1.weight"), vec![input, hidden]),
            (format!("{prefix}.fc1.bias"), vec![hidden]),
            (format!("{prefix}.fc2.weight"), vec![hidden, output]),
            (format!("{prefix}.fc2.bias"), vec![output]),
        ]
    }

    fn target_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = self.encoder_shapes();
        out.extend(Self::mlp_shapes(
            "projection",
            self.feature_dim(),
            self.proj_hidden,
            self.dim,
        ));
        out
    }

    fn online_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = self.target_shapes();
        out.extend(Self::mlp_shapes("predictor", self.dim, self.pred_hidden, self.dim));
        out.push(("fusion.weight".into(), vec![self.k * self.dim, self.dim]));
        out.push(("fusion.bias".into(), vec![self.dim]));
        out
    }
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Scalar = f32> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new(entries: Vec<(String, Tensor<T>)>) -> Self {
        ParamSet { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    /// Bitwise digest of every value, for cheap equality checks.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, t) in &self.entries {
            for b in name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
            }
            for v in t.data() {
                h = (h ^ v.f64().to_bits()).wrapping_mul(0x100_0000_01b3);
            }
        }
        h
    }

    fn check_shapes(&self, expected: &[(String, Vec<usize>)], what: &'static str) -> Result<()> {
        let ok = self.entries.len() == expected.len()
            && self
                .entries
                .iter()
                .zip(expected)
                .all(|((n, t), (en, es))| n == en && t.shape() == es.as_slice());
        if ok {
            Ok(())
        } else {
            Err(Error::shape(
                what,
                "parameter names or shapes do not match the model config",
            ))
        }
    }
}

fn init_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("positive shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T: Scalar = f32> {
    pub config: ModelConfig,
    pub online: ParamSet<T>,
    pub target: ParamSet<T>,
    pub momentum: f64,
    pub step: u64,
}

impl<T: Scalar> ModelState<T> {
    /// Fan-in uniform init; fusion starts at block averaging plus noise; the
    /// target copies the online encoder and projection.
    pub fn init(config: ModelConfig, momentum: f64, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut entries = Vec::new();
        let mut fan_in = 1;
        for (name, shape) in config.online_shapes() {
            // a bias shares the fan-in of the weight just before it
            if !name.ends_with(".bias") {
                fan_in = if shape.len() == 4 {
                    shape[1..].iter().product()
                } else {
                    shape[0]
                };
            }
            let t = match name.as_str() {
                "fusion.weight" => {
                    let d = shape[1];
                    let mut data = Vec::with_capacity(shape[0] * d);
                    for r in 0..shape[0] {
                        for c in 0..d {
                            let block = if r % d == c { 1.0 / config.k as f64 } else { 0.0 };
                            let noise = if config.fusion_noise > 0.0 {
                                rng.gen_range(-config.fusion_noise..config.fusion_noise)
                            } else {
                                0.0
                            };
                            data.push(T::of(block + noise));
                        }
                    }
                    Tensor::new(&shape, data)?
                }
                "fusion.bias" => Tensor::zeros(&shape),
                _ => init_uniform(&shape, fan_in, rng),
            };
            entries.push((name, t));
        }
        let target_names: Vec<String> = config.target_shapes().into_iter().map(|(n, _)| n).collect();
        let target = entries
            .iter()
            .filter(|(n, _)| target_names.contains(n))
            .cloned()
            .collect();
        Ok(ModelState {
            config,
            online: ParamSet::new(entries),
            target: ParamSet::new(target),
            momentum,
            step: 0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.online
            .check_shapes(&self.config.online_shapes(), "online parameters")?;
        self.target
            .check_shapes(&self.config.target_shapes(), "target parameters")?;
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum {} outside [0, 1]",
                self.momentum
            )));
        }
        Ok(())
    }

    /// `ξ ← m·ξ + (1 − m)·θ` with the current momentum.
    pub fn ema_update(&mut self) -> Result<()> {
        ema_update(&mut self.target, &self.online, self.momentum)
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            online: self.online.cast(),
            target: self.target.cast(),
            momentum: self.momentum,
            step: self.step,
        }
    }

    /// Register online parameters as gradient-tracked leaves.
    pub fn bind_online(&self, g: &mut Graph<T>) -> Result<OnlineNet> {
        let vars = self
            .online
            .iter()
            .map(|(_, t)| g.param(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(OnlineNet::from_vars(&self.config, vars))
    }

    /// Register target parameters as constants.
    pub fn bind_target(&self, g: &mut Graph<T>) -> Result<TargetNet> {
        let vars = self
            .target
            .iter()
            .map(|(_, t)| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(TargetNet::from_vars(&self.config, vars))
    }
}

/// Elementwise `target ← m·target + (1 − m)·online` over the parameters the
/// two sets share by name. Every target parameter must have an online twin.
pub fn ema_update<T: Scalar>(target: &mut ParamSet<T>, online: &ParamSet<T>, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::InvalidArgument(format!("momentum {m} outside [0, 1]")));
    }
    let (mt, mo) = (T::of(m), T::of(1.0 - m));
    for (name, t) in target.entries.iter_mut() {
        let src = online
            .get(name)
            .filter(|s| s.shape() == t.shape())
            .ok_or_else(|| Error::shape("ema_update", format!("no online parameter matching `{name}`")))?;
        for (x, &y) in t.data_mut().iter_mut().zip(src.data()) {
            *x = mt * *x + mo * y;
        }
    }
    Ok(())
}

/// `1 − (1 − m0)·(cos(π·step/total) + 1)/2`.
pub fn momentum_schedule(step: u64, total_steps: u64, m0: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&m0) {
        return Err(Error::InvalidArgument(format!("base momentum {m0} outside [0, 1)")));
    }
    if step > total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} beyond total {total_steps}"
        )));
    }
    if total_steps == 0 {
        return Ok(m0);
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(1.0 - (1.0 - m0) * (phase.cos() + 1.0) / 2.0)
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.weight)?;
        g.add(y, self.bias)
    }
}

/// Variance floor inside head batch standardization.
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub norm: bool,
}

impl Mlp {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let mut h = self.fc1.forward(g, x)?;
        if self.norm {
            h = g.batch_norm(h, T::of(BN_EPS))?;
        }
        let h = g.relu(h)?;
        self.fc2.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub convs: Vec<Linear>,
}

impl Encoder {
    /// `[B, C, H, W]` before pooling: the last conv block's activations.
    pub fn feature_map<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for conv in &self.convs {
            h = g.conv2d(h, conv.weight, Some(conv.bias), 2, 1)?;
            h = g.relu(h)?;
        }
        Ok(h)
    }

    /// Global-average-pooled features `[B, C]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.feature_map(g, x)?;
        let s = g.shape(h).to_vec();
        let flat = g.reshape(h, &[s[0], s[1], s[2] * s[3]])?;
        g.mean_last(flat)
    }
}

fn take_encoder(vars: &mut std::slice::Iter<'_, Var>, blocks: usize) -> Encoder {
    let convs = (0..blocks).map(|_| take_linear(vars)).collect();
    Encoder { convs }
}

fn take_linear(vars: &mut std::slice::Iter<'_, Var>) -> Linear {
    Linear {
        weight: *vars.next().expect("weight var"),
        bias: *vars.next().expect("bias var"),
    }
}

fn take_mlp(vars: &mut std::slice::Iter<'_, Var>, norm: bool) -> Mlp {
    Mlp {
        fc1: take_linear(vars),
        fc2: take_linear(vars),
        norm,
    }
}

/// Online parameters bound into a graph.
#[derive(Clone, Debug)]
pub struct OnlineNet {
    pub encoder: Encoder,
    pub projection: Mlp,
    pub predictor: Mlp,
    pub fusion: Linear,
    k: usize,
    /// Every parameter var in [`ParamSet`] order.
    pub vars: Vec<Var>,
}

impl OnlineNet {
    /// Bind vars given in [`ParamSet`] order.
    pub fn from_vars(config: &ModelConfig, vars: Vec<Var>) -> Self {
        let mut it = vars.iter();
        let encoder = take_encoder(&mut it, config.channels.len());
        let projection = take_mlp(&mut it, config.head_norm);
        let predictor = take_mlp(&mut it, config.head_norm);
        let fusion = take_linear(&mut it);
        OnlineNet {
            encoder,
            projection,
            predictor,
            fusion,
            k: config.k,
            vars,
        }
    }

    /// Encoder and projection only.
    pub fn project<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.encoder.forward(g, x)?;
        self.projection.forward(g, h)
    }

    /// Encoder, projection and predictor; used for scenes and instances alike.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let z = self.project(g, x)?;
        self.predictor.forward(g, z)
    }

    /// `[B·K, d]` instance features, sample-major, to `[B, d]` fused vectors.
    pub fn fuse<T: Scalar>(&self, g: &mut Graph<T>, instances: Var) -> Result<Var> {
        let s = g.shape(instances).to_vec();
        if s.len() != 2 || !s[0].is_multiple_of(self.k) || s[0] == 0 {
            return Err(Error::shape(
                "fuse_instances",
                format!("{s:?} is not a stack of groups of {} vectors", self.k),
            ));
        }
        let cat = g.reshape(instances, &[s[0] / self.k, self.k * s[1]])?;
        self.fusion.forward(g, cat)
    }
}

/// Target parameters bound into a graph as constants.
#[derive(Clone, Debug)]
pub struct TargetNet {
    pub encoder: Encoder,
    pub projection: Mlp,
}

impl TargetNet {
    /// Bind vars given in [`ParamSet`] order.
    pub fn from_vars(config: &ModelConfig, vars: Vec<Var>) -> Self {
        let mut it = vars.iter();
        let encoder = take_encoder(&mut it, config.channels.len());
        let projection = take_mlp(&mut it, config.head_norm);
        TargetNet { encoder, projection }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.encoder.forward(g, x)?;
        let z = self.projection.forward(g, h)?;
        Ok(g.stopgrad(z))
    }
}
