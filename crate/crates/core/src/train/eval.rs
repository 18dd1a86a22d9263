//! Frozen-feature evaluation: multinomial logistic probe and cosine kNN
//! over ground-truth instance crops.

use serde::{Deserialize, Serialize};

use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::model::{ModelState, OnlineNet};
use crate::profile::Profile;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    /// Leading share of images whose instances form the training split.
    pub train_fraction: f64,
    pub crop_size: usize,
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
    pub knn_k: usize,
    /// Crops per forward pass during feature extraction.
    pub chunk: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig::for_profile(Profile::Desk)
    }
}

impl ProbeConfig {
    /// Crops at the instance-view size the encoder was trained on.
    pub fn for_profile(profile: Profile) -> Self {
        ProbeConfig {
            train_fraction: 0.8,
            crop_size: profile.instance_size(),
            iterations: 500,
            lr: 0.5,
            l2: 1e-4,
            knn_k: 20,
            chunk: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "train_fraction {} outside (0, 1)",
                self.train_fraction
            )));
        }
        if self.crop_size == 0 || self.chunk == 0 || self.knn_k == 0 || !(self.lr > 0.0) || self.l2 < 0.0 {
            return Err(Error::InvalidArgument(format!("invalid probe settings {self:?}")));
        }
        Ok(())
    }
}

/// Ground-truth crops with labels, split by image.
#[derive(Clone, Debug)]
pub struct InstanceSet {
    /// `[N, 3, s, s]`.
    pub crops: Tensor<f32>,
    pub labels: Vec<usize>,
    pub train: Vec<bool>,
    pub classes: usize,
}

pub fn instance_dataset(manifest: &DatasetManifest, cfg: &ProbeConfig) -> Result<InstanceSet> {
    cfg.validate()?;
    let s = cfg.crop_size;
    let cut = (manifest.len() as f64 * cfg.train_fraction).round() as usize;
    let (mut data, mut labels, mut train) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..manifest.len() {
        let sample = manifest.read_sample(i)?;
        for (b, l) in sample.boxes.iter().zip(&sample.labels) {
            data.extend(sample.image.crop_resize(b, s, s));
            labels.push(l.index());
            train.push(i < cut);
        }
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("dataset has no labelled instances".into()));
    }
    Ok(InstanceSet {
        crops: Tensor::new(&[labels.len(), 3, s, s], data)?,
        labels,
        train,
        classes: crate::data::ShapeClass::ALL.len(),
    })
}

/// Pooled online-encoder features, one row per crop.
pub fn extract_features(state: &ModelState<f32>, crops: &Tensor<f32>, chunk: usize) -> Result<Vec<Vec<f64>>> {
    let shape = crops.shape();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::shape("extract_features", format!("crops of shape {shape:?}")));
    }
    let per = shape[1..].iter().product::<usize>();
    let mut out = Vec::with_capacity(shape[0]);
    for start in (0..shape[0]).step_by(chunk.max(1)) {
        let n = chunk.min(shape[0] - start);
        let mut g = Graph::<f32>::new();
        let vars = state
            .online
            .iter()
            .map(|(_, t)| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let net = OnlineNet::from_vars(&state.config, vars);
        let x = Tensor::new(
            &[n, shape[1], shape[2], shape[3]],
            crops.data()[start * per..(start + n) * per].to_vec(),
        )?;
        let x = g.constant(x)?;
        let f = net.encoder.forward(&mut g, x)?;
        let v = g.value(f);
        let d = v.shape()[1];
        out.extend(v.data().chunks(d).map(|r| r.iter().map(|&x| x as f64).collect()));
    }
    Ok(out)
}

fn split<'a>(x: &'a [Vec<f64>], y: &[usize], train: &[bool], want: bool) -> (Vec<&'a [f64]>, Vec<usize>) {
    x.iter()
        .zip(y)
        .zip(train)
        .filter(|(_, &t)| t == want)
        .map(|((x, &y), _)| (x.as_slice(), y))
        .unzip()
}

fn check_rows(x: &[&[f64]], y: &[usize], classes: usize) -> Result<usize> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "{} feature rows for {} labels",
            x.len(),
            y.len()
        )));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(Error::shape("probe", "feature rows must share a positive width"));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
        return Err(Error::InvalidArgument(format!("label {bad} with {classes} classes")));
    }
    Ok(d)
}

/// Softmax classifier over standardized inputs. Weights are `[d + 1,
/// classes]` with the bias row last.
#[derive(Clone, Debug)]
pub struct LogisticModel {
    mean: Vec<f64>,
    scale: Vec<f64>,
    weights: Vec<f64>,
    classes: usize,
}

impl LogisticModel {
    fn scores(&self, x: &[f64], out: &mut [f64]) {
        let d = self.mean.len();
        let c = self.classes;
        out.copy_from_slice(&self.weights[d * c..]);
        for (j, &v) in x.iter().enumerate() {
            let z = (v - self.mean[j]) / self.scale[j];
            for (o, w) in out.iter_mut().zip(&self.weights[j * c..(j + 1) * c]) {
                *o += z * w;
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let mut s = vec![0.0; self.classes];
        self.scores(x, &mut s);
        argmax(&s)
    }
}

fn argmax(s: &[f64]) -> usize {
    s.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &v)| if v > best.1 { (i, v) } else { best },
        )
        .0
}

/// Full-batch gradient descent on the mean cross-entropy plus an L2
/// penalty on the non-bias weights.
pub fn logistic_regression(x: &[&[f64]], y: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<LogisticModel> {
    let d = check_rows(x, y, classes)?;
    let n = x.len() as f64;
    let mut mean = vec![0.0; d];
    for r in x {
        for (m, v) in mean.iter_mut().zip(*r) {
            *m += v / n;
        }
    }
    let mut scale = vec![0.0; d];
    for r in x {
        for ((s, v), m) in scale.iter_mut().zip(*r).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    // constant features stay at zero after centring
    let scale: Vec<f64> = scale.into_iter().map(|v| v.sqrt().max(1e-6)).collect();
    let mut model = LogisticModel {
        mean,
        scale,
        weights: vec![0.0; (d + 1) * classes],
        classes,
    };
    let mut grad = vec![0.0; model.weights.len()];
    let mut p = vec![0.0; classes];
    for _ in 0..cfg.iterations {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (r, &label) in x.iter().zip(y) {
            model.scores(r, &mut p);
            let top = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = p
                .iter_mut()
                .map(|v| {
                    *v = (*v - top).exp();
                    *v
                })
                .sum();
            p.iter_mut().for_each(|v| *v /= z);
            p[label] -= 1.0;
            for (j, &v) in r.iter().enumerate() {
                let zj = (v - model.mean[j]) / model.scale[j];
                for (g, e) in grad[j * classes..(j + 1) * classes].iter_mut().zip(&p) {
                    *g += zj * e / n;
                }
            }
            for (g, e) in grad[d * classes..].iter_mut().zip(&p) {
                *g += e / n;
            }
        }
        for (i, (w, g)) in model.weights.iter_mut().zip(&grad).enumerate() {
            let decay = if i < d * classes { cfg.l2 * *w } else { 0.0 };
            *w -= cfg.lr * (g + decay);
        }
    }
    Ok(model)
}

fn accuracy(pred: impl Iterator<Item = usize>, y: &[usize]) -> f64 {
    let hits = pred.zip(y).filter(|(p, y)| p == *y).count();
    hits as f64 / y.len() as f64
}

/// Fit on the training rows and score the held-out rows.
pub fn linear_probe(
    features: &[Vec<f64>],
    labels: &[usize],
    train: &[bool],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<f64> {
    let (xa, ya) = split(features, labels, train, true);
    let (xb, yb) = split(features, labels, train, false);
    check_rows(&xb, &yb, classes)?;
    let model = logistic_regression(&xa, &ya, classes, cfg)?;
    Ok(accuracy(xb.iter().map(|r| model.predict(r)), &yb))
}

fn unit(r: &[f64]) -> Vec<f64> {
    let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        r.iter().map(|v| v / n).collect()
    } else {
        vec![0.0; r.len()]
    }
}

/// Majority vote among the `k` most cosine-similar reference rows. Ties
/// in similarity keep reference order; ties in the vote go to the class of
/// the nearest neighbour among the tied classes.
pub fn knn_predict(reference: &[&[f64]], labels: &[usize], query: &[f64], k: usize, classes: usize) -> Result<usize> {
    if k == 0 || k > reference.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} with {} reference rows",
            reference.len()
        )));
    }
    let q = unit(query);
    let mut sims: Vec<(usize, f64)> = reference
        .iter()
        .enumerate()
        .map(|(i, r)| (i, unit(r).iter().zip(&q).map(|(a, b)| a * b).sum()))
        .collect();
    sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut votes = vec![0usize; classes];
    for &(i, _) in &sims[..k] {
        votes[labels[i]] += 1;
    }
    let top = *votes.iter().max().expect("at least one class");
    Ok(sims[..k]
        .iter()
        .map(|&(i, _)| labels[i])
        .find(|&c| votes[c] == top)
        .expect("a top class is present"))
}

/// kNN accuracy of the held-out rows against the training rows.
pub fn knn_accuracy(features: &[Vec<f64>], labels: &[usize], train: &[bool], classes: usize, k: usize) -> Result<f64> {
    let (xa, ya) = split(features, labels, train, true);
    let (xb, yb) = split(features, labels, train, false);
    check_rows(&xa, &ya, classes)?;
    check_rows(&xb, &yb, classes)?;
    let pred = xb
        .iter()
        .map(|q| knn_predict(&xa, &ya, q, k, classes))
        .collect::<Result<Vec<_>>>()?;
    Ok(accuracy(pred.into_iter(), &yb))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ProbeReport {
    pub linear: f64,
    pub knn: f64,
    pub train_instances: usize,
    pub test_instances: usize,
}

pub fn probe_checkpoint(state: &ModelState<f32>, set: &InstanceSet, cfg: &ProbeConfig) -> Result<ProbeReport> {
    let features = extract_features(state, &set.crops, cfg.chunk)?;
    let linear = linear_probe(&features, &set.labels, &set.train, set.classes, cfg)?;
    let knn = knn_accuracy(&features, &set.labels, &set.train, set.classes, cfg.knn_k)?;
    let train_instances = set.train.iter().filter(|&&t| t).count();
    Ok(ProbeReport {
        linear,
        knn,
        train_instances,
        test_instances: set.labels.len() - train_instances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn one_hot(n: usize, classes: usize) -> (Vec<Vec<f64>>, Vec<usize>, Vec<bool>) {
        let y: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let x = y
            .iter()
            .map(|&c| (0..classes).map(|j| (j == c) as u8 as f64).collect())
            .collect();
        let train = (0..n).map(|i| i < n * 4 / 5).collect();
        (x, y, train)
    }

    #[test]
    fn one_hot_features_are_perfect() {
        let (x, y, t) = one_hot(200, 4);
        assert_eq!(linear_probe(&x, &y, &t, 4, &ProbeConfig::default()).unwrap(), 1.0);
        assert_eq!(knn_accuracy(&x, &y, &t, 4, 5).unwrap(), 1.0);
    }

    #[test]
    fn constant_features_are_at_chance() {
        let (_, y, t) = one_hot(400, 4);
        let x = vec![vec![0.7, -0.2, 1.0]; 400];
        let acc = linear_probe(&x, &y, &t, 4, &ProbeConfig::default()).unwrap();
        assert!((acc - 0.25).abs() < 0.05, "{acc}");
        let acc = knn_accuracy(&x, &y, &t, 4, 5).unwrap();
        assert!((acc - 0.25).abs() < 0.05, "{acc}");
    }

    #[test]
    fn knn_on_its_own_reference_set() {
        let mut rng = crate::rng::rng_from(3);
        let x: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let y: Vec<usize> = (0..50).map(|i| i % 4).collect();
        let refs: Vec<&[f64]> = x.iter().map(|r| r.as_slice()).collect();
        for (q, &label) in x.iter().zip(&y) {
            assert_eq!(knn_predict(&refs, &y, q, 1, 4).unwrap(), label);
        }
        assert!(knn_predict(&refs, &y, &x[0], 51, 4).is_err());
    }

    #[test]
    fn separable_gaussians() {
        let mut rng = crate::rng::rng_from(9);
        let y: Vec<usize> = (0..300).map(|i| i % 3).collect();
        let x: Vec<Vec<f64>> = y
            .iter()
            .map(|&c| {
                (0..4)
                    .map(|j| 10.0 * (j == c) as u8 as f64 + rng.gen_range(-1.0..1.0))
                    .collect()
            })
            .collect();
        let t: Vec<bool> = (0..300).map(|i| i < 240).collect();
        assert_eq!(linear_probe(&x, &y, &t, 3, &ProbeConfig::default()).unwrap(), 1.0);
    }
}
