//! Oracles shared by the integration tests.
#![allow(dead_code)]

use rand::Rng as _;
use univip_core::rng::Rng;
use univip_core::tensor::Tensor;

/// Box-Muller standard normal.
pub fn normal(rng: &mut Rng) -> f64 {
    let u: f64 = rng.gen_range(f64::EPSILON..1.0);
    let v: f64 = rng.gen();
    (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
}

pub fn cosine_cost(k: usize, d: usize, rng: &mut Rng) -> Tensor<f64> {
    let o: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| normal(rng)).collect()).collect();
    let t: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| normal(rng)).collect()).collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut c = Vec::with_capacity(k * k);
    for om in &o {
        for tn in &t {
            let dot: f64 = om.iter().zip(tn).map(|(a, b)| a * b).sum();
            c.push(1.0 - dot / (norm(om) * norm(tn)));
        }
    }
    Tensor::from_f64(&[k, k], &c).unwrap()
}

pub fn simplex(k: usize, rng: &mut Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|w| w / s).collect()
}

pub fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, k - 1);
            out.push(q);
        }
    }
    out
}

/// Cheapest assignment cost under uniform marginals, by enumeration.
pub fn permutation_optimum(c: &Tensor<f64>) -> f64 {
    let k = c.shape()[0];
    permutations(k)
        .iter()
        .map(|s| s.iter().enumerate().map(|(m, &n)| c.data()[m * k + n]).sum::<f64>() / k as f64)
        .fold(f64::INFINITY, f64::min)
}
