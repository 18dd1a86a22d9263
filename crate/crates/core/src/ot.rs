//! Instance matching through entropic optimal transport.
//!
//! Online instance features supply mass, target instance features demand
//! it, and the cost of moving a unit between them is one minus their cosine
//! similarity. The plan is solved with log-domain Sinkhorn iterations and
//! then used as fixed weights on the cosine similarities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var, NORM_EPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            epsilon: 0.05,
            // most problems converge well under 200 sweeps, but the tail at
            // this epsilon runs to several thousand
            max_iter: 10_000,
            tol: 1e-6,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.max_iter == 0 || !(self.tol > 0.0) {
            return Err(Error::InvalidArgument("max_iter and tol must be positive".into()));
        }
        Ok(())
    }
}

/// Supplier (row) and demander (column) weights, each summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct Marginals {
    pub supply: Vec<f64>,
    pub demand: Vec<f64>,
    /// Raw weights before normalization.
    pub raw_supply: Vec<f64>,
    pub raw_demand: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    k: usize,
    plan: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Largest row or column sum violation of the returned plan.
    pub max_violation: f64,
}

impl TransportPlan {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, m: usize, n: usize) -> f64 {
        self.plan[m * self.k + n]
    }

    pub fn data(&self) -> &[f64] {
        &self.plan
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.plan.chunks(self.k).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        (0..self.k).map(|n| (0..self.k).map(|m| self.get(m, n)).sum()).collect()
    }

    /// `<C, plan>`.
    pub fn cost(&self, cost: &Tensor<f64>) -> f64 {
        cost.data().iter().zip(&self.plan).map(|(c, p)| c * p).sum()
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_f64(&[self.k, self.k], &self.plan).expect("square plan")
    }
}

fn check_pair<T: Scalar>(g: &Graph<T>, o: Var, t: Var, op: &'static str) -> Result<()> {
    let (so, st) = (g.shape(o), g.shape(t));
    if so.len() != 2 || so != st {
        return Err(Error::shape(
            op,
            format!("expected two [K, d] matrices, got {so:?} and {st:?}"),
        ));
    }
    let d = so[1];
    for v in [o, t] {
        for row in g.value(v).data().chunks(d) {
            if row.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt() <= NORM_EPS {
                return Err(Error::Degenerate(format!("{op}: zero-norm feature vector")));
            }
        }
    }
    Ok(())
}

/// `[K, K]` matrix of cosines between rows of `o` and rows of `t`.
fn similarity<T: Scalar>(g: &mut Graph<T>, o: Var, t: Var, op: &'static str) -> Result<Var> {
    check_pair(g, o, t, op)?;
    let uo = g.l2_normalize(o, T::of(NORM_EPS))?;
    let ut = g.l2_normalize(t, T::of(NORM_EPS))?;
    let utt = g.transpose(ut)?;
    g.matmul(uo, utt)
}

/// `c[m][n] = 1 - cos(o_m, t_n)`, differentiable in both arguments.
pub fn cost_matrix<T: Scalar>(g: &mut Graph<T>, o: Var, t: Var) -> Result<Var> {
    let sim = similarity(g, o, t, "cost_matrix")?;
    let k = g.shape(o)[0];
    let ones = g.constant(Tensor::ones(&[k, k]))?;
    g.sub(ones, sim)
}

/// Cost matrix computed from plain values, in `f64`.
pub fn cost_values<T: Scalar>(o: &Tensor<T>, t: &Tensor<T>) -> Result<Tensor<f64>> {
    if o.shape().len() != 2 || o.shape() != t.shape() {
        return Err(Error::shape(
            "cost_matrix",
            format!("{:?} vs {:?}", o.shape(), t.shape()),
        ));
    }
    let (k, d) = (o.shape()[0], o.shape()[1]);
    let unit = |x: &Tensor<T>| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(k * d);
        for row in x.data().chunks(d) {
            let n = row.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
            if n <= NORM_EPS {
                return Err(Error::Degenerate("cost_matrix: zero-norm feature vector".into()));
            }
            out.extend(row.iter().map(|v| v.f64() / n));
        }
        Ok(out)
    };
    let (uo, ut) = (unit(o)?, unit(t)?);
    let mut c = Vec::with_capacity(k * k);
    for m in 0..k {
        for n in 0..k {
            let dot: f64 = uo[m * d..(m + 1) * d]
                .iter()
                .zip(&ut[n * d..(n + 1) * d])
                .map(|(a, b)| a * b)
                .sum();
            c.push(1.0 - dot);
        }
    }
    Tensor::new(&[k, k], c)
}

fn normalize(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        raw.iter().map(|w| w / total).collect()
    } else {
        vec![1.0 / raw.len() as f64; raw.len()]
    }
}

fn dot<T: Scalar>(a: &[T], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.f64() * y).sum()
}

fn mean_pair<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Vec<f64> {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| 0.5 * (x.f64() + y.f64()))
        .collect()
}

/// Supplier weights `b_m = max(o_m · (f_t1 + f_t2)/2, 0)` and demander
/// weights `a_n = max(t_n · (f_o1 + f_o2)/2, 0)`, each rescaled to sum to
/// one. An all-zero vector becomes uniform.
pub fn marginal_weights<T: Scalar>(
    o: &Tensor<T>,
    t: &Tensor<T>,
    f_o: [&Tensor<T>; 2],
    f_t: [&Tensor<T>; 2],
) -> Result<Marginals> {
    if o.shape().len() != 2 || o.shape() != t.shape() {
        return Err(Error::shape(
            "marginal_weights",
            format!("{:?} vs {:?}", o.shape(), t.shape()),
        ));
    }
    let d = o.shape()[1];
    for f in f_o.iter().chain(&f_t) {
        if f.numel() != d {
            return Err(Error::shape(
                "marginal_weights",
                format!("scene feature {:?}, expected {d}", f.shape()),
            ));
        }
    }
    let target_scene = mean_pair(f_t[0], f_t[1]);
    let online_scene = mean_pair(f_o[0], f_o[1]);
    let raw_supply: Vec<f64> = o.data().chunks(d).map(|r| dot(r, &target_scene).max(0.0)).collect();
    let raw_demand: Vec<f64> = t.data().chunks(d).map(|r| dot(r, &online_scene).max(0.0)).collect();
    Ok(Marginals {
        supply: normalize(&raw_supply),
        demand: normalize(&raw_demand),
        raw_supply,
        raw_demand,
    })
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

struct Duals<'a> {
    cost: &'a [f64],
    k: usize,
    eps: f64,
    f: Vec<f64>,
    g: Vec<f64>,
}

impl Duals<'_> {
    fn entry(&self, m: usize, n: usize) -> f64 {
        let z = (self.f[m] + self.g[n] - self.cost[m * self.k + n]) / self.eps;
        if z.is_nan() {
            0.0
        } else {
            z.exp()
        }
    }

    fn objective(&self, supply: &[f64], demand: &[f64]) -> f64 {
        let linear =
            |w: &[f64], p: &[f64]| -> f64 { w.iter().zip(p).filter(|(&w, _)| w > 0.0).map(|(w, p)| w * p).sum() };
        let mut mass = 0.0;
        for m in 0..self.k {
            for n in 0..self.k {
                mass += self.entry(m, n);
            }
        }
        linear(supply, &self.f) + linear(demand, &self.g) - self.eps * mass
    }

    fn violation(&self, supply: &[f64], demand: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for m in 0..self.k {
            let row: f64 = (0..self.k).map(|n| self.entry(m, n)).sum();
            worst = worst.max((row - supply[m]).abs());
        }
        for n in 0..self.k {
            let col: f64 = (0..self.k).map(|m| self.entry(m, n)).sum();
            worst = worst.max((col - demand[n]).abs());
        }
        worst
    }
}

fn validate_problem(cost: &Tensor<f64>, supply: &[f64], demand: &[f64], cfg: &SinkhornConfig) -> Result<usize> {
    cfg.validate()?;
    let k = supply.len();
    if cost.shape() != [k, k] || demand.len() != k {
        return Err(Error::shape(
            "sinkhorn",
            format!(
                "cost {:?} with {} suppliers and {} demanders",
                cost.shape(),
                k,
                demand.len()
            ),
        ));
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite { op: "sinkhorn" });
    }
    if supply.iter().chain(demand).any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidArgument(
            "marginals must be finite and non-negative".into(),
        ));
    }
    let (ts, td) = (supply.iter().sum::<f64>(), demand.iter().sum::<f64>());
    if (ts - td).abs() > 1e-9 || ts <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "marginal totals must match and be positive: supply {ts}, demand {td}"
        )));
    }
    Ok(k)
}

/// Entropic transport plan with row sums `supply` and column sums `demand`.
pub fn sinkhorn(cost: &Tensor<f64>, supply: &[f64], demand: &[f64], cfg: &SinkhornConfig) -> Result<TransportPlan> {
    sinkhorn_traced(cost, supply, demand, cfg).map(|(plan, _)| plan)
}

/// As [`sinkhorn`], also returning the dual objective after each iteration.
pub fn sinkhorn_traced(
    cost: &Tensor<f64>,
    supply: &[f64],
    demand: &[f64],
    cfg: &SinkhornConfig,
) -> Result<(TransportPlan, Vec<f64>)> {
    let k = validate_problem(cost, supply, demand, cfg)?;
    let eps = cfg.epsilon;
    let log_supply: Vec<f64> = supply.iter().map(|w| w.ln()).collect();
    let log_demand: Vec<f64> = demand.iter().map(|w| w.ln()).collect();
    let c = cost.data();
    let mut duals = Duals {
        cost: c,
        k,
        eps,
        f: vec![0.0; k],
        g: vec![0.0; k],
    };
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut violation = f64::INFINITY;
    while iterations < cfg.max_iter {
        iterations += 1;
        for m in 0..k {
            duals.f[m] = if supply[m] > 0.0 {
                let g = &duals.g;
                eps * (log_supply[m] - logsumexp((0..k).map(|n| (g[n] - c[m * k + n]) / eps)))
            } else {
                f64::NEG_INFINITY
            };
        }
        for n in 0..k {
            duals.g[n] = if demand[n] > 0.0 {
                let f = &duals.f;
                eps * (log_demand[n] - logsumexp((0..k).map(|m| (f[m] - c[m * k + n]) / eps)))
            } else {
                f64::NEG_INFINITY
            };
        }
        trace.push(duals.objective(supply, demand));
        violation = duals.violation(supply, demand);
        if violation < cfg.tol {
            converged = true;
            break;
        }
    }
    let mut plan = Vec::with_capacity(k * k);
    for m in 0..k {
        for n in 0..k {
            plan.push(duals.entry(m, n));
        }
    }
    if plan.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::NonFinite { op: "sinkhorn" });
    }
    Ok((
        TransportPlan {
            k,
            plan,
            converged,
            iterations,
            max_violation: violation,
        },
        trace,
    ))
}

/// `-Σ_mn cos(o_m, t_n) · plan_mn`. Gradients reach `o` only.
pub fn instance_loss<T: Scalar>(g: &mut Graph<T>, o: Var, t: Var, plan: &TransportPlan) -> Result<Var> {
    let k = g.shape(o).first().copied().unwrap_or(0);
    if plan.k() != k {
        return Err(Error::shape(
            "instance_loss",
            format!("plan is {0}x{0}, features have {k} rows", plan.k()),
        ));
    }
    let t = g.stopgrad(t);
    let sim = similarity(g, o, t, "instance_loss")?;
    let weights = g.constant(plan.to_tensor())?;
    let weighted = g.mul(sim, weights)?;
    let total = g.sum(weighted)?;
    g.neg(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn cost_examples() {
        let mut g = Graph::<f64>::new();
        let o = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let c = cost_matrix(&mut g, o, o).unwrap();
        assert_eq!(g.value(c).data(), &[0.0, 1.0, 1.0, 0.0]);
        let a = g.constant(t(&[1, 2], &[1.0, 2.0])).unwrap();
        let b = g.constant(t(&[1, 2], &[-1.0, -2.0])).unwrap();
        let c = cost_matrix(&mut g, a, b).unwrap();
        assert!((g.value(c).data()[0] - 2.0).abs() < 1e-15);
        let z = g.constant(Tensor::zeros(&[1, 2])).unwrap();
        assert!(matches!(cost_matrix(&mut g, a, z), Err(Error::Degenerate(_))));
    }

    #[test]
    fn marginal_examples() {
        let o = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let tt = t(&[2, 2], &[1.0, 1.0, -1.0, 0.0]);
        let fo = t(&[2], &[1.0, 0.0]);
        let ft = t(&[2], &[0.0, 2.0]);
        let mw = marginal_weights(&o, &tt, [&fo, &fo], [&ft, &ft]).unwrap();
        // o_0 orthogonal to the target scene mean, t_1 has a negative dot product
        assert_eq!(mw.raw_supply, vec![0.0, 2.0]);
        assert_eq!(mw.raw_demand, vec![1.0, 0.0]);
        assert_eq!(mw.supply, vec![0.0, 1.0]);
        assert_eq!(mw.demand, vec![1.0, 0.0]);

        let neg = t(&[2], &[-1.0, -1.0]);
        let mw = marginal_weights(&o, &o, [&neg, &neg], [&neg, &neg]).unwrap();
        assert_eq!(mw.supply, vec![0.5, 0.5]);
        assert_eq!(mw.demand, vec![0.5, 0.5]);
    }

    #[test]
    fn sinkhorn_examples() {
        let cfg = SinkhornConfig::default();
        let p = sinkhorn(&t(&[1, 1], &[0.7]), &[1.0], &[1.0], &cfg).unwrap();
        assert!(p.converged);
        assert!((p.get(0, 0) - 1.0).abs() < 1e-15);

        let cfg01 = SinkhornConfig {
            epsilon: 0.01,
            ..cfg.clone()
        };
        let p = sinkhorn(&t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]), &[0.5, 0.5], &[0.5, 0.5], &cfg01).unwrap();
        assert!((p.get(0, 0) - 0.5).abs() < 1e-3 && (p.get(1, 1) - 0.5).abs() < 1e-3);

        let b = [0.1, 0.2, 0.7];
        let a = [0.3, 0.3, 0.4];
        for eps in [0.01, 0.05, 1.0] {
            let c = Tensor::full(&[3, 3], 0.8);
            let p = sinkhorn(
                &c,
                &b,
                &a,
                &SinkhornConfig {
                    epsilon: eps,
                    ..cfg.clone()
                },
            )
            .unwrap();
            for m in 0..3 {
                for n in 0..3 {
                    assert!((p.get(m, n) - b[m] * a[n]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn sinkhorn_errors() {
        let cfg = SinkhornConfig::default();
        let c = Tensor::zeros(&[2, 2]);
        assert!(sinkhorn(&c, &[0.5, 0.5], &[0.6, 0.5], &cfg).is_err());
        assert!(sinkhorn(
            &c,
            &[0.5, 0.5],
            &[0.5, 0.5],
            &SinkhornConfig {
                epsilon: 0.0,
                ..cfg.clone()
            }
        )
        .is_err());
        assert!(sinkhorn(&c, &[0.5, 0.5, 0.0], &[0.5, 0.5, 0.0], &cfg).is_err());
    }

    #[test]
    fn zero_mass_rows_and_columns() {
        let c = t(&[2, 2], &[0.3, 1.2, 0.1, 0.9]);
        let p = sinkhorn(&c, &[0.0, 1.0], &[0.25, 0.75], &SinkhornConfig::default()).unwrap();
        assert!(p.converged);
        assert_eq!(p.get(0, 0), 0.0);
        assert_eq!(p.get(0, 1), 0.0);
        assert!((p.get(1, 0) - 0.25).abs() < 1e-9);
    }

    #[test]
    fn instance_loss_examples() {
        let mut g = Graph::<f64>::new();
        let o = g.param(t(&[2, 3], &[1.0, 0.0, 0.0, 0.0, 2.0, 0.0])).unwrap();
        let diag = TransportPlan {
            k: 2,
            plan: vec![0.5, 0.0, 0.0, 0.5],
            converged: true,
            iterations: 1,
            max_violation: 0.0,
        };
        let l = instance_loss(&mut g, o, o, &diag).unwrap();
        assert!((g.value(l).data()[0] + 1.0).abs() < 1e-15);
        let zero = TransportPlan {
            plan: vec![0.0; 4],
            ..diag
        };
        let l = instance_loss(&mut g, o, o, &zero).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
    }
}
