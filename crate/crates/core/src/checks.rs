//! Finite-difference gradient suite over every differentiable op and the
//! full objective on a small network.

use rand::Rng as _;

use crate::error::Result;
use crate::losses::{forward_batch, univip_loss, LossTerms};
use crate::model::{ModelConfig, ModelState, OnlineNet};
use crate::ot::{SinkhornConfig, TransportPlan};
use crate::rng::{rng_from, Rng};
use crate::tensor::{finite_diff_check, GradReport, Graph, Tensor, Var, NORM_EPS};

type CaseFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub f: CaseFn,
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    pub runs: usize,
    pub failures: usize,
    pub worst_rel_err: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Values in `±[0.05, 1.5)`, away from the relu kink.
pub fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let x: f64 = rng.gen_range(0.05..1.5);
            if rng.gen_bool(0.5) {
                x
            } else {
                -x
            }
        })
        .collect();
    Tensor::new(shape, data).expect("positive shape")
}

/// Contract an output with fixed uneven weights so every element matters.
pub fn weighted_sum(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let n = g.value(y).numel();
    let w = Tensor::new(
        g.shape(y),
        (0..n).map(|i| 0.3 + 0.7 * ((i * 7919) % 13) as f64 / 13.0).collect(),
    )?;
    let w = g.constant(w)?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn case(
    name: &'static str,
    shapes: &[&[usize]],
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        f: Box::new(f),
    }
}

fn reduced(op: fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> {
    move |g, p| {
        let y = op(g, p)?;
        weighted_sum(g, y)
    }
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("add", &[&[3, 4], &[4]], reduced(|g, p| g.add(p[0], p[1]))),
        case("sub", &[&[2, 3], &[2, 1]], reduced(|g, p| g.sub(p[0], p[1]))),
        case("mul", &[&[2, 3], &[2, 3]], reduced(|g, p| g.mul(p[0], p[1]))),
        case("scale", &[&[5]], reduced(|g, p| g.scale(p[0], -1.7))),
        case("neg", &[&[5]], reduced(|g, p| g.neg(p[0]))),
        case("relu", &[&[6]], reduced(|g, p| g.relu(p[0]))),
        case("clamp_min_zero", &[&[6]], reduced(|g, p| g.clamp_min_zero(p[0]))),
        case("matmul", &[&[3, 4], &[4, 2]], reduced(|g, p| g.matmul(p[0], p[1]))),
        case("transpose", &[&[3, 4]], reduced(|g, p| g.transpose(p[0]))),
        case(
            "conv2d",
            &[&[2, 2, 5, 5], &[3, 2, 3, 3], &[3]],
            reduced(|g, p| g.conv2d(p[0], p[1], Some(p[2]), 2, 1)),
        ),
        case(
            "conv2d_nopad",
            &[&[1, 3, 4, 5], &[2, 3, 2, 2]],
            reduced(|g, p| g.conv2d(p[0], p[1], None, 1, 0)),
        ),
        case(
            "l2_normalize",
            &[&[3, 4]],
            reduced(|g, p| g.l2_normalize(p[0], NORM_EPS)),
        ),
        case("cosine", &[&[5], &[5]], |g, p| g.cosine(p[0], p[1], NORM_EPS)),
        case("batch_norm", &[&[5, 3]], reduced(|g, p| g.batch_norm(p[0], 1e-5))),
        case(
            "concat",
            &[&[2, 3], &[2, 2]],
            reduced(|g, p| g.concat(&[p[0], p[1]], 1)),
        ),
        case("reshape", &[&[2, 3]], reduced(|g, p| g.reshape(p[0], &[3, 2]))),
        case("narrow", &[&[4, 3]], reduced(|g, p| g.narrow(p[0], 1, 2))),
        case("sum", &[&[2, 3]], |g, p| g.sum(p[0])),
        case("mean", &[&[7]], |g, p| g.mean(p[0])),
        case("sum_last", &[&[2, 3, 4]], reduced(|g, p| g.sum_last(p[0]))),
        case("mean_last", &[&[2, 3, 4]], reduced(|g, p| g.mean_last(p[0]))),
    ]
}

pub fn run_case(case: &OpCase, seeds: u64, h: f64, tol: f64) -> Result<CaseResult> {
    let mut result = CaseResult {
        name: case.name.to_string(),
        runs: 0,
        failures: 0,
        worst_rel_err: 0.0,
    };
    for seed in 0..seeds {
        let mut rng = rng_from(seed);
        let params: Vec<_> = case.shapes.iter().map(|s| random_tensor(&mut rng, s)).collect();
        let report = finite_diff_check(&case.f, &params, h, tol)?;
        result.runs += 1;
        result.worst_rel_err = result.worst_rel_err.max(report.max_rel_err());
        if !report.passed() {
            result.failures += 1;
        }
    }
    Ok(result)
}

/// Network small enough that central differences over every parameter
/// stay cheap.
pub fn tiny_model_config(k: usize) -> ModelConfig {
    ModelConfig {
        channels: vec![3, 4],
        proj_hidden: 5,
        dim: 4,
        pred_hidden: 5,
        k,
        fusion_noise: 0.05,
        head_norm: true,
    }
}

/// Everything needed to evaluate the objective as a function of the online
/// parameters alone.
pub struct ObjectiveFixture {
    pub state: ModelState<f64>,
    pub scenes: Tensor<f64>,
    pub instances: Tensor<f64>,
    pub terms: LossTerms,
    pub sinkhorn: SinkhornConfig,
    /// Plans solved once at the unperturbed parameters.
    pub plans: Vec<TransportPlan>,
}

impl ObjectiveFixture {
    /// `batch` samples with `k` instances each, random images, a target
    /// network that differs from the online one.
    pub fn new(seed: u64, batch: usize, k: usize, terms: LossTerms) -> Result<Self> {
        let mut rng = rng_from(seed);
        let mut state = ModelState::<f64>::init(tiny_model_config(k), 0.99, &mut rng)?;
        let other = ModelState::<f64>::init(tiny_model_config(k), 0.99, &mut rng)?;
        state.target = other.target;
        let image = |rng: &mut Rng, n: usize, s: usize| {
            let data = (0..n * 3 * s * s).map(|_| rng.gen_range(0.0..1.0)).collect();
            Tensor::new(&[n, 3, s, s], data)
        };
        let scenes = image(&mut rng, 2 * batch, 12)?;
        let instances = image(&mut rng, batch * k, 8)?;
        let mut fixture = ObjectiveFixture {
            state,
            scenes,
            instances,
            terms,
            sinkhorn: SinkhornConfig::default(),
            plans: Vec::new(),
        };
        let params: Vec<Tensor<f64>> = fixture.state.online.iter().map(|(_, t)| t.clone()).collect();
        let mut g = Graph::new();
        let vars = params
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = fixture.evaluate(&mut g, &vars, None)?;
        fixture.plans = out.1;
        Ok(fixture)
    }

    fn evaluate(
        &self,
        g: &mut Graph<f64>,
        online: &[Var],
        plans: Option<&[TransportPlan]>,
    ) -> Result<(Var, Vec<TransportPlan>)> {
        let on = OnlineNet::from_vars(&self.state.config, online.to_vec());
        let tg = self.state.bind_target(g)?;
        let scenes = g.constant(self.scenes.clone())?;
        let instances = if self.terms.needs_instances() {
            Some(g.constant(self.instances.clone())?)
        } else {
            None
        };
        let f = forward_batch(g, &on, &tg, scenes, instances, self.state.config.k)?;
        let out = univip_loss(g, &f, self.terms, &self.sinkhorn, plans)?;
        Ok((out.loss, out.plans))
    }

    pub fn params(&self) -> Vec<Tensor<f64>> {
        self.state.online.iter().map(|(_, t)| t.clone()).collect()
    }

    /// Loss as a function of the online parameters with the plans held fixed.
    pub fn loss(&self, g: &mut Graph<f64>, online: &[Var]) -> Result<Var> {
        let plans = if self.terms.instance {
            Some(self.plans.as_slice())
        } else {
            None
        };
        self.evaluate(g, online, plans).map(|(l, _)| l)
    }

    /// Analytic gradient of every online parameter.
    pub fn gradients(&self) -> Result<Vec<Tensor<f64>>> {
        let mut g = Graph::new();
        let vars = self
            .params()
            .into_iter()
            .map(|t| g.param(t))
            .collect::<Result<Vec<_>>>()?;
        let l = self.loss(&mut g, &vars)?;
        g.backward(l)?;
        Ok(vars
            .iter()
            .map(|&v| g.grad(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            .collect())
    }

    pub fn check(&self, h: f64, tol: f64) -> Result<GradReport> {
        finite_diff_check(|g, p| self.loss(g, p), &self.params(), h, tol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_a_few_seeds() {
        for c in op_cases() {
            let r = run_case(&c, 3, 1e-5, 1e-4).unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn objective_fixture_checks() {
        let fx = ObjectiveFixture::new(0, 2, 2, LossTerms::default()).unwrap();
        assert_eq!(fx.plans.len(), 2);
        let report = fx.check(1e-5, 1e-4).unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
