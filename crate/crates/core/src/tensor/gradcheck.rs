//! Central-difference verification of analytic gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Below this norm both gradients are treated as zero.
const NORM_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub index: usize,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.
    pub rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub params: Vec<ParamReport>,
    pub h: f64,
    pub tol: f64,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.rel_err < self.tol)
    }
}

fn evaluate<F>(f: &F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = params
        .iter()
        .map(|p| g.constant(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut g, &vars)?;
    g.value(loss).item()
}

/// Compare the gradient that `f` produces through [`Graph::backward`] with
/// central differences of step `h` for every element of every parameter.
///
/// `f` receives a fresh graph and one variable per parameter and must return
/// a scalar.
pub fn finite_diff_check<F>(f: F, params: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let base = evaluate(&f, params)?;
    if evaluate(&f, params)?.to_bits() != base.to_bits() {
        return Err(Error::Numeric("function is not deterministic".into()));
    }

    let mut g = Graph::new();
    let vars = params.iter().map(|p| g.param(p.clone())).collect::<Result<Vec<_>>>()?;
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;

    let mut work = params.to_vec();
    let mut reports = Vec::with_capacity(params.len());
    for (index, &v) in vars.iter().enumerate() {
        let analytic = g.grad(v).unwrap_or_else(|| Tensor::zeros(params[index].shape()));
        let mut diff2 = 0.0;
        let mut num2 = 0.0;
        let mut max_abs_err: f64 = 0.0;
        for k in 0..params[index].numel() {
            let x0 = params[index].data()[k];
            work[index].data_mut()[k] = x0 + h;
            let up = evaluate(&f, &work)?;
            work[index].data_mut()[k] = x0 - h;
            let down = evaluate(&f, &work)?;
            work[index].data_mut()[k] = x0;
            let numeric = (up - down) / (2.0 * h);
            let err = analytic.data()[k] - numeric;
            diff2 += err * err;
            num2 += numeric * numeric;
            max_abs_err = max_abs_err.max(err.abs());
        }
        let ana2: f64 = analytic.data().iter().map(|x| x * x).sum();
        let denom = ana2.sqrt().max(num2.sqrt());
        let rel_err = if denom < NORM_FLOOR {
            diff2.sqrt()
        } else {
            diff2.sqrt() / denom
        };
        reports.push(ParamReport {
            index,
            rel_err,
            max_abs_err,
        });
    }
    Ok(GradReport {
        params: reports,
        h,
        tol,
    })
}
