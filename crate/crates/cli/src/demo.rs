//! Text format for a single transport problem:
//!
//! ```text
//! # comments and blank lines are ignored
//! epsilon 0.05
//! supply 0.5 0.5
//! demand 0.5 0.5
//! cost
//! 0.0 1.0
//! 1.0 0.0
//! ```
//!
//! `epsilon`, `max_iter` and `tol` are optional; missing marginals default
//! to uniform.

use std::path::Path;

use univip_core::ot::SinkhornConfig;
use univip_core::tensor::Tensor;
use univip_core::{Error, Result};

#[derive(Debug)]
pub struct Problem {
    pub cost: Tensor<f64>,
    pub supply: Vec<f64>,
    pub demand: Vec<f64>,
    pub config: SinkhornConfig,
}

pub fn parse(text: &str, origin: &Path) -> Result<Problem> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        column: 1,
        message,
    };
    let numbers = |line: usize, words: &[&str]| -> Result<Vec<f64>> {
        words
            .iter()
            .map(|w| {
                w.parse::<f64>()
                    .map_err(|_| err(line, format!("`{w}` is not a number")))
            })
            .collect()
    };
    let mut config = SinkhornConfig::default();
    let (mut supply, mut demand, mut rows) = (None, None, Vec::new());
    let mut in_cost = false;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let words: Vec<&str> = raw.split('#').next().unwrap_or("").split_whitespace().collect();
        let Some((&head, rest)) = words.split_first() else {
            continue;
        };
        let single = |what: &str| -> Result<f64> {
            match numbers(line, rest)?.as_slice() {
                [v] => Ok(*v),
                _ => Err(err(line, format!("`{what}` takes one value"))),
            }
        };
        match head {
            "epsilon" => config.epsilon = single(head)?,
            "tol" => config.tol = single(head)?,
            "max_iter" => {
                let v = single(head)?;
                if v < 1.0 || v.fract() != 0.0 {
                    return Err(err(line, "`max_iter` must be a positive integer".into()));
                }
                config.max_iter = v as usize;
            }
            "supply" => supply = Some(numbers(line, rest)?),
            "demand" => demand = Some(numbers(line, rest)?),
            "cost" if rest.is_empty() => in_cost = true,
            _ if in_cost => rows.push((line, numbers(line, &words)?)),
            other => return Err(err(line, format!("unknown directive `{other}`"))),
        }
    }
    let k = rows.len();
    if k == 0 {
        return Err(err(1, "no cost matrix".into()));
    }
    if let Some((line, r)) = rows.iter().find(|(_, r)| r.len() != k) {
        return Err(err(*line, format!("cost row has {} entries, expected {k}", r.len())));
    }
    let uniform = vec![1.0 / k as f64; k];
    let cost = Tensor::new(&[k, k], rows.into_iter().flat_map(|(_, r)| r).collect())?;
    config.validate()?;
    Ok(Problem {
        cost,
        supply: supply.unwrap_or_else(|| uniform.clone()),
        demand: demand.unwrap_or(uniform),
        config,
    })
}
