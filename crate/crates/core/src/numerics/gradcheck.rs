//! Central finite-difference verification of analytic gradients (64-bit).

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::exec::{backward, forward, TensorSource};
use super::graph::{ComputeGraph, NodeId};
use super::tensor::Tensor;

/// Upper bound on perturbed scalars per check.
pub const MAX_CHECKED_SCALARS: usize = 10_000;

/// Gradients smaller than this are compared in absolute terms.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub scalars: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn loss_at(
    graph: &ComputeGraph,
    inputs: &dyn TensorSource<f64>,
    params: &BTreeMap<String, Tensor<f64>>,
    loss: NodeId,
) -> Result<f64> {
    let exec = forward(graph, inputs, params)?;
    Ok(exec.value(loss).data()[0])
}

/// Compares backward-pass gradients of `trainable` against central
/// differences with step `h`.
pub fn grad_check(
    graph: &ComputeGraph,
    inputs: &dyn TensorSource<f64>,
    params: &BTreeMap<String, Tensor<f64>>,
    trainable: &[&str],
    loss: NodeId,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let total: usize = trainable.iter().map(|n| params.get(*n).map_or(0, |t| t.len())).sum();
    if total > MAX_CHECKED_SCALARS {
        return Err(Error::Config(format!(
            "gradient check limited to {MAX_CHECKED_SCALARS} scalars, asked for {total}"
        )));
    }
    let exec = forward(graph, inputs, params)?;
    let grads = backward(graph, &exec, loss, &|n| trainable.contains(&n))?;

    let mut report = GradCheckReport {
        params: Vec::new(),
        tolerance,
    };
    let mut work = params.clone();
    for &name in trainable {
        let base = params.get(name).ok_or_else(|| Error::Missing {
            what: "parameter",
            name: name.to_owned(),
        })?;
        let analytic = grads.get(name).cloned().unwrap_or_else(|| Tensor::zeros(base.dims()));
        let mut check = ParamCheck {
            name: name.to_owned(),
            scalars: base.len(),
            max_rel_error: 0.0,
            worst_index: 0,
        };
        for i in 0..base.len() {
            let mut probe = |delta: f64| -> Result<f64> {
                let mut data = base.data().to_vec();
                data[i] += delta;
                work.insert(name.to_owned(), Tensor::new(base.dims().to_vec(), data)?);
                loss_at(graph, inputs, &work, loss)
            };
            let plus = probe(h)?;
            let minus = probe(-h)?;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic.data()[i], numeric);
            if err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = i;
            }
        }
        work.insert(name.to_owned(), base.clone());
        report.params.push(check);
    }
    Ok(report)
}
