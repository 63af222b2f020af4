use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};

use super::graph::{ComputeGraph, NodeId, NodeKind};
use super::tensor::{Scalar, Tensor};

/// Named tensor lookup used for both graph inputs and parameters.
pub trait TensorSource<T: Scalar> {
    fn tensor(&self, name: &str) -> Option<&Tensor<T>>;
}

impl<T: Scalar> TensorSource<T> for BTreeMap<String, Tensor<T>> {
    fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.get(name)
    }
}

impl<T: Scalar> TensorSource<T> for HashMap<String, Tensor<T>> {
    fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.get(name)
    }
}

impl<T: Scalar> TensorSource<T> for [(&str, Tensor<T>)] {
    fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }
}

impl<T: Scalar, const N: usize> TensorSource<T> for [(&str, Tensor<T>); N] {
    fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.as_slice().tensor(name)
    }
}

/// Looks names up in `first`, then in `second`.
pub struct Layered<'a, T: Scalar> {
    pub first: &'a dyn TensorSource<T>,
    pub second: &'a dyn TensorSource<T>,
}

impl<'a, T: Scalar> TensorSource<T> for Layered<'a, T> {
    fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.first.tensor(name).or_else(|| self.second.tensor(name))
    }
}

/// Values computed by one forward pass.
pub struct Execution<T: Scalar> {
    values: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Execution<T> {
    /// Value of a node; `None` only when a lean pass already released it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.values[id.0].as_ref()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        self.values[id.0]
            .as_ref()
            .expect("value was released by a lean forward pass")
    }

    pub fn output(&self, graph: &ComputeGraph, name: &str) -> Option<&Tensor<T>> {
        graph.output(name).and_then(|id| self.get(id))
    }
}

fn bind<T: Scalar>(
    graph: &ComputeGraph,
    id: usize,
    what: &'static str,
    name: &str,
    source: &dyn TensorSource<T>,
) -> Result<Tensor<T>> {
    let t = source.tensor(name).ok_or_else(|| Error::Missing {
        what,
        name: name.to_owned(),
    })?;
    let want = &graph.nodes()[id].dims;
    if t.dims() != want.as_slice() {
        return Err(Error::shape(name, format!("expected {want:?}, got {:?}", t.dims())));
    }
    Ok(t.clone())
}

fn run<T: Scalar>(
    graph: &ComputeGraph,
    inputs: &dyn TensorSource<T>,
    params: &dyn TensorSource<T>,
    lean: bool,
) -> Result<Execution<T>> {
    let nodes = graph.nodes();
    let last_use = if lean { graph.last_use() } else { Vec::new() };
    let keep: Vec<bool> = if lean {
        let mut k = vec![false; nodes.len()];
        for id in graph.outputs().values() {
            k[id.0] = true;
        }
        k
    } else {
        Vec::new()
    };
    let mut values: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
    for (i, node) in nodes.iter().enumerate() {
        let v = match &node.kind {
            NodeKind::Input { name } => bind(graph, i, "input", name, inputs)?,
            NodeKind::Param { name } => bind(graph, i, "parameter", name, params)?,
            NodeKind::Op { kind, inputs } => {
                let args: Vec<&Tensor<T>> = inputs
                    .iter()
                    .map(|j| values[j.0].as_ref().expect("topological order"))
                    .collect();
                let out = kind.forward(&args, &node.dims);
                if !out.is_finite() {
                    return Err(Error::NonFinite {
                        node: node.name.clone(),
                    });
                }
                if lean {
                    for j in inputs {
                        if last_use[j.0] == Some(i) && !keep[j.0] {
                            values[j.0] = None;
                        }
                    }
                }
                out
            }
        };
        values[i] = Some(v);
    }
    Ok(Execution { values })
}

/// Evaluates every node in stored order, keeping all values for backward.
pub fn forward<T: Scalar>(
    graph: &ComputeGraph,
    inputs: &dyn TensorSource<T>,
    params: &dyn TensorSource<T>,
) -> Result<Execution<T>> {
    run(graph, inputs, params, false)
}

/// Like [`forward`] but releases each intermediate after its last use.
/// Only marked outputs are guaranteed to be present afterwards.
pub fn forward_lean<T: Scalar>(
    graph: &ComputeGraph,
    inputs: &dyn TensorSource<T>,
    params: &dyn TensorSource<T>,
) -> Result<Execution<T>> {
    run(graph, inputs, params, true)
}

/// Parameter gradients from one backward pass.
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    pub params: BTreeMap<String, Tensor<T>>,
    /// Every node that was given a gradient buffer, in the order allocated.
    pub allocated: Vec<NodeId>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn has_buffer(&self, id: NodeId) -> bool {
        self.allocated.contains(&id)
    }
}

/// Reverse-mode sweep from a scalar `loss` node.
///
/// Gradient buffers are created only for nodes through which some parameter
/// selected by `trainable` influences the loss. Inputs are constants.
pub fn backward<T: Scalar>(
    graph: &ComputeGraph,
    exec: &Execution<T>,
    loss: NodeId,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<Gradients<T>> {
    let nodes = graph.nodes();
    let loss_node = &nodes[loss.0];
    if loss_node.dims != [1] {
        return Err(Error::shape(
            &loss_node.name,
            format!("loss must be a scalar, got {:?}", loss_node.dims),
        ));
    }
    let req = graph.requires_grad(trainable);
    let mut out = Gradients {
        params: BTreeMap::new(),
        allocated: Vec::new(),
    };
    if !req[loss.0] {
        return Ok(out);
    }
    let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
    grads[loss.0] = Some(Tensor::scalar(T::one()));
    out.allocated.push(loss);
    for i in (0..=loss.0).rev() {
        let Some(g) = grads[i].take() else { continue };
        match &nodes[i].kind {
            NodeKind::Input { .. } => unreachable!("inputs never require grad"),
            NodeKind::Param { name } => {
                let entry = out.params.entry(name.clone());
                match entry {
                    std::collections::btree_map::Entry::Vacant(v) => {
                        v.insert(g);
                    }
                    std::collections::btree_map::Entry::Occupied(mut o) => {
                        let sum = o.get().add(&g)?;
                        o.insert(sum);
                    }
                }
            }
            NodeKind::Op { kind, inputs } => {
                let need: Vec<bool> = inputs.iter().map(|j| req[j.0]).collect();
                if !need.iter().any(|&b| b) {
                    continue;
                }
                let args: Vec<&Tensor<T>> = inputs
                    .iter()
                    .map(|j| {
                        exec.get(*j).ok_or_else(|| {
                            Error::Numerical(format!("value of `{}` was not retained for backward", nodes[j.0].name))
                        })
                    })
                    .collect::<Result<_>>()?;
                let y = exec
                    .get(NodeId(i))
                    .ok_or_else(|| Error::Numerical(format!("value of `{}` was not retained", nodes[i].name)))?;
                let input_grads = kind.backward(&args, y, &g, &need);
                for ((j, gi), n) in inputs.iter().zip(input_grads).zip(&need) {
                    if !n {
                        continue;
                    }
                    let gi =
                        gi.ok_or_else(|| Error::Numerical(format!("op `{}` produced no gradient", nodes[i].name)))?;
                    if !gi.is_finite() {
                        return Err(Error::NonFinite {
                            node: format!("{} (backward)", nodes[i].name),
                        });
                    }
                    grads[j.0] = Some(match grads[j.0].take() {
                        Some(prev) => prev.add(&gi)?,
                        None => {
                            out.allocated.push(*j);
                            gi
                        }
                    });
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::OpKind;

    #[test]
    fn mse_of_param_against_zero() {
        let mut g = ComputeGraph::new();
        let x = g.param("x", &[1]);
        let z = g.input("zero", &[1]);
        let l = g.op("loss", OpKind::MseReduce, &[x, z]).unwrap();
        let params: BTreeMap<String, Tensor<f64>> = [("x".to_string(), Tensor::scalar(3.0))].into_iter().collect();
        let inputs = [("zero", Tensor::scalar(0.0))];
        let exec = forward(&g, &inputs, &params).unwrap();
        assert_eq!(exec.value(l).data(), &[9.0]);
        let grads = backward(&g, &exec, l, &|_| true).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[6.0]);

        let frozen = backward(&g, &exec, l, &|_| false).unwrap();
        assert!(frozen.is_empty());
        assert!(frozen.allocated.is_empty());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = ComputeGraph::new();
        let x = g.param("x", &[2]);
        let params: BTreeMap<String, Tensor<f64>> = [("x".to_string(), Tensor::zeros(&[2]))].into_iter().collect();
        let exec = forward(&g, &BTreeMap::new(), &params).unwrap();
        assert!(backward(&g, &exec, x, &|_| true).is_err());
    }

    #[test]
    fn missing_and_misshapen_bindings() {
        let mut g = ComputeGraph::new();
        g.input("x", &[2]);
        let empty: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        assert!(matches!(forward(&g, &empty, &empty), Err(Error::Missing { .. })));
        let bad = [("x", Tensor::<f32>::zeros(&[3]))];
        assert!(matches!(forward(&g, &bad, &empty), Err(Error::Shape { .. })));
    }

    #[test]
    fn non_finite_names_the_node() {
        let mut g = ComputeGraph::new();
        let x = g.input("x", &[1]);
        g.op("blowup", OpKind::Scale(f64::INFINITY), &[x]).unwrap();
        let inputs = [("x", Tensor::<f32>::scalar(1.0))];
        let err = forward(&g, &inputs, &BTreeMap::new()).err().unwrap();
        assert!(matches!(err, Error::NonFinite { ref node } if node == "blowup"));
    }

    #[test]
    fn lean_pass_keeps_outputs_only() {
        let mut g = ComputeGraph::new();
        let x = g.input("x", &[2]);
        let a = g.op("a", OpKind::Scale(2.0), &[x]).unwrap();
        let b = g.op("b", OpKind::Silu, &[a]).unwrap();
        g.mark_output("b", b);
        let inputs = [("x", Tensor::<f32>::new(vec![2], vec![1.0, -1.0]).unwrap())];
        let full = forward(&g, &inputs, &BTreeMap::new()).unwrap();
        let lean = forward_lean(&g, &inputs, &BTreeMap::new()).unwrap();
        assert!(lean.get(a).is_none());
        assert!(lean.value(b).bit_eq(full.value(b)));
    }
}
