//! Static computation graphs.
//!
//! A [`ComputeGraph`] is built once, with every op validated against its
//! shape function at insertion time, and then executed any number of times
//! by [`forward`](super::forward) and [`backward`](super::backward).

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::ops::OpKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }

    pub fn from_index(i: usize) -> Self {
        NodeId(i)
    }
}

#[derive(Clone, Debug)]
pub enum NodeKind {
    /// Externally supplied data. Inputs never receive gradients.
    Input {
        name: String,
    },
    /// Named parameter looked up in a parameter source at execution time.
    Param {
        name: String,
    },
    Op {
        kind: OpKind,
        inputs: Vec<NodeId>,
    },
}

#[derive(Clone, Debug)]
pub struct Node {
    pub kind: NodeKind,
    pub dims: Vec<usize>,
    /// Human readable name, used in error messages.
    pub name: String,
    /// Owning sub-block label, if the builder assigned one.
    pub block: Option<String>,
}

#[derive(Clone, Debug, Default)]
pub struct ComputeGraph {
    nodes: Vec<Node>,
    outputs: BTreeMap<String, NodeId>,
    block: Option<String>,
}

impl ComputeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Subsequent nodes are attributed to `block` (or to no block).
    pub fn set_block(&mut self, block: Option<&str>) {
        self.block = block.map(str::to_owned);
    }

    fn push(&mut self, kind: NodeKind, dims: Vec<usize>, name: String) -> NodeId {
        self.nodes.push(Node {
            kind,
            dims,
            name,
            block: self.block.clone(),
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, name: &str, dims: &[usize]) -> NodeId {
        self.push(
            NodeKind::Input { name: name.to_owned() },
            dims.to_vec(),
            name.to_owned(),
        )
    }

    pub fn param(&mut self, name: &str, dims: &[usize]) -> NodeId {
        self.push(
            NodeKind::Param { name: name.to_owned() },
            dims.to_vec(),
            name.to_owned(),
        )
    }

    /// Appends an op node after checking its input shapes.
    pub fn op(&mut self, name: &str, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        if let Some(bad) = inputs.iter().find(|i| i.0 >= self.nodes.len()) {
            return Err(Error::shape(name, format!("unknown input node {}", bad.0)));
        }
        let dims: Vec<&[usize]> = inputs.iter().map(|i| self.nodes[i.0].dims.as_slice()).collect();
        let out = kind.infer_shape(&dims).map_err(|msg| Error::shape(name, msg))?;
        Ok(self.push(
            NodeKind::Op {
                kind,
                inputs: inputs.to_vec(),
            },
            out,
            name.to_owned(),
        ))
    }

    pub fn mark_output(&mut self, name: &str, node: NodeId) {
        self.outputs.insert(name.to_owned(), node);
    }

    pub fn output(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    pub fn outputs(&self) -> &BTreeMap<String, NodeId> {
        &self.outputs
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dims(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].dims
    }

    /// Names of all parameter nodes, in insertion order.
    pub fn param_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.kind {
                NodeKind::Param { name } => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    pub fn input_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.kind {
                NodeKind::Input { name } => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    /// For every node, whether a gradient flows into it from some parameter
    /// in `trainable`.
    pub fn requires_grad(&self, trainable: &dyn Fn(&str) -> bool) -> Vec<bool> {
        let mut req = vec![false; self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            req[i] = match &n.kind {
                NodeKind::Input { .. } => false,
                NodeKind::Param { name } => trainable(name),
                NodeKind::Op { inputs, .. } => inputs.iter().any(|j| req[j.0]),
            };
        }
        req
    }

    /// Index of the last op that reads each node, `None` if unused.
    pub fn last_use(&self) -> Vec<Option<usize>> {
        let mut last = vec![None; self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            if let NodeKind::Op { inputs, .. } = &n.kind {
                for j in inputs {
                    last[j.0] = Some(i);
                }
            }
        }
        last
    }

    /// Forward FLOPs of a single node (zero for inputs and params).
    pub fn node_flops(&self, id: NodeId) -> u64 {
        let n = &self.nodes[id.0];
        match &n.kind {
            NodeKind::Op { kind, inputs } => {
                let ins: Vec<&[usize]> = inputs.iter().map(|j| self.nodes[j.0].dims.as_slice()).collect();
                kind.flops(&ins, &n.dims)
            }
            _ => 0,
        }
    }

    /// Total forward FLOPs of the nodes matching `filter`.
    pub fn flops_where(&self, filter: impl Fn(usize, &Node) -> bool) -> u64 {
        (0..self.nodes.len())
            .filter(|&i| filter(i, &self.nodes[i]))
            .map(|i| self.node_flops(NodeId(i)))
            .sum()
    }

    pub fn flops(&self) -> u64 {
        self.flops_where(|_, _| true)
    }

    /// Forward FLOPs attributed to each sub-block label (unattributed nodes
    /// under the empty label).
    pub fn flops_by_block(&self) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            *out.entry(n.block.clone().unwrap_or_default()).or_insert(0) += self.node_flops(NodeId(i));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_mismatch_names_the_node() {
        let mut g = ComputeGraph::new();
        let x = g.input("x", &[1, 3]);
        let w = g.param("w", &[2, 2]);
        let err = g.op("proj", OpKind::Linear, &[x, w]).unwrap_err();
        assert!(err.to_string().contains("proj"), "{err}");
    }

    #[test]
    fn requires_grad_follows_trainable_params() {
        let mut g = ComputeGraph::new();
        let x = g.input("x", &[1, 2]);
        let w = g.param("w", &[2, 2]);
        let v = g.param("v", &[2, 2]);
        let a = g.op("a", OpKind::Linear, &[x, w]).unwrap();
        let b = g.op("b", OpKind::Linear, &[a, v]).unwrap();
        let req = g.requires_grad(&|n| n == "v");
        assert!(!req[x.0] && !req[w.0] && !req[a.0]);
        assert!(req[v.0] && req[b.0]);
    }
}
