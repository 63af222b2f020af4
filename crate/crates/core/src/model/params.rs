use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hash::{name_seed, TensorHasher};
use crate::numerics::{Scalar, Tensor, TensorSource};

use super::blocks::BlockGraph;

/// Named base weights of a U-Net.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    merged: bool,
}

fn is_norm(name: &str) -> bool {
    let parts: Vec<&str> = name.rsplitn(3, '.').collect();
    parts
        .get(1)
        .is_some_and(|p| p.starts_with("norm") || p.starts_with("ln"))
}

impl ParamStore {
    /// Seeded initialization. Weights are uniform in ±1/√fan_in, biases zero,
    /// norm scales one. Each tensor has its own stream, keyed by name.
    pub fn init(graph: &BlockGraph, seed: u64) -> Self {
        let mut tensors = BTreeMap::new();
        for (_, spec) in graph.param_specs() {
            let name = &spec.name;
            let t = if is_norm(name) {
                let v = if name.ends_with(".weight") { 1.0 } else { 0.0 };
                Tensor::full(&spec.dims, v)
            } else if spec.dims.len() == 1 {
                Tensor::zeros(&spec.dims)
            } else {
                let fan_in: usize = spec.dims[1..].iter().product();
                let bound = 1.0 / (fan_in as f32).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, name));
                Tensor::from_fn(&spec.dims, |_| rng.gen_range(-bound..bound))
            };
            tensors.insert(name.clone(), t);
        }
        Self { tensors, merged: false }
    }

    /// Every tensor filled with `v`.
    pub fn constant(graph: &BlockGraph, v: f32) -> Self {
        Self {
            tensors: graph
                .param_specs()
                .map(|(_, s)| (s.name.clone(), Tensor::full(&s.dims, v)))
                .collect(),
            merged: false,
        }
    }

    /// Adopts loaded tensors after checking names and shapes against the network.
    pub fn from_map(graph: &BlockGraph, mut map: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for (_, spec) in graph.param_specs() {
            let t = map.remove(&spec.name).ok_or_else(|| Error::Missing {
                what: "parameter",
                name: spec.name.clone(),
            })?;
            if t.dims() != spec.dims.as_slice() {
                return Err(Error::Mismatch(format!(
                    "`{}` has shape {:?}, network expects {:?}",
                    spec.name,
                    t.dims(),
                    spec.dims
                )));
            }
            tensors.insert(spec.name.clone(), t);
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::Mismatch(format!("unexpected tensor `{extra}`")));
        }
        Ok(Self { tensors, merged: false })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Replaces an existing tensor of the same shape.
    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self.tensors.get_mut(name).ok_or_else(|| Error::Missing {
            what: "parameter",
            name: name.to_owned(),
        })?;
        if slot.dims() != t.dims() {
            return Err(Error::shape(name, format!("{:?} vs {:?}", t.dims(), slot.dims())));
        }
        *slot = t;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn nbytes(&self) -> usize {
        self.tensors.values().map(Tensor::nbytes).sum()
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub(crate) fn mark_merged(&mut self) {
        self.merged = true;
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    /// Digest over names, shapes and payload bits.
    pub fn checksum(&self) -> u64 {
        let mut h = TensorHasher::new();
        for (n, t) in &self.tensors {
            h.text(n).tensor(t);
        }
        h.finish()
    }

    /// Converted copy, e.g. for 64-bit gradient checks.
    pub fn cast<T: Scalar>(&self) -> BTreeMap<String, Tensor<T>> {
        self.tensors.iter().map(|(n, t)| (n.clone(), t.cast())).collect()
    }
}

impl TensorSource<f32> for ParamStore {
    fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchConfig;

    #[test]
    fn init_is_seeded_and_complete() {
        let g = BlockGraph::new(&ArchConfig::toy16()).unwrap();
        let a = ParamStore::init(&g, 3);
        assert_eq!(a.num_params(), g.total_params());
        assert_eq!(a.checksum(), ParamStore::init(&g, 3).checksum());
        assert_ne!(a.checksum(), ParamStore::init(&g, 4).checksum());
        assert!(a.get("1-1.res.norm1.weight").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(a.get("1-1.attn.ln2.bias").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(a.get("1-1.res.conv1.weight").unwrap().max_abs() > 0.0);
    }

    #[test]
    fn from_map_checks_shapes() {
        let g = BlockGraph::new(&ArchConfig::toy16()).unwrap();
        let mut m = ParamStore::init(&g, 0).into_map();
        assert!(ParamStore::from_map(&g, m.clone()).is_ok());
        m.insert("conv_in.bias".into(), Tensor::zeros(&[3]));
        assert!(ParamStore::from_map(&g, m.clone()).is_err());
        m.remove("conv_in.bias");
        assert!(ParamStore::from_map(&g, m).is_err());
    }
}
