//! Low-rank adapters on attention projections.
//!
//! An adapter on a projection `W: [d_out, d_in]` holds `A: [d_out, r]` and
//! `B: [r, d_in]` and contributes `s·A·B`. In graphs the adapted projection is
//! evaluated as `W x + s·A(B x)` without forming the dense product.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::hash::name_seed;
use crate::hollow::HollowPlan;
use crate::model::{BlockGraph, ParamStore};
use crate::numerics::{gemm_nn, Tensor, TensorSource};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Fresh,
    TrainedOnHollowed,
    /// Trained directly on the full network (plain LoRA fine-tuning).
    TrainedOnFull,
    Transferred,
}

impl Provenance {
    pub fn code(self) -> u8 {
        match self {
            Provenance::Fresh => 0,
            Provenance::TrainedOnHollowed => 1,
            Provenance::TrainedOnFull => 2,
            Provenance::Transferred => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => Provenance::Fresh,
            1 => Provenance::TrainedOnHollowed,
            2 => Provenance::TrainedOnFull,
            3 => Provenance::Transferred,
            _ => return None,
        })
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Fresh => "fresh",
            Provenance::TrainedOnHollowed => "trained-on-hollowed",
            Provenance::TrainedOnFull => "trained-on-full",
            Provenance::Transferred => "transferred",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub target: String,
    /// `[d_out, r]`
    pub a: Tensor,
    /// `[r, d_in]`
    pub b: Tensor,
    pub rank: usize,
    pub scaling: f32,
}

impl LoraAdapter {
    pub fn new(target: &str, a: Tensor, b: Tensor, scaling: f32) -> Result<Self> {
        let (ad, bd) = (a.dims(), b.dims());
        if ad.len() != 2 || bd.len() != 2 || ad[1] != bd[0] {
            return Err(Error::Adapter(format!(
                "{target}: factors {ad:?} and {bd:?} do not compose"
            )));
        }
        Ok(Self {
            target: target.to_owned(),
            rank: ad[1],
            a,
            b,
            scaling,
        })
    }

    pub fn d_out(&self) -> usize {
        self.a.dims()[0]
    }

    pub fn d_in(&self) -> usize {
        self.b.dims()[1]
    }

    pub fn num_params(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// Dense `s·A·B`.
    pub fn delta(&self) -> Tensor {
        let (m, r, n) = (self.d_out(), self.rank, self.d_in());
        let mut out = vec![0.0f32; m * n];
        gemm_nn(self.a.data(), self.b.data(), &mut out, m, r, n);
        if self.scaling != 1.0 {
            out.iter_mut().for_each(|v| *v *= self.scaling);
        }
        Tensor::new(vec![m, n], out).expect("factor dims")
    }

    pub fn a_name(&self) -> String {
        format!("{}.lora_a", self.target)
    }

    pub fn b_name(&self) -> String {
        format!("{}.lora_b", self.target)
    }
}

/// `W + s·A·B`.
pub fn effective_weight(w: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    if w.dims() != [adapter.d_out(), adapter.d_in()] {
        return Err(Error::shape(
            adapter.target.clone(),
            format!(
                "weight {:?} vs adapter {}x{}",
                w.dims(),
                adapter.d_out(),
                adapter.d_in()
            ),
        ));
    }
    w.add(&adapter.delta())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapterSet {
    pub adapters: BTreeMap<String, LoraAdapter>,
    pub provenance: Provenance,
}

impl LoraAdapterSet {
    pub fn empty(provenance: Provenance) -> Self {
        Self {
            adapters: BTreeMap::new(),
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn get(&self, target: &str) -> Option<&LoraAdapter> {
        self.adapters.get(target)
    }

    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.adapters.keys().map(String::as_str)
    }

    pub fn num_params(&self) -> usize {
        self.adapters.values().map(LoraAdapter::num_params).sum()
    }

    /// Names of every factor tensor, as they appear in compute graphs.
    pub fn param_names(&self) -> Vec<String> {
        self.adapters.values().flat_map(|a| [a.a_name(), a.b_name()]).collect()
    }

    /// Factor tensors keyed by graph parameter name.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.adapters
            .values()
            .flat_map(|a| [(a.a_name(), a.a.clone()), (a.b_name(), a.b.clone())])
            .collect()
    }

    /// Replaces factor values from a map keyed like [`tensors`](Self::tensors).
    pub fn set_tensors(&mut self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for a in self.adapters.values_mut() {
            let (an, bn) = (a.a_name(), a.b_name());
            for (name, slot) in [(an, &mut a.a), (bn, &mut a.b)] {
                if let Some(v) = values.get(&name) {
                    if v.dims() != slot.dims() {
                        return Err(Error::shape(name, format!("{:?} vs {:?}", v.dims(), slot.dims())));
                    }
                    *slot = v.clone();
                }
            }
        }
        Ok(())
    }

    /// Checks every target against the host network.
    pub fn check_against(&self, graph: &BlockGraph) -> Result<()> {
        let known: BTreeMap<_, _> = graph
            .attn_projections()
            .into_iter()
            .map(|p| (p.id.clone(), p))
            .collect();
        for (t, a) in &self.adapters {
            let p = known
                .get(t)
                .ok_or_else(|| Error::Adapter(format!("`{t}` is not an attention projection of the network")))?;
            if (p.d_out, p.d_in) != (a.d_out(), a.d_in()) {
                return Err(Error::Adapter(format!(
                    "`{t}` expects {}x{}, adapter is {}x{}",
                    p.d_out,
                    p.d_in,
                    a.d_out(),
                    a.d_in()
                )));
            }
        }
        Ok(())
    }
}

impl TensorSource<f32> for LoraAdapterSet {
    fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        if let Some(t) = name.strip_suffix(".lora_a") {
            self.adapters.get(t).map(|a| &a.a)
        } else if let Some(t) = name.strip_suffix(".lora_b") {
            self.adapters.get(t).map(|a| &a.b)
        } else {
            None
        }
    }
}

/// Fresh adapters on every attention projection, or only on those a plan retains.
///
/// Each target draws `A` from its own stream, so a restricted set agrees with
/// the unrestricted one on shared targets.
pub fn init_adapters(
    graph: &BlockGraph,
    restrict: Option<&HollowPlan>,
    rank: usize,
    seed: u64,
) -> Result<LoraAdapterSet> {
    if rank == 0 {
        return Err(Error::Adapter("rank must be at least 1".into()));
    }
    let normal = Normal::new(0.0f64, INIT_STD).expect("valid std");
    let mut set = LoraAdapterSet::empty(Provenance::Fresh);
    for p in graph.attn_projections() {
        if restrict.is_some_and(|plan| plan.removes(&p.block)) {
            continue;
        }
        if rank > p.d_in.min(p.d_out) {
            return Err(Error::Adapter(format!(
                "rank {rank} exceeds min({}, {}) for `{}`",
                p.d_out, p.d_in, p.id
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &p.id));
        let a = Tensor::from_fn(&[p.d_out, rank], |_| normal.sample(&mut rng) as f32);
        let b = Tensor::zeros(&[rank, p.d_in]);
        set.adapters.insert(p.id.clone(), LoraAdapter::new(&p.id, a, b, 1.0)?);
    }
    Ok(set)
}

/// Σ r·(d_in + d_out) over the projections a plan retains.
pub fn adapter_param_count(graph: &BlockGraph, restrict: Option<&HollowPlan>, rank: usize) -> usize {
    graph
        .attn_projections()
        .iter()
        .filter(|p| !restrict.is_some_and(|plan| plan.removes(&p.block)))
        .map(|p| rank * (p.d_in + p.d_out))
        .sum()
}

fn check_outside(set: &LoraAdapterSet, graph: &BlockGraph, plan: &HollowPlan) -> Result<()> {
    set.check_against(graph)?;
    for t in set.targets() {
        let block = graph.owner_of(t).unwrap_or_default();
        if plan.removes(block) {
            return Err(Error::Adapter(format!(
                "`{t}` lies in the removed region {}",
                plan.label_list()
            )));
        }
    }
    Ok(())
}

/// Moves a set trained on the hollowed network onto the full network.
///
/// Values are copied unchanged; only the provenance changes.
pub fn transfer_adapters(set: &LoraAdapterSet, graph: &BlockGraph, plan: &HollowPlan) -> Result<LoraAdapterSet> {
    if set.provenance == Provenance::Transferred {
        return Err(Error::Adapter("adapter set is already transferred".into()));
    }
    if set.provenance == Provenance::TrainedOnFull {
        return Err(Error::Adapter(
            "adapters trained on the full network need no transfer".into(),
        ));
    }
    check_outside(set, graph, plan)?;
    Ok(LoraAdapterSet {
        adapters: set.adapters.clone(),
        provenance: Provenance::Transferred,
    })
}

/// Inverse of [`transfer_adapters`].
pub fn transfer_back(set: &LoraAdapterSet, graph: &BlockGraph, plan: &HollowPlan) -> Result<LoraAdapterSet> {
    if set.provenance != Provenance::Transferred {
        return Err(Error::Adapter(format!(
            "expected a transferred set, got {}",
            set.provenance
        )));
    }
    check_outside(set, graph, plan)?;
    Ok(LoraAdapterSet {
        adapters: set.adapters.clone(),
        provenance: Provenance::TrainedOnHollowed,
    })
}

/// Bakes `s·A·B` into the base weights.
pub fn merge_adapters(params: &ParamStore, set: &LoraAdapterSet) -> Result<ParamStore> {
    if params.is_merged() {
        return Err(Error::Adapter("weights already carry merged adapters".into()));
    }
    let mut out = params.clone();
    for a in set.adapters.values() {
        let name = format!("{}.weight", a.target);
        let w = params.get(&name).ok_or_else(|| Error::Missing {
            what: "parameter",
            name: name.clone(),
        })?;
        out.insert(&name, effective_weight(w, a)?)?;
    }
    out.mark_merged();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hollow::make_plan_from_labels;
    use crate::model::ArchConfig;

    fn t(dims: &[usize], v: &[f32]) -> Tensor {
        Tensor::new(dims.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn zero_b_leaves_weight() {
        let w = Tensor::from_fn(&[3, 4], |i| i as f32 * 0.5);
        let a = LoraAdapter::new("x", Tensor::full(&[3, 2], 0.7), Tensor::zeros(&[2, 4]), 1.0).unwrap();
        assert!(effective_weight(&w, &a).unwrap().bit_eq(&w));
    }

    #[test]
    fn two_by_two_example() {
        let w = Tensor::zeros(&[2, 2]);
        let a = LoraAdapter::new("x", t(&[2, 1], &[1.0, 0.0]), t(&[1, 2], &[0.0, 1.0]), 1.0).unwrap();
        let out = effective_weight(&w, &a).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn dense_product_matches() {
        let a = Tensor::from_fn(&[8, 2], |i| ((i * 37) % 11) as f32 / 7.0 - 0.6);
        let b = Tensor::from_fn(&[2, 8], |i| ((i * 13) % 5) as f32 / 3.0 - 0.4);
        let ad = LoraAdapter::new("x", a.clone(), b.clone(), 1.0).unwrap();
        let w = Tensor::from_fn(&[8, 8], |i| i as f32 * 0.01);
        let out = effective_weight(&w, &ad).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let want = w.data()[i * 8 + j] + (0..2).map(|p| a.data()[i * 2 + p] * b.data()[p * 8 + j]).sum::<f32>();
                assert!((out.data()[i * 8 + j] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = LoraAdapter::new("x", Tensor::zeros(&[3, 1]), Tensor::zeros(&[1, 3]), 1.0).unwrap();
        assert!(effective_weight(&Tensor::zeros(&[3, 4]), &a).is_err());
        assert!(LoraAdapter::new("x", Tensor::zeros(&[3, 2]), Tensor::zeros(&[1, 3]), 1.0).is_err());
    }

    #[test]
    fn restricted_set_skips_removed_blocks() {
        let g = BlockGraph::new(&ArchConfig::toy16()).unwrap();
        let plan = make_plan_from_labels(&g, &["2-2", "3-1", "3-2", "4-1"]).unwrap();
        let full = init_adapters(&g, None, 2, 5).unwrap();
        let part = init_adapters(&g, Some(&plan), 2, 5).unwrap();
        assert!(part.targets().all(|t| !plan.removes(g.owner_of(t).unwrap())));
        assert!(part.len() < full.len());
        for (k, v) in &part.adapters {
            assert_eq!(v, &full.adapters[k]);
        }
        assert_eq!(part.num_params(), adapter_param_count(&g, Some(&plan), 2));
    }

    #[test]
    fn transfer_round_trip_and_negative_control() {
        let g = BlockGraph::new(&ArchConfig::toy16()).unwrap();
        let plan = make_plan_from_labels(&g, &["3-1", "3-2"]).unwrap();
        let mut set = init_adapters(&g, Some(&plan), 1, 9).unwrap();
        set.provenance = Provenance::TrainedOnHollowed;
        let moved = transfer_adapters(&set, &g, &plan).unwrap();
        assert_eq!(moved.provenance, Provenance::Transferred);
        assert_eq!(transfer_back(&moved, &g, &plan).unwrap(), set);

        let full = init_adapters(&g, None, 1, 9).unwrap();
        assert!(transfer_adapters(&full, &g, &plan).is_err());
    }

    #[test]
    fn rank_too_large() {
        let g = BlockGraph::new(&ArchConfig::toy16()).unwrap();
        assert!(init_adapters(&g, None, 17, 0).is_err());
        assert!(init_adapters(&g, None, 0, 0).is_err());
    }
}
