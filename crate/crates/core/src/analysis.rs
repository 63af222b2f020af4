//! Weight-change analysis, analytic cost models and the pixel fidelity proxy.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::hollow::{count_params, validate_plan, HollowPlan};
use crate::lora::{adapter_param_count, LoraAdapter, LoraAdapterSet, Provenance};
use crate::model::{build_unet_graph, BlockGraph, ParamStore, Route, TIME_EMBED};
use crate::numerics::{ComputeGraph, NodeKind, Tensor};
use crate::trainer::TrainMode;

const F32: usize = 4;

/// What a weight-change report compares.
#[derive(Clone, Copy)]
pub enum WeightSet<'a> {
    /// Effective deltas `s·A·B`.
    Adapters(&'a LoraAdapterSet),
    Weights(&'a ParamStore),
}

/// Mean `|w − w'|` per element for each block, `None` where nothing was adapted.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockDeltaReport {
    pub blocks: Vec<(String, Option<f64>)>,
}

impl BlockDeltaReport {
    pub fn get(&self, label: &str) -> Option<f64> {
        self.blocks.iter().find(|(l, _)| l == label).and_then(|(_, v)| *v)
    }
}

fn block_labels(graph: &BlockGraph) -> Vec<String> {
    std::iter::once(TIME_EMBED.to_string())
        .chain(graph.labels().map(str::to_string))
        .collect()
}

pub fn block_weight_delta(before: WeightSet<'_>, after: WeightSet<'_>, graph: &BlockGraph) -> Result<BlockDeltaReport> {
    // per block: (sum of |Δ|, element count)
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut add = |name: &str, x: &Tensor, y: &Tensor| -> Result<()> {
        if x.dims() != y.dims() {
            return Err(Error::Mismatch(format!(
                "`{name}` has shapes {:?} and {:?}",
                x.dims(),
                y.dims()
            )));
        }
        let owner = graph.owner_of(name).ok_or_else(|| Error::Missing {
            what: "layer",
            name: name.to_owned(),
        })?;
        let s: f64 = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum();
        let e = acc.entry(owner.to_owned()).or_insert((0.0, 0));
        e.0 += s;
        e.1 += x.len();
        Ok(())
    };
    match (before, after) {
        (WeightSet::Adapters(a), WeightSet::Adapters(b)) => {
            let ka: Vec<&str> = a.targets().collect();
            let kb: Vec<&str> = b.targets().collect();
            if ka != kb {
                return Err(Error::Mismatch("adapter sets cover different layers".into()));
            }
            for t in ka {
                let (x, y) = (a.get(t).expect("listed"), b.get(t).expect("listed"));
                add(t, &x.delta(), &y.delta())?;
            }
        }
        (WeightSet::Weights(a), WeightSet::Weights(b)) => {
            if a.len() != b.len() || a.iter().zip(b.iter()).any(|((m, _), (n, _))| m != n) {
                return Err(Error::Mismatch("weight sets cover different parameters".into()));
            }
            for ((name, x), (_, y)) in a.iter().zip(b.iter()) {
                add(name, x, y)?;
            }
        }
        _ => return Err(Error::Mismatch("cannot compare adapters with dense weights".into())),
    }
    let blocks = block_labels(graph)
        .into_iter()
        .map(|l| {
            let v = acc.get(&l).map(|&(s, n)| s / n as f64);
            (l, v)
        })
        .collect();
    Ok(BlockDeltaReport { blocks })
}

/// Per-block mean and standard deviation across subjects.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockDeltaSummary {
    pub rows: Vec<(String, Option<(f64, f64)>)>,
}

pub fn summarize_deltas(reports: &[BlockDeltaReport]) -> Result<BlockDeltaSummary> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Config("no reports to summarize".into()))?;
    let mut rows = Vec::new();
    for (i, (label, _)) in first.blocks.iter().enumerate() {
        let vals: Vec<f64> = reports
            .iter()
            .filter_map(|r| r.blocks.get(i).and_then(|b| b.1))
            .collect();
        if vals.is_empty() {
            rows.push((label.clone(), None));
            continue;
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        rows.push((label.clone(), Some((mean, var.sqrt()))));
    }
    Ok(BlockDeltaSummary { rows })
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.into())
}

/// `block,mean_abs_delta,std`; unadapted blocks are left empty.
pub fn write_block_delta_csv(path: &Path, summary: &BlockDeltaSummary) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["block", "mean_abs_delta", "std"]).map_err(csv_err)?;
    for (label, v) in &summary.rows {
        let (m, s) = match v {
            Some((m, s)) => (format!("{m:e}"), format!("{s:e}")),
            None => (String::new(), String::new()),
        };
        w.write_record([label.as_str(), &m, &s]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Precompute,
    Finetune,
    InferencePlain,
    InferenceTwoPath,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Precompute => "precompute",
            Stage::Finetune => "finetune",
            Stage::InferencePlain => "inference-plain",
            Stage::InferenceTwoPath => "inference-two-path",
        }
    }
}

/// Zero-valued adapters with the right shapes, for counting only.
fn shape_adapters(graph: &BlockGraph, plan: Option<&HollowPlan>, rank: usize) -> Result<LoraAdapterSet> {
    let mut set = LoraAdapterSet::empty(Provenance::Fresh);
    for p in graph.attn_projections() {
        if plan.is_some_and(|pl| pl.removes(&p.block)) {
            continue;
        }
        let a = Tensor::zeros(&[p.d_out, rank]);
        let b = Tensor::zeros(&[rank, p.d_in]);
        set.adapters.insert(p.id.clone(), LoraAdapter::new(&p.id, a, b, 1.0)?);
    }
    Ok(set)
}

fn is_adapter(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b")
}

/// Forward FLOPs plus twice the forward FLOPs of every node a gradient reaches.
fn train_step_flops(g: &ComputeGraph, trainable: &dyn Fn(&str) -> bool) -> u64 {
    let req = g.requires_grad(trainable);
    g.flops() + 2 * g.flops_where(|i, _| req[i])
}

/// Stem and retained down blocks ahead of the cut, run once more by the clean path.
pub fn early_repeat_flops(graph: &BlockGraph, plan: &HollowPlan) -> Result<u64> {
    let g = build_unet_graph(graph, Route::Full, None, 1, &[])?.graph;
    let by_block = g.flops_by_block();
    let mut total = by_block.get(TIME_EMBED).copied().unwrap_or(0);
    for b in &graph.blocks[..plan.start] {
        total += by_block.get(&b.label).copied().unwrap_or(0);
    }
    Ok(total)
}

/// Analytic FLOPs of one step at batch 1.
///
/// With a plan, fine-tuning is the hollowed step and inference uses adapters
/// on retained layers only; without one, adapters cover every projection.
pub fn flops_estimate(graph: &BlockGraph, plan: Option<&HollowPlan>, stage: Stage, rank: usize) -> Result<u64> {
    if let Some(p) = plan {
        validate_plan(graph, p)?;
    }
    let adapters = shape_adapters(graph, plan, rank)?;
    let build = |route, a: Option<&LoraAdapterSet>| build_unet_graph(graph, route, a, 1, &[]).map(|u| u.graph);
    match stage {
        Stage::Precompute => {
            let p = plan.ok_or_else(|| Error::Config("pre-computation needs a hollow plan".into()))?;
            Ok(build(Route::ToTap(p), None)?.flops())
        }
        Stage::Finetune => {
            let route = plan.map_or(Route::Full, Route::Hollowed);
            Ok(train_step_flops(&build(route, Some(&adapters))?, &is_adapter))
        }
        Stage::InferencePlain => Ok(build(Route::Full, Some(&adapters))?.flops()),
        Stage::InferenceTwoPath => match plan {
            Some(p) => Ok(build(Route::ToTap(p), None)?.flops() + build(Route::Hollowed(p), Some(&adapters))?.flops()),
            None => Ok(build(Route::Full, Some(&adapters))?.flops()),
        },
    }
}

/// FLOPs of a full fine-tuning step.
pub fn full_ft_flops(graph: &BlockGraph) -> Result<u64> {
    let g = build_unet_graph(graph, Route::Full, None, 1, &[])?.graph;
    Ok(train_step_flops(&g, &|_| true))
}

fn value_bytes(g: &ComputeGraph) -> Vec<usize> {
    g.nodes()
        .iter()
        .map(|n| match n.kind {
            NodeKind::Param { .. } => 0,
            _ => n.dims.iter().product::<usize>() * F32,
        })
        .collect()
}

/// Every input and intermediate value, as a training step keeps them for backward.
pub fn stored_activation_bytes(g: &ComputeGraph) -> usize {
    value_bytes(g).iter().sum()
}

/// Peak of simultaneously live values when each is freed after its last use.
pub fn peak_live_bytes(g: &ComputeGraph) -> usize {
    let bytes = value_bytes(g);
    let last = g.last_use();
    let outputs: Vec<usize> = g.outputs().values().map(|id| id.index()).collect();
    let mut frees: Vec<Vec<usize>> = vec![Vec::new(); bytes.len()];
    for (i, l) in last.iter().enumerate() {
        if let Some(j) = l {
            if !outputs.contains(&i) {
                frees[*j].push(i);
            }
        }
    }
    let (mut live, mut peak) = (0usize, 0usize);
    for i in 0..bytes.len() {
        live += bytes[i];
        peak = peak.max(live);
        for &k in &frees[i] {
            live -= bytes[k];
        }
    }
    peak
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub mode: TrainMode,
    pub rank: usize,
    pub total_params: usize,
    /// Base parameters held during training.
    pub retained_params: usize,
    pub trainable_params: usize,
    pub param_bytes: usize,
    pub grad_bytes: usize,
    pub optimizer_bytes: usize,
    pub activation_bytes: usize,
    /// Full network with one live activation set.
    pub inference_bytes: usize,
    pub precompute_flops: Option<u64>,
    pub finetune_flops: u64,
    pub inference_plain_flops: u64,
    pub inference_two_path_flops: u64,
}

impl CostReport {
    pub fn training_bytes(&self) -> usize {
        self.param_bytes + self.grad_bytes + self.optimizer_bytes + self.activation_bytes
    }

    /// Training memory relative to inference alone.
    pub fn ratio_to_inference(&self) -> f64 {
        self.training_bytes() as f64 / self.inference_bytes as f64
    }
}

/// Bytes and FLOPs held by one training configuration at batch 1.
pub fn memory_estimate(
    graph: &BlockGraph,
    plan: Option<&HollowPlan>,
    rank: usize,
    mode: TrainMode,
) -> Result<CostReport> {
    let plan = match mode {
        TrainMode::Hollowed => Some(plan.ok_or_else(|| Error::Config("hollowed training needs a hollow plan".into()))?),
        _ => None,
    };
    if let Some(p) = plan {
        validate_plan(graph, p)?;
    }
    let counts = count_params(graph, plan);
    let trainable = match mode {
        TrainMode::FullFt => counts.total,
        _ => adapter_param_count(graph, plan, rank),
    };
    let adapter_params = if mode == TrainMode::FullFt { 0 } else { trainable };
    let route = plan.map_or(Route::Full, Route::Hollowed);
    let adapters = (mode != TrainMode::FullFt)
        .then(|| shape_adapters(graph, plan, rank))
        .transpose()?;
    let train_graph = build_unet_graph(graph, route, adapters.as_ref(), 1, &[])?.graph;
    let plain = build_unet_graph(graph, Route::Full, None, 1, &[])?.graph;
    let finetune_flops = match mode {
        TrainMode::FullFt => train_step_flops(&train_graph, &|_| true),
        _ => train_step_flops(&train_graph, &is_adapter),
    };
    Ok(CostReport {
        mode,
        rank,
        total_params: counts.total,
        retained_params: counts.retained,
        trainable_params: trainable,
        param_bytes: (counts.retained + adapter_params) * F32,
        grad_bytes: trainable * F32,
        optimizer_bytes: 2 * trainable * F32,
        activation_bytes: stored_activation_bytes(&train_graph),
        inference_bytes: counts.total * F32 + peak_live_bytes(&plain),
        precompute_flops: plan
            .map(|p| flops_estimate(graph, Some(p), Stage::Precompute, rank))
            .transpose()?,
        finetune_flops,
        inference_plain_flops: flops_estimate(graph, plan, Stage::InferencePlain, rank)?,
        inference_two_path_flops: flops_estimate(graph, plan, Stage::InferenceTwoPath, rank)?,
    })
}

pub fn write_cost_csv(path: &Path, reports: &[(String, CostReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record([
        "config",
        "mode",
        "rank",
        "total_params",
        "retained_params",
        "trainable_params",
        "param_bytes",
        "grad_bytes",
        "optimizer_bytes",
        "activation_bytes",
        "training_bytes",
        "inference_bytes",
        "ratio_to_inference",
        "precompute_flops",
        "finetune_flops",
        "inference_plain_flops",
        "inference_two_path_flops",
    ])
    .map_err(csv_err)?;
    for (name, r) in reports {
        w.write_record([
            name.clone(),
            r.mode.name().to_string(),
            r.rank.to_string(),
            r.total_params.to_string(),
            r.retained_params.to_string(),
            r.trainable_params.to_string(),
            r.param_bytes.to_string(),
            r.grad_bytes.to_string(),
            r.optimizer_bytes.to_string(),
            r.activation_bytes.to_string(),
            r.training_bytes().to_string(),
            r.inference_bytes.to_string(),
            format!("{:.4}", r.ratio_to_inference()),
            r.precompute_flops.map(|v| v.to_string()).unwrap_or_default(),
            r.finetune_flops.to_string(),
            r.inference_plain_flops.to_string(),
            r.inference_two_path_flops.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FidelityScore {
    pub per_image: Vec<f64>,
    pub mean: f64,
}

fn unit(x: &Tensor) -> Vec<f64> {
    x.data()
        .iter()
        .map(|&v| ((v as f64 + 1.0) * 0.5).clamp(0.0, 1.0))
        .collect()
}

/// RMS difference on [0, 1] after the best circular shift of `g` against `r`.
fn shifted_rms(g: &[f64], r: &[f64], c: usize, h: usize, w: usize) -> f64 {
    let n = (c * h * w) as f64;
    let mut best = f64::INFINITY;
    for dy in 0..h {
        for dx in 0..w {
            let mut s = 0.0;
            for ch in 0..c {
                let (gp, rp) = (&g[ch * h * w..], &r[ch * h * w..]);
                for y in 0..h {
                    let sy = (y + dy) % h;
                    for x in 0..w {
                        let d = gp[sy * w + (x + dx) % w] - rp[y * w + x];
                        s += d * d;
                    }
                }
                if s >= best * best * n {
                    break;
                }
            }
            best = best.min((s / n).sqrt());
        }
    }
    best
}

/// Distance of each generated `[C, H, W]` image to its nearest reference,
/// at most the distance a black image would score.
pub fn fidelity_proxy(generated: &[Tensor], references: &[Tensor]) -> Result<FidelityScore> {
    let first = references
        .first()
        .ok_or_else(|| Error::Config("no reference images".into()))?;
    let d = first.dims().to_vec();
    if d.len() != 3 {
        return Err(Error::shape(
            "fidelity",
            format!("expected [C, H, W] images, got {d:?}"),
        ));
    }
    for x in generated.iter().chain(references) {
        if x.dims() != d.as_slice() {
            return Err(Error::shape("fidelity", format!("{:?} against {d:?}", x.dims())));
        }
    }
    let (c, h, w) = (d[0], d[1], d[2]);
    let refs: Vec<Vec<f64>> = references.iter().map(unit).collect();
    let black: Vec<f64> = refs
        .iter()
        .map(|r| (r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64).sqrt())
        .collect();
    let per_image: Vec<f64> = generated
        .iter()
        .map(|g| {
            let g = unit(g);
            refs.iter()
                .zip(&black)
                .map(|(r, &b)| shifted_rms(&g, r, c, h, w).min(b))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mean = if per_image.is_empty() {
        0.0
    } else {
        per_image.iter().sum::<f64>() / per_image.len() as f64
    };
    Ok(FidelityScore { per_image, mean })
}

/// One point of a parameter sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub training_bytes: usize,
    pub fidelity: f64,
    pub final_loss: f64,
}

pub fn write_sweep_csv(path: &Path, axis: &str, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record([axis, "training_bytes", "fidelity_proxy", "final_loss"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.value.clone(),
            r.training_bytes.to_string(),
            format!("{:.6}", r.fidelity),
            format!("{:.6}", r.final_loss),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hollow::parse_plan;
    use crate::model::ArchConfig;

    #[test]
    fn identical_sets_report_zero() {
        let g = BlockGraph::new(&ArchConfig::toy16()).unwrap();
        let p = ParamStore::init(&g, 1);
        let r = block_weight_delta(WeightSet::Weights(&p), WeightSet::Weights(&p), &g).unwrap();
        assert!(r.blocks.iter().all(|(_, v)| *v == Some(0.0)));
    }

    #[test]
    fn shift_on_one_layer_shows_in_its_block() {
        let g = BlockGraph::new(&ArchConfig::toy16()).unwrap();
        let p = ParamStore::init(&g, 1);
        let name = "2-1.attn.attn1.to_q.weight";
        let mut q = p.clone();
        q.insert(name, p.get(name).unwrap().map(|v| v + 0.3)).unwrap();
        let mut only = BTreeMap::new();
        for (n, t) in p.iter().filter(|(n, _)| g.owner_of(n) == Some("2-1")) {
            only.insert(n.clone(), t.clone());
        }
        let r = block_weight_delta(WeightSet::Weights(&p), WeightSet::Weights(&q), &g).unwrap();
        let block_numel: usize = only.values().map(Tensor::len).sum();
        let layer = p.get(name).unwrap().len() as f64;
        let want = 0.3 * layer / block_numel as f64;
        assert!((r.get("2-1").unwrap() - want).abs() < 1e-6);
        assert_eq!(r.get("1-1"), Some(0.0));
    }

    #[test]
    fn adapter_deltas_and_absent_blocks() {
        let g = BlockGraph::new(&ArchConfig::toy16()).unwrap();
        let plan = parse_plan(&g, "2-2,3-1,3-2,4-1").unwrap();
        let a = crate::lora::init_adapters(&g, Some(&plan), 2, 1).unwrap();
        let mut b = a.clone();
        let mut v = b.tensors();
        let key = "2-1.attn.attn2.to_v.lora_b".to_string();
        v.insert(key.clone(), v[&key].map(|x| x + 1.0));
        b.set_tensors(&v).unwrap();
        let r = block_weight_delta(WeightSet::Adapters(&a), WeightSet::Adapters(&b), &g).unwrap();
        assert!(r.get("2-1").unwrap() > 0.0);
        // removed and attention-free blocks carry no adapters
        assert!(r.blocks.iter().any(|(l, v)| l == "3-1" && v.is_none()));
        assert!(r.blocks.iter().any(|(l, v)| l == TIME_EMBED && v.is_none()));
        let full = crate::lora::init_adapters(&g, None, 2, 1).unwrap();
        assert!(block_weight_delta(WeightSet::Adapters(&a), WeightSet::Adapters(&full), &g).is_err());
    }

    #[test]
    fn fidelity_basics() {
        let img = Tensor::from_fn(&[3, 8, 8], |i| ((i * 37) % 17) as f32 / 8.5 - 1.0);
        let s = fidelity_proxy(&[img.clone()], &[img.clone()]).unwrap();
        assert_eq!(s.mean, 0.0);
        // circular shifts are aligned away
        let rolled = Tensor::from_fn(&[3, 8, 8], |i| {
            let (c, y, x) = (i / 64, (i / 8) % 8, i % 8);
            img.data()[c * 64 + ((y + 3) % 8) * 8 + (x + 5) % 8]
        });
        assert!(fidelity_proxy(&[rolled], &[img.clone()]).unwrap().mean < 1e-12);
        let black = Tensor::full(&[3, 8, 8], -1.0);
        let white = Tensor::full(&[3, 8, 8], 1.0);
        let b = fidelity_proxy(&[black], &[img.clone()]).unwrap().mean;
        let w = fidelity_proxy(&[white], &[img.clone()]).unwrap().mean;
        assert!(w <= b + 1e-12);
        assert!(fidelity_proxy(&[Tensor::zeros(&[3, 4, 4])], &[img]).is_err());
    }

    #[test]
    fn peak_is_below_stored_total() {
        let g = BlockGraph::new(&ArchConfig::toy16()).unwrap();
        let u = build_unet_graph(&g, Route::Full, None, 1, &[]).unwrap().graph;
        let peak = peak_live_bytes(&u);
        assert!(peak > 0 && peak < stored_activation_bytes(&u));
    }
}
