//! Built-in oracles: splice identity, transfer equivalence and gradients.

use std::collections::BTreeMap;

use hollownet::hollow::{hollowed_forward, parse_plan, HollowPlan, HollowedView};
use hollownet::inference::two_path_eps;
use hollownet::lora::{init_adapters, LoraAdapterSet};
use hollownet::model::{
    build_unet_graph, sample_noise, tap_forward, timestep_features, unet_forward, ArchConfig, BlockGraph, DownStage,
    ParamStore, Route, IN_COND, IN_LATENT, IN_TAP, IN_TIME, OUT_EPS,
};
use hollownet::numerics::{grad_check, ComputeGraph, NodeId, OpKind, Tensor};
use hollownet::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::pipeline;

pub const SPLICE_TOL: f64 = 1e-5;
pub const GRAD_H: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-3;
pub const N_INPUTS: usize = 20;
pub const SPLICE_PLANS: [&str; 3] = ["3-1,3-2", "2-2,3-1,3-2,4-1", "2-1,2-2,3-1,3-2,4-1,4-2"];

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

/// `n` random `(z_t, t, cond)` triples at batch 1.
pub fn random_inputs(graph: &BlockGraph, n: usize, seed: u64) -> Vec<(Tensor, usize, Tensor)> {
    let c = &graph.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let z = sample_noise(rng.gen(), &[1, c.latent_channels, c.latent_size, c.latent_size]);
            let t = rng.gen_range(1..=1000);
            let cond = sample_noise(rng.gen(), &[1, c.context_len, c.context_dim]);
            (z, t, cond)
        })
        .collect()
}

/// Worst relative error between the full forward and the hollowed forward fed
/// its own clean tap, without adapters.
pub fn splice_error(graph: &BlockGraph, params: &ParamStore, plan: &HollowPlan, seed: u64) -> Result<f64> {
    let view = HollowedView::new(graph, plan)?;
    let mut worst = 0.0f64;
    for (z, t, cond) in random_inputs(graph, N_INPUTS, seed) {
        let (full, _) = unet_forward(graph, params, &z, &[t], &cond, None, &[])?;
        let tap = tap_forward(graph, params, plan, &z, &[t], &cond)?;
        let hollow = hollowed_forward(&view, params, &tap, &z, &[t], &cond, None)?;
        worst = worst.max(hollow.max_rel_diff(&full));
    }
    Ok(worst)
}

pub fn splice_identity() -> Result<Vec<Check>> {
    let graph = BlockGraph::new(&ArchConfig::toy16())?;
    let params = ParamStore::init(&graph, 11);
    SPLICE_PLANS
        .iter()
        .enumerate()
        .map(|(i, labels)| {
            let plan = parse_plan(&graph, labels)?;
            let err = splice_error(&graph, &params, &plan, 100 + i as u64)?;
            Ok(Check::new(
                format!("splice identity [{labels}]"),
                err < SPLICE_TOL,
                format!("max rel error {err:.2e} over {N_INPUTS} inputs"),
            ))
        })
        .collect()
}

/// Count of inputs where two-path inference differs bitwise from the hollowed
/// forward on a fresh clean tap.
pub fn transfer_mismatches(
    graph: &BlockGraph,
    params: &ParamStore,
    plan: &HollowPlan,
    transferred: &LoraAdapterSet,
    seed: u64,
) -> Result<usize> {
    let view = HollowedView::new(graph, plan)?;
    let mut bad = 0;
    for (z, t, cond) in random_inputs(graph, N_INPUTS, seed) {
        let two = two_path_eps(graph, params, plan, transferred, &z, &[t], &cond)?;
        let tap = tap_forward(graph, params, plan, &z, &[t], &cond)?;
        let hollow = hollowed_forward(&view, params, &tap, &z, &[t], &cond, Some(transferred))?;
        if !two.bit_eq(&hollow) {
            bad += 1;
        }
    }
    Ok(bad)
}

/// A short hollowed run on a random base, then the bitwise comparison and the
/// gradient footprint of the run.
pub fn transfer_equivalence() -> Result<Vec<Check>> {
    let overrides: Vec<String> = [
        "--train.steps=4",
        "--train.lr=0.01",
        "--train.lambda=0",
        "--cache.n_records=8",
        "--lora.rank=4",
        "--paths.root=.",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let cfg = RunConfig::load(None, &overrides)?;
    let graph = pipeline::graph(&cfg)?;
    let params = ParamStore::init(&graph, 12);
    let plan = cfg.plan.build(&graph)?;
    let subject = pipeline::subject(&cfg, &graph, &params)?;
    let run = pipeline::run_hollowed(&cfg, &graph, &params, &plan, &subject)?;
    let bad = transfer_mismatches(&graph, &params, &plan, &run.transferred, 200)?;

    let adapter_names = run.outcome.adapters.param_names();
    let stray: Vec<&String> = run
        .outcome
        .grad_names
        .iter()
        .filter(|n| !adapter_names.contains(n) || n.as_str() == IN_TAP)
        .collect();
    let removed = run
        .outcome
        .adapters
        .targets()
        .filter(|t| plan.removes(graph.owner_of(t).unwrap_or_default()))
        .count();
    Ok(vec![
        Check::new(
            "transfer equivalence",
            bad == 0,
            format!("{bad} of {N_INPUTS} inputs differ bitwise"),
        ),
        Check::new(
            "gradient footprint",
            stray.is_empty() && removed == 0 && !run.outcome.grad_names.is_empty(),
            format!(
                "{} gradients, {} outside the adapters, {removed} adapters in removed blocks",
                run.outcome.grad_names.len(),
                stray.len()
            ),
        ),
    ])
}

struct Case {
    g: ComputeGraph,
    params: BTreeMap<String, Tensor<f64>>,
    inputs: BTreeMap<String, Tensor<f64>>,
    rng: ChaCha8Rng,
}

impl Case {
    fn new(seed: u64) -> Self {
        Self {
            g: ComputeGraph::new(),
            params: BTreeMap::new(),
            inputs: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn random(&mut self, dims: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(dims, |_| self.rng.gen_range(-1.0..1.0))
    }

    fn param(&mut self, name: &str, dims: &[usize]) -> NodeId {
        let t = self.random(dims);
        self.params.insert(name.into(), t);
        self.g.param(name, dims)
    }

    fn input(&mut self, name: &str, dims: &[usize]) -> NodeId {
        let t = self.random(dims);
        self.inputs.insert(name.into(), t);
        self.g.input(name, dims)
    }

    fn op(&mut self, name: &str, kind: OpKind, args: &[NodeId]) -> Result<NodeId> {
        self.g.op(name, kind, args)
    }

    /// Max relative error of every parameter under an MSE loss.
    fn check(mut self, out: NodeId, names: Option<Vec<String>>) -> Result<f64> {
        let dims = self.g.dims(out).to_vec();
        let target = self.input("target", &dims);
        let loss = self.op("loss", OpKind::MseReduce, &[out, target])?;
        let names = names.unwrap_or_else(|| self.params.keys().cloned().collect());
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        Ok(grad_check(&self.g, &self.inputs, &self.params, &names, loss, GRAD_H, GRAD_TOL)?.max_rel_error())
    }
}

fn op_cases() -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    let mut seed = 0u64;
    let mut next = || {
        seed += 1;
        Case::new(seed)
    };

    for (name, kind) in [
        ("conv2d pad 1", OpKind::Conv2d { stride: 1, pad: 1 }),
        ("conv2d stride 2", OpKind::Conv2d { stride: 2, pad: 0 }),
        ("downsample_conv", OpKind::DownsampleConv),
    ] {
        let mut c = next();
        let x = c.param("x", &[2, 3, 5, 5]);
        let w = c.param("w", &[4, 3, 3, 3]);
        let b = c.param("b", &[4]);
        let y = c.op("conv", kind, &[x, w, b])?;
        out.push((name.to_string(), c.check(y, None)?));
    }

    let mut c = next();
    let x = c.param("x", &[2, 3, 5]);
    let w = c.param("w", &[4, 5]);
    let b = c.param("b", &[4]);
    let y = c.op("fc", OpKind::Linear, &[x, w, b])?;
    out.push(("linear".into(), c.check(y, None)?));

    let mut c = next();
    let x = c.param("x", &[2, 4, 3, 3]);
    let g = c.param("gamma", &[4]);
    let b = c.param("beta", &[4]);
    let y = c.op("gn", OpKind::GroupNorm { groups: 2, eps: 1e-5 }, &[x, g, b])?;
    out.push(("group_norm".into(), c.check(y, None)?));

    let mut c = next();
    let x = c.param("x", &[2, 3, 6]);
    let g = c.param("gamma", &[6]);
    let b = c.param("beta", &[6]);
    let y = c.op("ln", OpKind::LayerNorm { eps: 1e-5 }, &[x, g, b])?;
    out.push(("layer_norm".into(), c.check(y, None)?));

    let mut c = next();
    let table = c.param("table", &[6, 4]);
    let y = c.op(
        "embed",
        OpKind::EmbedLookup {
            ids: vec![1, 3, 3, 0, 5],
        },
        &[table],
    )?;
    out.push(("embed_lookup".into(), c.check(y, None)?));

    for kind in [OpKind::Silu, OpKind::Softmax, OpKind::Geglu, OpKind::Scale(-0.7)] {
        let mut c = next();
        let x = c.param("x", &[2, 3, 6]);
        let y = c.op("op", kind.clone(), &[x])?;
        out.push((kind.name().to_string(), c.check(y, None)?));
    }

    let mut c = next();
    let x = c.param("x", &[1, 2, 3, 3]);
    let y = c.op("up", OpKind::UpsampleNearest2x, &[x])?;
    out.push(("upsample".into(), c.check(y, None)?));

    let mut c = next();
    let a = c.param("a", &[2, 2, 3, 3]);
    let v = c.param("v", &[2, 2]);
    let s = c.op("addc", OpKind::AddChannel, &[a, v])?;
    let b = c.param("b", &[2, 3, 3, 3]);
    let y = c.op("cat", OpKind::ConcatChannels, &[s, b])?;
    out.push(("add_channel + concat".into(), c.check(y, None)?));

    let mut c = next();
    let (d, m) = (8, 6);
    let x = c.input("x", &[2, 5, d]);
    let ctx = c.input("ctx", &[2, 3, m]);
    let wq = c.param("wq", &[d, d]);
    let wk = c.param("wk", &[d, m]);
    let wv = c.param("wv", &[d, m]);
    let q = c.op("q", OpKind::Linear, &[x, wq])?;
    let k = c.op("k", OpKind::Linear, &[ctx, wk])?;
    let v = c.op("v", OpKind::Linear, &[ctx, wv])?;
    let y = c.op("sdpa", OpKind::Attention { heads: 2 }, &[q, k, v])?;
    out.push(("attention".into(), c.check(y, None)?));

    Ok(out)
}

/// Two resolutions, attention on both sides of the skip pairing.
pub fn tiny_config() -> ArchConfig {
    ArchConfig {
        preset: "tiny".into(),
        base_channels: 4,
        down: vec![
            DownStage {
                blocks: 1,
                mult: 1,
                attention: true,
                downsample: true,
            },
            DownStage {
                blocks: 1,
                mult: 2,
                attention: false,
                downsample: false,
            },
        ],
        mid_blocks: 1,
        mid_attention: true,
        head_dim: 4,
        context_dim: 4,
        context_len: 2,
        latent_channels: 2,
        latent_size: 4,
        norm_groups: 2,
        time_embed_dim: 8,
    }
}

/// LoRA factors through resblocks and attention, with random nonzero factors.
fn lora_stack_error(bg: &BlockGraph, route: Route<'_>) -> Result<f64> {
    let plan = match route {
        Route::Hollowed(p) => Some(p),
        _ => None,
    };
    let mut set = init_adapters(bg, plan, 2, 1)?;
    let mut c = Case::new(50);
    let mut values = set.tensors();
    for t in values.values_mut() {
        *t = Tensor::from_fn(t.dims(), |_| c.rng.gen_range(-0.5..0.5));
    }
    set.set_tensors(&values)?;

    let ug = build_unet_graph(bg, route, Some(&set), 1, &[])?;
    c.g = ug.graph;
    let eps = c.g.output(OUT_EPS).ok_or_else(|| Error::Missing {
        what: "output",
        name: OUT_EPS.into(),
    })?;
    c.params = ParamStore::init(bg, 2).cast::<f64>();
    let bound: Vec<String> = c.g.param_names().iter().map(|s| s.to_string()).collect();
    c.params.retain(|k, _| bound.contains(k));
    for (k, v) in set.tensors() {
        c.params.insert(k, v.cast());
    }
    let cfg = &bg.config;
    let z = c.random(&[1, cfg.latent_channels, cfg.latent_size, cfg.latent_size]);
    c.inputs.insert(IN_LATENT.into(), z);
    c.inputs
        .insert(IN_TIME.into(), timestep_features(&[321], cfg.base_channels));
    let ctx = c.random(&[1, cfg.context_len, cfg.context_dim]);
    c.inputs.insert(IN_COND.into(), ctx);
    if let Some(p) = plan {
        let mut d = vec![1];
        d.extend_from_slice(&p.tap_dims);
        let tap = c.random(&d);
        c.inputs.insert(IN_TAP.into(), tap);
    }
    c.check(eps, Some(set.param_names()))
}

pub fn gradients() -> Result<Vec<Check>> {
    let mut results = op_cases()?;
    let bg = BlockGraph::new(&tiny_config())?;
    results.push(("lora stack, full".into(), lora_stack_error(&bg, Route::Full)?));
    let plan = parse_plan(&bg, "3-1")?;
    results.push((
        "lora stack, hollowed".into(),
        lora_stack_error(&bg, Route::Hollowed(&plan))?,
    ));
    Ok(results
        .into_iter()
        .map(|(name, err)| {
            Check::new(
                format!("gradient {name}"),
                err < GRAD_TOL,
                format!("max rel error {err:.2e}"),
            )
        })
        .collect())
}

pub fn run_all() -> Result<Vec<Check>> {
    let mut checks = splice_identity()?;
    checks.extend(transfer_equivalence()?);
    checks.extend(gradients()?);
    Ok(checks)
}
