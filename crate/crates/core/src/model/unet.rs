//! Compute-graph construction for the U-Net in its three routes.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::hollow::HollowPlan;
use crate::lora::LoraAdapterSet;
use crate::numerics::{forward_lean, ComputeGraph, Layered, NodeId, OpKind, Scalar, Tensor, TensorSource};

use super::blocks::{BlockGraph, BlockKind, SkipAction, SubBlock, TIME_EMBED};
use super::params::ParamStore;

pub const IN_LATENT: &str = "z_t";
pub const IN_TIME: &str = "time";
pub const IN_COND: &str = "cond";
pub const IN_TAP: &str = "tap";
pub const OUT_EPS: &str = "eps";
pub const OUT_TAP: &str = "tap";

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub enum Route<'p> {
    /// Every block, input to noise prediction.
    Full,
    /// Clean stem up to and including the removed region; emits the tap.
    ToTap(&'p HollowPlan),
    /// Retained blocks with the tap spliced in at the cut.
    Hollowed(&'p HollowPlan),
}

pub struct UnetGraph {
    pub graph: ComputeGraph,
    pub eps: Option<NodeId>,
    pub tap: Option<NodeId>,
    pub batch: usize,
}

struct Builder<'a> {
    g: ComputeGraph,
    cfg_groups: usize,
    head_dim: usize,
    adapters: Option<&'a LoraAdapterSet>,
}

impl Builder<'_> {
    fn op(&mut self, name: &str, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        self.g.op(name, kind, inputs)
    }

    fn param(&mut self, name: &str, dims: &[usize]) -> NodeId {
        self.g.param(name, dims)
    }

    fn dims(&self, id: NodeId) -> Vec<usize> {
        self.g.dims(id).to_vec()
    }

    /// Projection `p` (weight `[out, in]`), with its adapter when one is attached.
    fn linear(&mut self, p: &str, x: NodeId, d_out: usize, bias: bool) -> Result<NodeId> {
        let d_in = *self.dims(x).last().expect("non-scalar");
        let w = self.param(&format!("{p}.weight"), &[d_out, d_in]);
        let mut args = vec![x, w];
        if bias {
            args.push(self.param(&format!("{p}.bias"), &[d_out]));
        }
        let mut y = self.op(p, OpKind::Linear, &args)?;
        if let Some(ad) = self.adapters.and_then(|s| s.get(p)) {
            let (r, s) = (ad.rank, ad.scaling);
            let b = self.param(&ad.b_name(), &[r, d_in]);
            let a = self.param(&ad.a_name(), &[d_out, r]);
            let h = self.op(&format!("{p}.lora_down"), OpKind::Linear, &[x, b])?;
            let mut d = self.op(&format!("{p}.lora_up"), OpKind::Linear, &[h, a])?;
            if s != 1.0 {
                d = self.op(&format!("{p}.lora_scale"), OpKind::Scale(s as f64), &[d])?;
            }
            y = self.op(&format!("{p}.lora_add"), OpKind::Add, &[y, d])?;
        }
        Ok(y)
    }

    fn conv(&mut self, p: &str, x: NodeId, cout: usize, k: usize, kind: OpKind) -> Result<NodeId> {
        let cin = self.dims(x)[1];
        let w = self.param(&format!("{p}.weight"), &[cout, cin, k, k]);
        let b = self.param(&format!("{p}.bias"), &[cout]);
        self.op(p, kind, &[x, w, b])
    }

    fn norm(&mut self, p: &str, x: NodeId, kind: OpKind) -> Result<NodeId> {
        let c = match kind {
            OpKind::LayerNorm { .. } => *self.dims(x).last().expect("non-scalar"),
            _ => self.dims(x)[1],
        };
        let gamma = self.param(&format!("{p}.weight"), &[c]);
        let beta = self.param(&format!("{p}.bias"), &[c]);
        self.op(p, kind, &[x, gamma, beta])
    }

    fn group_norm(&mut self, p: &str, x: NodeId) -> Result<NodeId> {
        let kind = OpKind::GroupNorm {
            groups: self.cfg_groups,
            eps: NORM_EPS,
        };
        self.norm(p, x, kind)
    }

    fn silu(&mut self, p: &str, x: NodeId) -> Result<NodeId> {
        self.op(&format!("{p}.silu"), OpKind::Silu, &[x])
    }

    fn res_block(&mut self, p: &str, x: NodeId, temb: NodeId, cout: usize) -> Result<NodeId> {
        let cin = self.dims(x)[1];
        let r = format!("{p}.res");
        let h = self.group_norm(&format!("{r}.norm1"), x)?;
        let h = self.silu(&format!("{r}.norm1"), h)?;
        let h = self.conv(&format!("{r}.conv1"), h, cout, 3, OpKind::Conv2d { stride: 1, pad: 1 })?;
        let tp = self.linear(&format!("{r}.time_proj"), temb, cout, true)?;
        let h = self.op(&format!("{r}.time_add"), OpKind::AddChannel, &[h, tp])?;
        let h = self.group_norm(&format!("{r}.norm2"), h)?;
        let h = self.silu(&format!("{r}.norm2"), h)?;
        let h = self.conv(&format!("{r}.conv2"), h, cout, 3, OpKind::Conv2d { stride: 1, pad: 1 })?;
        let short = if cin != cout {
            self.conv(
                &format!("{r}.shortcut"),
                x,
                cout,
                1,
                OpKind::Conv2d { stride: 1, pad: 0 },
            )?
        } else {
            x
        };
        self.op(&format!("{r}.out"), OpKind::Add, &[h, short])
    }

    fn attention(&mut self, p: &str, x: NodeId, ctx: Option<NodeId>, c: usize) -> Result<NodeId> {
        let kv = ctx.unwrap_or(x);
        let q = self.linear(&format!("{p}.to_q"), x, c, false)?;
        let k = self.linear(&format!("{p}.to_k"), kv, c, false)?;
        let v = self.linear(&format!("{p}.to_v"), kv, c, false)?;
        let heads = c / self.head_dim;
        let a = self.op(&format!("{p}.sdpa"), OpKind::Attention { heads }, &[q, k, v])?;
        self.linear(&format!("{p}.to_out"), a, c, true)
    }

    fn transformer(&mut self, p: &str, x: NodeId, cond: NodeId) -> Result<NodeId> {
        let d = self.dims(x);
        let (c, h, w) = (d[1], d[2], d[3]);
        let a = format!("{p}.attn");
        let ln = OpKind::LayerNorm { eps: NORM_EPS };
        let t = self.group_norm(&format!("{a}.norm"), x)?;
        let t = self.op(&format!("{a}.to_tokens"), OpKind::ToTokens, &[t])?;
        let t = self.linear(&format!("{a}.proj_in"), t, c, true)?;

        let n = self.norm(&format!("{a}.ln1"), t, ln.clone())?;
        let s = self.attention(&format!("{a}.attn1"), n, None, c)?;
        let t = self.op(&format!("{a}.attn1.res"), OpKind::Add, &[t, s])?;

        let n = self.norm(&format!("{a}.ln2"), t, ln.clone())?;
        let s = self.attention(&format!("{a}.attn2"), n, Some(cond), c)?;
        let t = self.op(&format!("{a}.attn2.res"), OpKind::Add, &[t, s])?;

        let n = self.norm(&format!("{a}.ln3"), t, ln)?;
        let f = self.linear(&format!("{a}.ff.proj"), n, 8 * c, true)?;
        let f = self.op(&format!("{a}.ff.geglu"), OpKind::Geglu, &[f])?;
        let f = self.linear(&format!("{a}.ff.out"), f, c, true)?;
        let t = self.op(&format!("{a}.ff.res"), OpKind::Add, &[t, f])?;

        let t = self.linear(&format!("{a}.proj_out"), t, c, true)?;
        let t = self.op(&format!("{a}.from_tokens"), OpKind::FromTokens { h, w }, &[t])?;
        self.op(&format!("{a}.out"), OpKind::Add, &[t, x])
    }

    fn sub_block(
        &mut self,
        b: &SubBlock,
        x: NodeId,
        skip: Option<NodeId>,
        temb: NodeId,
        cond: NodeId,
    ) -> Result<NodeId> {
        let p = b.label.as_str();
        match b.kind {
            BlockKind::ConvIn => self.conv(p, x, b.out_channels, 3, OpKind::Conv2d { stride: 1, pad: 1 }),
            BlockKind::Res | BlockKind::ResAttn => {
                let x = match skip {
                    Some(s) => self.op(&format!("{p}.concat"), OpKind::ConcatChannels, &[x, s])?,
                    None => x,
                };
                let h = self.res_block(p, x, temb, b.out_channels)?;
                if b.kind == BlockKind::ResAttn {
                    self.transformer(p, h, cond)
                } else {
                    Ok(h)
                }
            }
            BlockKind::Downsample => self.conv(&format!("{p}.conv"), x, b.out_channels, 3, OpKind::DownsampleConv),
            BlockKind::Upsample => {
                let u = self.op(&format!("{p}.upsample"), OpKind::UpsampleNearest2x, &[x])?;
                self.conv(
                    &format!("{p}.conv"),
                    u,
                    b.out_channels,
                    3,
                    OpKind::Conv2d { stride: 1, pad: 1 },
                )
            }
            BlockKind::ConvOut => {
                let h = self.group_norm(&format!("{p}.norm"), x)?;
                let h = self.silu(&format!("{p}.norm"), h)?;
                self.conv(
                    &format!("{p}.conv"),
                    h,
                    b.out_channels,
                    3,
                    OpKind::Conv2d { stride: 1, pad: 1 },
                )
            }
        }
    }
}

fn tap_key(name: &str) -> (&str, bool) {
    match name.strip_suffix(":in") {
        Some(l) => (l, true),
        None => (name, false),
    }
}

/// Builds the noise-prediction graph for `batch` samples.
///
/// `taps` names extra outputs: a block label yields that block's output,
/// `<label>:in` its main-stream input. They are marked under their own names.
pub fn build_unet_graph(
    bg: &BlockGraph,
    route: Route<'_>,
    adapters: Option<&LoraAdapterSet>,
    batch: usize,
    taps: &[&str],
) -> Result<UnetGraph> {
    let cfg = &bg.config;
    if batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    if let Route::ToTap(p) | Route::Hollowed(p) = route {
        crate::hollow::validate_plan(bg, p)?;
    }
    if let Some(set) = adapters {
        set.check_against(bg)?;
        match route {
            Route::ToTap(_) if !set.is_empty() => {
                return Err(Error::Adapter("the tap path runs without adapters".into()));
            }
            Route::Hollowed(p) => {
                if let Some(t) = set.targets().find(|t| bg.owner_of(t).is_some_and(|o| p.removes(o))) {
                    return Err(Error::Adapter(format!("`{t}` lies in the removed region")));
                }
            }
            _ => {}
        }
    }
    for &t in taps {
        let (label, _) = tap_key(t);
        let pos = bg.position(label).ok_or_else(|| Error::Missing {
            what: "tap",
            name: t.to_owned(),
        })?;
        let unreachable = match route {
            Route::Full => false,
            Route::ToTap(p) => pos > p.end,
            Route::Hollowed(p) => p.removes_position(pos),
        };
        if unreachable {
            return Err(Error::Missing {
                what: "tap",
                name: t.to_owned(),
            });
        }
    }

    let mut b = Builder {
        g: ComputeGraph::new(),
        cfg_groups: cfg.norm_groups,
        head_dim: cfg.head_dim,
        adapters,
    };
    let (lc, ls) = (cfg.latent_channels, cfg.latent_size);
    let z = b.g.input(IN_LATENT, &[batch, lc, ls, ls]);
    let time = b.g.input(IN_TIME, &[batch, cfg.base_channels]);
    let cond = b.g.input(IN_COND, &[batch, cfg.context_len, cfg.context_dim]);

    b.g.set_block(Some(TIME_EMBED));
    let te = cfg.time_embed_dim;
    let h = b.linear("time_embed.linear_1", time, te, true)?;
    let h = b.silu("time_embed.linear_1", h)?;
    let h = b.linear("time_embed.linear_2", h, te, true)?;
    let temb = b.silu("time_embed", h)?;

    let mut stack: Vec<NodeId> = Vec::new();
    let mut h = z;
    let mut tap = None;
    let mut marks: BTreeMap<String, NodeId> = BTreeMap::new();
    let last = match route {
        Route::ToTap(p) => p.end,
        _ => bg.blocks.len() - 1,
    };
    for (pos, blk) in bg.blocks.iter().enumerate().take(last + 1) {
        if let Route::Hollowed(p) = route {
            if p.removes_position(pos) {
                if pos == p.start {
                    let mut d = vec![batch];
                    d.extend_from_slice(&p.tap_dims);
                    b.g.set_block(None);
                    h = b.g.input(IN_TAP, &d);
                }
                continue;
            }
        }
        for &t in taps {
            if tap_key(t) == (blk.label.as_str(), true) {
                marks.insert(t.to_owned(), h);
            }
        }
        b.g.set_block(Some(&blk.label));
        let skip = match blk.skip {
            SkipAction::Pop => Some(
                stack
                    .pop()
                    .ok_or_else(|| Error::shape(blk.label.clone(), "skip stack is empty"))?,
            ),
            _ => None,
        };
        h = b.sub_block(blk, h, skip, temb, cond)?;
        if blk.skip == SkipAction::Push {
            stack.push(h);
        }
        for &t in taps {
            if tap_key(t) == (blk.label.as_str(), false) {
                marks.insert(t.to_owned(), h);
            }
        }
        if let Route::ToTap(p) = route {
            if pos == p.end {
                tap = Some(h);
            }
        }
    }
    b.g.set_block(None);
    let eps = match route {
        Route::ToTap(_) => {
            b.g.mark_output(OUT_TAP, tap.expect("tap reached"));
            None
        }
        _ => {
            if !stack.is_empty() {
                return Err(Error::shape("unet", format!("{} skips left on the stack", stack.len())));
            }
            b.g.mark_output(OUT_EPS, h);
            Some(h)
        }
    };
    for (name, id) in marks {
        b.g.mark_output(&name, id);
    }
    Ok(UnetGraph {
        graph: b.g,
        eps,
        tap,
        batch,
    })
}

/// Sinusoidal timestep features `[N, dim]`, cosine half first.
pub fn timestep_features<T: Scalar>(t: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let tf = ti as f64;
        let freq = |i: usize| (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out.extend((0..half).map(|i| T::from_f64((tf * freq(i)).cos())));
        out.extend((0..half).map(|i| T::from_f64((tf * freq(i)).sin())));
    }
    Tensor::new(vec![t.len(), dim], out).expect("feature dims")
}

/// Inputs of a U-Net graph.
#[derive(Clone, Debug)]
pub struct UnetInputs<T: Scalar = f32> {
    pub z_t: Tensor<T>,
    pub time: Tensor<T>,
    pub cond: Tensor<T>,
    pub tap: Option<Tensor<T>>,
}

impl<T: Scalar> UnetInputs<T> {
    /// `cond` may be `[1, L, D]`, in which case it is repeated over the batch.
    pub fn new(bg: &BlockGraph, z_t: Tensor<T>, t: &[usize], cond: &Tensor<T>) -> Result<Self> {
        let n = z_t.dims()[0];
        if t.len() != n {
            return Err(Error::shape(IN_TIME, format!("{} timesteps for batch {n}", t.len())));
        }
        let cond = if cond.dims()[0] == 1 && n > 1 {
            Tensor::stack_batch(&vec![cond.clone(); n])?
        } else {
            cond.clone()
        };
        Ok(Self {
            z_t,
            time: timestep_features(t, bg.config.base_channels),
            cond,
            tap: None,
        })
    }

    pub fn with_tap(mut self, tap: Tensor<T>) -> Self {
        self.tap = Some(tap);
        self
    }
}

impl<T: Scalar> TensorSource<T> for UnetInputs<T> {
    fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        match name {
            IN_LATENT => Some(&self.z_t),
            IN_TIME => Some(&self.time),
            IN_COND => Some(&self.cond),
            IN_TAP => self.tap.as_ref(),
            _ => None,
        }
    }
}

/// Runs a built graph in lean mode with optional adapters layered over the base weights.
pub fn run_lean(
    ug: &UnetGraph,
    inputs: &UnetInputs,
    params: &dyn TensorSource<f32>,
    adapters: Option<&LoraAdapterSet>,
) -> Result<crate::numerics::Execution<f32>> {
    match adapters {
        Some(a) => forward_lean(
            &ug.graph,
            inputs,
            &Layered {
                first: params,
                second: a,
            },
        ),
        None => forward_lean(&ug.graph, inputs, params),
    }
}

/// Full forward pass; returns the noise prediction and the requested activations.
pub fn unet_forward(
    bg: &BlockGraph,
    params: &ParamStore,
    z_t: &Tensor,
    t: &[usize],
    cond: &Tensor,
    adapters: Option<&LoraAdapterSet>,
    taps: &[&str],
) -> Result<(Tensor, BTreeMap<String, Tensor>)> {
    let ug = build_unet_graph(bg, Route::Full, adapters, z_t.dims()[0], taps)?;
    let inputs = UnetInputs::new(bg, z_t.clone(), t, cond)?;
    let exec = run_lean(&ug, &inputs, params, adapters)?;
    let eps = exec.value(ug.eps.expect("full route")).clone();
    let acts = taps
        .iter()
        .map(|&n| {
            let id = ug.graph.output(n).expect("marked tap");
            (n.to_owned(), exec.value(id).clone())
        })
        .collect();
    Ok((eps, acts))
}

/// Clean partial forward up to the end of the plan's removed region.
pub fn tap_forward(
    bg: &BlockGraph,
    params: &ParamStore,
    plan: &HollowPlan,
    z_t: &Tensor,
    t: &[usize],
    cond: &Tensor,
) -> Result<Tensor> {
    let ug = build_unet_graph(bg, Route::ToTap(plan), None, z_t.dims()[0], &[])?;
    let inputs = UnetInputs::new(bg, z_t.clone(), t, cond)?;
    let exec = run_lean(&ug, &inputs, params, None)?;
    Ok(exec.value(ug.tap.expect("tap route")).clone())
}
