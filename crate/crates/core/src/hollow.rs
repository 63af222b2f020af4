//! Hollow plans: removing a central interval of sub-blocks and bridging it
//! with a cached activation from the frozen full network.

use std::fmt;

use crate::error::{Error, Result};
use crate::lora::LoraAdapterSet;
use crate::model::{
    build_unet_graph, BlockGraph, BlockKind, ParamStore, Route, Section, SkipAction, SubBlock, UnetInputs,
};
use crate::numerics::{forward_lean, Tensor, TensorSource};

/// Largest distance between the requested and achieved fraction.
pub const FRACTION_SLACK: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum PlanViolation {
    #[error("empty removal list")]
    Empty,
    #[error("unknown sub-block `{0}`")]
    UnknownLabel(String),
    #[error("sub-block `{0}` listed twice")]
    Duplicate(String),
    #[error("`{0}` can never be removed")]
    Protected(String),
    #[error("removal is not contiguous: `{missing}` lies inside the interval but is kept")]
    NonContiguous { missing: String },
    #[error("skip imbalance: {pushes} pushes vs {pops} pops inside the interval")]
    SkipImbalance { pushes: usize, pops: usize },
    #[error("interval must contain the whole mid stage (missing `{missing}`)")]
    OffCenter { missing: String },
    #[error("tap at `{label}` has shape {got:?}, network produces {expected:?}")]
    TapShape {
        label: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("no valid plan within {slack} of fraction {target} (nearest {nearest:?})")]
    NoCandidate {
        target: f64,
        slack: f64,
        nearest: Option<f64>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct HollowPlan {
    /// Removed labels in execution order.
    pub removed: Vec<String>,
    /// First and last removed position in the block list.
    pub start: usize,
    pub end: usize,
    /// First retained block after the cut; the tap is its main-stream input.
    pub tap_label: String,
    /// Per-sample tap shape `[C, H, W]`.
    pub tap_dims: Vec<usize>,
    pub total_params: usize,
    pub removed_params: usize,
    pub fraction: f64,
}

impl HollowPlan {
    pub fn removes(&self, label: &str) -> bool {
        self.removed.iter().any(|l| l == label)
    }

    pub fn removes_position(&self, pos: usize) -> bool {
        (self.start..=self.end).contains(&pos)
    }

    pub fn retained_params(&self) -> usize {
        self.total_params - self.removed_params
    }

    /// Comma separated labels, the config-file form.
    pub fn label_list(&self) -> String {
        self.removed.join(",")
    }

    /// Last removed label; its output is the tap.
    pub fn last_removed(&self) -> &str {
        self.removed.last().expect("plans are never empty")
    }
}

impl fmt::Display for HollowPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{{{}}} ({:.1}% removed, tap before {})",
            self.label_list(),
            100.0 * self.fraction,
            self.tap_label
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamCounts {
    pub total: usize,
    pub retained: usize,
    pub removed: usize,
    pub fraction: f64,
}

pub fn count_params(graph: &BlockGraph, plan: Option<&HollowPlan>) -> ParamCounts {
    let total = graph.total_params();
    let removed = plan.map_or(0, |p| {
        p.removed
            .iter()
            .filter_map(|l| graph.block(l))
            .map(SubBlock::num_params)
            .sum()
    });
    ParamCounts {
        total,
        retained: total - removed,
        removed,
        fraction: removed as f64 / total as f64,
    }
}

/// Checks a removal list and returns its inclusive position interval.
fn check_removal(graph: &BlockGraph, labels: &[&str]) -> std::result::Result<(usize, usize), PlanViolation> {
    if labels.is_empty() {
        return Err(PlanViolation::Empty);
    }
    let mut pos = Vec::with_capacity(labels.len());
    for &l in labels {
        let p = graph
            .position(l)
            .ok_or_else(|| PlanViolation::UnknownLabel(l.to_owned()))?;
        if !graph.blocks[p].removable() {
            return Err(PlanViolation::Protected(l.to_owned()));
        }
        if pos.contains(&p) {
            return Err(PlanViolation::Duplicate(l.to_owned()));
        }
        pos.push(p);
    }
    pos.sort_unstable();
    let (start, end) = (pos[0], *pos.last().expect("non-empty"));
    if end - start + 1 != pos.len() {
        let missing = (start..=end).find(|p| !pos.contains(p)).expect("gap exists");
        return Err(PlanViolation::NonContiguous {
            missing: graph.blocks[missing].label.clone(),
        });
    }
    let region = &graph.blocks[start..=end];
    let pushes = region.iter().filter(|b| b.skip == SkipAction::Push).count();
    let pops = region.iter().filter(|b| b.skip == SkipAction::Pop).count();
    if pushes != pops {
        return Err(PlanViolation::SkipImbalance { pushes, pops });
    }
    if let Some(m) = graph
        .blocks
        .iter()
        .enumerate()
        .find(|(p, b)| b.section == Section::Mid && !(start..=end).contains(p))
    {
        return Err(PlanViolation::OffCenter {
            missing: m.1.label.clone(),
        });
    }
    Ok((start, end))
}

fn plan_for(graph: &BlockGraph, start: usize, end: usize) -> HollowPlan {
    let removed: Vec<String> = graph.blocks[start..=end].iter().map(|b| b.label.clone()).collect();
    let last = &graph.blocks[end];
    let total = graph.total_params();
    let removed_params: usize = graph.blocks[start..=end].iter().map(SubBlock::num_params).sum();
    HollowPlan {
        removed,
        start,
        end,
        tap_label: graph.blocks[end + 1].label.clone(),
        tap_dims: vec![last.out_channels, last.out_res, last.out_res],
        total_params: total,
        removed_params,
        fraction: removed_params as f64 / total as f64,
    }
}

pub fn make_plan_from_labels<S: AsRef<str>>(graph: &BlockGraph, labels: &[S]) -> Result<HollowPlan> {
    let labels: Vec<&str> = labels.iter().map(AsRef::as_ref).collect();
    let (start, end) = check_removal(graph, &labels)?;
    Ok(plan_for(graph, start, end))
}

/// Parses the comma separated config form.
pub fn parse_plan(graph: &BlockGraph, list: &str) -> Result<HollowPlan> {
    let labels: Vec<&str> = list.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    make_plan_from_labels(graph, &labels)
}

/// Every valid central interval, ordered by fraction.
pub fn enumerate_plans(graph: &BlockGraph) -> Vec<HollowPlan> {
    let n = graph.blocks.len();
    let mut out = Vec::new();
    for start in 0..n {
        for end in start..n {
            let labels: Vec<&str> = graph.blocks[start..=end].iter().map(|b| b.label.as_str()).collect();
            if check_removal(graph, &labels).is_ok() {
                out.push(plan_for(graph, start, end));
            }
        }
    }
    out.sort_by(|a, b| a.fraction.total_cmp(&b.fraction));
    out
}

/// Plans eligible for fraction targeting: the outermost down and up stages stay.
pub fn candidate_plans(graph: &BlockGraph) -> Vec<HollowPlan> {
    let last_stage = graph.blocks.iter().map(|b| b.stage).max().unwrap_or(0);
    enumerate_plans(graph)
        .into_iter()
        .filter(|p| {
            graph.blocks[p.start..=p.end]
                .iter()
                .all(|b| b.stage != 1 && b.stage != last_stage)
        })
        .collect()
}

/// Candidate plan with fraction nearest `target`; ties go to the smaller fraction.
pub fn make_plan_for_fraction(graph: &BlockGraph, target: f64) -> Result<HollowPlan> {
    if !(target > 0.0 && target < 0.9) {
        return Err(Error::Config(format!("target fraction {target} outside (0, 0.9)")));
    }
    let mut best: Option<HollowPlan> = None;
    for p in candidate_plans(graph) {
        let better = match &best {
            None => true,
            Some(b) => {
                let (dp, db) = ((p.fraction - target).abs(), (b.fraction - target).abs());
                dp < db || (dp == db && p.fraction < b.fraction)
            }
        };
        if better {
            best = Some(p);
        }
    }
    match best {
        Some(p) if (p.fraction - target).abs() <= FRACTION_SLACK => Ok(p),
        other => Err(PlanViolation::NoCandidate {
            target,
            slack: FRACTION_SLACK,
            nearest: other.map(|p| p.fraction),
        }
        .into()),
    }
}

pub enum Removal<'a> {
    Labels(&'a [&'a str]),
    Fraction(f64),
}

pub fn make_plan(graph: &BlockGraph, removal: Removal<'_>) -> Result<HollowPlan> {
    match removal {
        Removal::Labels(l) => make_plan_from_labels(graph, l),
        Removal::Fraction(f) => make_plan_for_fraction(graph, f),
    }
}

/// Re-checks a plan against a network, including the tap shape.
pub fn validate_plan(graph: &BlockGraph, plan: &HollowPlan) -> std::result::Result<(), PlanViolation> {
    let labels: Vec<&str> = plan.removed.iter().map(String::as_str).collect();
    let (start, end) = check_removal(graph, &labels)?;
    let last = &graph.blocks[end];
    let expected = vec![last.out_channels, last.out_res, last.out_res];
    let next = &graph.blocks[end + 1];
    if next.in_channels != expected[0] || next.in_res != expected[1] || plan.tap_dims != expected {
        return Err(PlanViolation::TapShape {
            label: next.label.clone(),
            expected,
            got: plan.tap_dims.clone(),
        });
    }
    if (plan.start, plan.end) != (start, end) || plan.tap_label != next.label {
        return Err(PlanViolation::TapShape {
            label: plan.tap_label.clone(),
            expected,
            got: plan.tap_dims.clone(),
        });
    }
    Ok(())
}

/// The network seen through a plan. Holds references only.
#[derive(Clone, Copy)]
pub struct HollowedView<'g> {
    pub graph: &'g BlockGraph,
    pub plan: &'g HollowPlan,
}

impl<'g> HollowedView<'g> {
    pub fn new(graph: &'g BlockGraph, plan: &'g HollowPlan) -> Result<Self> {
        validate_plan(graph, plan)?;
        Ok(Self { graph, plan })
    }

    pub fn retained(&self) -> impl Iterator<Item = &'g SubBlock> + '_ {
        self.graph
            .blocks
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.plan.removes_position(*i))
            .map(|(_, b)| b)
    }

    pub fn num_params(&self) -> usize {
        self.graph.time_embed.iter().map(|p| p.numel()).sum::<usize>()
            + self.retained().map(SubBlock::num_params).sum::<usize>()
    }

    /// Parameter lookup that hides removed blocks. Tensors are shared, never copied.
    pub fn params<'p>(&self, store: &'p ParamStore) -> RetainedParams<'p, 'g> {
        RetainedParams {
            store,
            graph: self.graph,
            plan: self.plan,
        }
    }

    pub fn kinds(&self) -> Vec<BlockKind> {
        self.retained().map(|b| b.kind).collect()
    }
}

pub struct RetainedParams<'p, 'g> {
    store: &'p ParamStore,
    graph: &'g BlockGraph,
    plan: &'g HollowPlan,
}

impl RetainedParams<'_, '_> {
    /// Bytes of parameter storage reachable through the view.
    pub fn held_bytes(&self) -> usize {
        self.store
            .iter()
            .filter(|(n, _)| self.tensor(n).is_some())
            .map(|(_, t)| t.nbytes())
            .sum()
    }
}

impl TensorSource<f32> for RetainedParams<'_, '_> {
    fn tensor(&self, name: &str) -> Option<&Tensor> {
        let owner = self.graph.owner_of(name)?;
        if self.plan.removes(owner) {
            return None;
        }
        self.store.get(name)
    }
}

/// Runs the retained blocks with `cached_tap` spliced in at the cut.
pub fn hollowed_forward(
    view: &HollowedView<'_>,
    params: &ParamStore,
    cached_tap: &Tensor,
    z_t: &Tensor,
    t: &[usize],
    cond: &Tensor,
    adapters: Option<&LoraAdapterSet>,
) -> Result<Tensor> {
    let batch = z_t.dims()[0];
    let mut want = vec![batch];
    want.extend_from_slice(&view.plan.tap_dims);
    if cached_tap.dims() != want.as_slice() {
        return Err(PlanViolation::TapShape {
            label: view.plan.tap_label.clone(),
            expected: want,
            got: cached_tap.dims().to_vec(),
        }
        .into());
    }
    let ug = build_unet_graph(view.graph, Route::Hollowed(view.plan), adapters, batch, &[])?;
    let inputs = UnetInputs::new(view.graph, z_t.clone(), t, cond)?.with_tap(cached_tap.clone());
    let retained = view.params(params);
    let exec = match adapters {
        Some(a) => forward_lean(
            &ug.graph,
            &inputs,
            &crate::numerics::Layered {
                first: &retained,
                second: a,
            },
        )?,
        None => forward_lean(&ug.graph, &inputs, &retained)?,
    };
    Ok(exec.value(ug.eps.expect("hollowed graphs predict noise")).clone())
}
