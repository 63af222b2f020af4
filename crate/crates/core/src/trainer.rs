//! Stage two: adapter training on the hollowed network, plus the baselines
//! and toy pre-training that share its loop.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cache::{draw_keys, ActivationCache, CacheKey, RecordKey, RecordOrder, SampleKind, SampleSet};
use crate::error::{Error, Result};
use crate::hash::name_seed;
use crate::hollow::HollowedView;
use crate::lora::{LoraAdapterSet, Provenance};
use crate::model::{
    build_unet_graph, noise_latent, sample_noise, BlockGraph, NoiseSchedule, ParamStore, Route, UnetGraph, UnetInputs,
};
use crate::numerics::{backward, forward, Layered, NodeId, OpKind, Tensor, TensorSource};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Hollowed,
    LoraFt,
    FullFt,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hollowed" => Ok(Self::Hollowed),
            "lora-ft" | "lora-ft-baseline" => Ok(Self::LoraFt),
            "full-ft" | "full-ft-baseline" => Ok(Self::FullFt),
            _ => Err(Error::Config(format!("unknown training mode `{s}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Hollowed => "hollowed",
            Self::LoraFt => "lora-ft",
            Self::FullFt => "full-ft",
        }
    }

    /// Default learning rate: full fine-tuning uses a smaller step.
    pub fn default_lr(self) -> f64 {
        match self {
            Self::FullFt => 1e-5,
            _ => 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Weight of the prior-preservation term.
    pub lambda: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub rank: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(mode: TrainMode) -> Self {
        Self {
            mode,
            steps: 1000,
            lr: mode.default_lr(),
            batch: 1,
            lambda: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            rank: 128,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be non-negative, got {}",
                self.lr
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "prior weight must be non-negative, got {}",
                self.lambda
            )));
        }
        if self.rank == 0 {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mean squared error, as the training graphs compute it.
pub fn loss_denoise(eps_pred: &Tensor, eps: &Tensor) -> Result<f32> {
    let op = OpKind::MseReduce;
    let dims = op
        .infer_shape(&[eps_pred.dims(), eps.dims()])
        .map_err(|m| Error::shape("loss", m))?;
    Ok(op.forward(&[eps_pred, eps], &dims).data()[0])
}

/// The prior-preservation term; same form, evaluated on class samples.
pub fn loss_prior(eps_pred_on_prior: &Tensor, eps_pr: &Tensor) -> Result<f32> {
    loss_denoise(eps_pred_on_prior, eps_pr)
}

/// AdamW with decoupled weight decay. Moments exist only for parameters that
/// have received a gradient.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Scalars held in moment buffers.
    pub fn state_scalars(&self) -> usize {
        self.m.values().chain(self.v.values()).map(Vec::len).sum()
    }

    pub fn update(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let (lr, eps, wd) = (self.lr as f32, self.eps as f32, self.weight_decay as f32);
        let (c1, c2) = (c1 as f32, c2 as f32);
        for (name, g) in grads {
            let p = params.get_mut(name).ok_or_else(|| Error::Missing {
                what: "parameter",
                name: name.clone(),
            })?;
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let mut data = p.data().to_vec();
            for (((w, &gi), mi), vi) in data.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * (mhat / (vhat.sqrt() + eps) + wd * *w);
            }
            *p = Tensor::new(p.dims().to_vec(), data)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub instance_loss: f32,
    pub prior_loss: Option<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossHistory {
    pub rows: Vec<LossRow>,
}

impl LossHistory {
    /// Trailing mean of the instance loss over `window` steps, per step.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        let w = window.max(1);
        let xs: Vec<f64> = self.rows.iter().map(|r| r.instance_loss as f64).collect();
        (0..xs.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(w);
                xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
            })
            .collect()
    }

    /// Mean instance loss over the first and the last `window` steps.
    pub fn first_last(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.rows.len();
        if n == 0 {
            return None;
        }
        let w = window.clamp(1, n);
        let mean = |rs: &[LossRow]| rs.iter().map(|r| r.instance_loss as f64).sum::<f64>() / rs.len() as f64;
        Some((mean(&self.rows[..w]), mean(&self.rows[n - w..])))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
        w.write_record(["step", "instance_loss", "prior_loss"])
            .map_err(|e| Error::Io(e.into()))?;
        for r in &self.rows {
            let prior = r.prior_loss.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([r.step.to_string(), r.instance_loss.to_string(), prior])
                .map_err(|e| Error::Io(e.into()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One or more examples stacked along the batch axis.
struct Batch {
    z_t: Tensor,
    eps: Tensor,
    t: Vec<usize>,
    cond: Tensor,
    tap: Option<Tensor>,
}

impl Batch {
    fn stack(items: Vec<Example>) -> Result<Self> {
        let z: Vec<Tensor> = items.iter().map(|e| e.z_t.clone()).collect();
        let eps: Vec<Tensor> = items.iter().map(|e| e.eps.clone()).collect();
        let cond: Vec<Tensor> = items.iter().map(|e| e.cond.clone()).collect();
        let tap = match items.iter().map(|e| e.tap.clone()).collect::<Option<Vec<_>>>() {
            Some(t) => Some(Tensor::stack_batch(&t)?),
            None => None,
        };
        Ok(Self {
            z_t: Tensor::stack_batch(&z)?,
            eps: Tensor::stack_batch(&eps)?,
            t: items.iter().map(|e| e.t).collect(),
            cond: Tensor::stack_batch(&cond)?,
            tap,
        })
    }
}

struct Example {
    z_t: Tensor,
    eps: Tensor,
    t: usize,
    cond: Tensor,
    tap: Option<Tensor>,
}

fn example(key: &RecordKey, set: &SampleSet, schedule: &NoiseSchedule, tap: Option<Tensor>) -> Result<Example> {
    let (z_t, eps) = key.inputs(set, schedule)?;
    Ok(Example {
        z_t,
        eps,
        t: key.timestep as usize,
        cond: set.cond.clone(),
        tap,
    })
}

const IN_TARGET: &str = "target";

/// A U-Net graph closed by `mse(eps_pred, target)`.
struct LossGraph {
    ug: UnetGraph,
    loss: NodeId,
}

impl LossGraph {
    fn new(bg: &BlockGraph, route: Route<'_>, adapters: Option<&LoraAdapterSet>, batch: usize) -> Result<Self> {
        let mut ug = build_unet_graph(bg, route, adapters, batch, &[])?;
        let eps = ug.eps.expect("noise-predicting route");
        let dims = ug.graph.dims(eps).to_vec();
        let target = ug.graph.input(IN_TARGET, &dims);
        let loss = ug.graph.op("loss", OpKind::MseReduce, &[eps, target])?;
        Ok(Self { ug, loss })
    }

    /// Loss value and gradients of the parameters selected by `trainable`.
    fn run(
        &self,
        bg: &BlockGraph,
        b: &Batch,
        params: &dyn TensorSource<f32>,
        trainable: &dyn Fn(&str) -> bool,
    ) -> Result<(f32, BTreeMap<String, Tensor>)> {
        let mut inputs = UnetInputs::new(bg, b.z_t.clone(), &b.t, &b.cond)?;
        inputs.tap = b.tap.clone();
        let src = WithTarget {
            inputs: &inputs,
            target: &b.eps,
        };
        let exec = forward(&self.ug.graph, &src, params)?;
        let loss = exec.value(self.loss).data()[0];
        let grads = backward(&self.ug.graph, &exec, self.loss, trainable)?;
        Ok((loss, grads.params))
    }
}

struct WithTarget<'a> {
    inputs: &'a UnetInputs,
    target: &'a Tensor,
}

impl TensorSource<f32> for WithTarget<'_> {
    fn tensor(&self, name: &str) -> Option<&Tensor> {
        if name == IN_TARGET {
            Some(self.target)
        } else {
            self.inputs.tensor(name)
        }
    }
}

fn add_scaled(acc: &mut BTreeMap<String, Tensor>, g: BTreeMap<String, Tensor>, s: f32) -> Result<()> {
    for (k, v) in g {
        let v = if s == 1.0 { v } else { v.scale(s) };
        match acc.get(&k) {
            Some(prev) => {
                let sum = prev.add(&v)?;
                acc.insert(k, sum);
            }
            None => {
                acc.insert(k, v);
            }
        }
    }
    Ok(())
}

fn check_finite(step: usize, loss: f32, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite {what} loss at step {step}")))
    }
}

/// Training samples: subject images and, optionally, class samples.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub instances: &'a SampleSet,
    pub priors: Option<&'a SampleSet>,
    pub schedule: &'a NoiseSchedule,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub adapters: LoraAdapterSet,
    pub history: LossHistory,
    /// Scalars in optimizer moment buffers at the end of training.
    pub optimizer_scalars: usize,
    /// Names that received gradients in the last step.
    pub grad_names: Vec<String>,
}

/// Shared loop over (instance, prior) draws.
///
/// `draw` returns the examples for the next step; `step` turns a batch into a
/// loss and gradients.
fn run_loop(
    cfg: &TrainConfig,
    trainables: &mut BTreeMap<String, Tensor>,
    mut draw: impl FnMut(SampleKind) -> Result<Option<Vec<Example>>>,
    mut step: impl FnMut(&Batch, &BTreeMap<String, Tensor>) -> Result<(f32, BTreeMap<String, Tensor>)>,
) -> Result<(LossHistory, usize, Vec<String>)> {
    cfg.validate()?;
    let mut opt = AdamW::new(cfg);
    let mut history = LossHistory::default();
    let mut last_names = Vec::new();
    for i in 0..cfg.steps {
        let inst = draw(SampleKind::Instance)?.expect("instance records exist");
        let (li, mut grads) = step(&Batch::stack(inst)?, trainables)?;
        check_finite(i, li, "instance")?;
        let mut lp = None;
        if cfg.lambda > 0.0 {
            if let Some(prior) = draw(SampleKind::Prior)? {
                let (l, g) = step(&Batch::stack(prior)?, trainables)?;
                check_finite(i, l, "prior")?;
                add_scaled(&mut grads, g, cfg.lambda as f32)?;
                lp = Some(l);
            }
        }
        last_names = grads.keys().cloned().collect();
        opt.update(trainables, &grads)?;
        history.rows.push(LossRow {
            step: i,
            instance_loss: li,
            prior_loss: lp,
        });
    }
    Ok((history, opt.state_scalars(), last_names))
}

fn is_adapter_param(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b")
}

/// Mean denoising loss of the hollowed network over every cached record of
/// `kind`, evaluated in batches of up to 16.
pub fn cached_loss(
    view: &HollowedView<'_>,
    params: &ParamStore,
    cache: &ActivationCache,
    samples: &SampleSet,
    schedule: &NoiseSchedule,
    adapters: Option<&LoraAdapterSet>,
) -> Result<f64> {
    let idx = cache.indices_of(samples.kind)?;
    if idx.is_empty() {
        return Err(Error::Mismatch(format!("cache holds no {:?} records", samples.kind)));
    }
    let mut total = 0.0;
    for chunk in idx.chunks(16) {
        let mut items = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let rec = cache.read_record(i)?;
            items.push(example(&rec.key(), samples, schedule, Some(rec.batched_tap()))?);
        }
        let b = Batch::stack(items)?;
        let tap = b.tap.as_ref().expect("cached records carry taps");
        let pred = crate::hollow::hollowed_forward(view, params, tap, &b.z_t, &b.t, &b.cond, adapters)?;
        total += loss_denoise(&pred, &b.eps)? as f64 * chunk.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

/// Trains adapters on the hollowed network against pre-computed taps.
pub fn train_hollowed(
    view: &HollowedView<'_>,
    params: &ParamStore,
    cache: &ActivationCache,
    expected: &CacheKey,
    data: TrainData<'_>,
    adapters: &LoraAdapterSet,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cache.check(expected)?;
    let inst_idx = cache.indices_of(SampleKind::Instance)?;
    if inst_idx.is_empty() {
        return Err(Error::Mismatch("cache holds no instance records".into()));
    }
    let prior_idx = cache.indices_of(SampleKind::Prior)?;
    if !prior_idx.is_empty() && data.priors.is_none() {
        return Err(Error::Config(
            "cache has prior records but no prior samples were given".into(),
        ));
    }
    let mut orders = [
        RecordOrder::new(inst_idx, name_seed(cfg.seed, "instance-order")),
        RecordOrder::new(prior_idx, name_seed(cfg.seed, "prior-order")),
    ];
    let graph = LossGraph::new(view.graph, Route::Hollowed(view.plan), Some(adapters), cfg.batch)?;
    let retained = view.params(params);
    let mut set = adapters.clone();
    let mut trainables = set.tensors();

    let draw = |kind: SampleKind| -> Result<Option<Vec<Example>>> {
        let (order, samples) = match kind {
            SampleKind::Instance => (&mut orders[0], data.instances),
            SampleKind::Prior => match data.priors {
                Some(p) => (&mut orders[1], p),
                None => return Ok(None),
            },
        };
        let mut out = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let Some(i) = order.next() else { return Ok(None) };
            let rec = cache.read_record(i)?;
            out.push(example(&rec.key(), samples, data.schedule, Some(rec.batched_tap()))?);
        }
        Ok(Some(out))
    };
    let step = |b: &Batch, t: &BTreeMap<String, Tensor>| {
        let layered = Layered {
            first: &retained,
            second: t,
        };
        graph.run(view.graph, b, &layered, &is_adapter_param)
    };
    let (history, optimizer_scalars, grad_names) = run_loop(cfg, &mut trainables, draw, step)?;
    set.set_tensors(&trainables)?;
    set.provenance = Provenance::TrainedOnHollowed;
    Ok(TrainOutcome {
        adapters: set,
        history,
        optimizer_scalars,
        grad_names,
    })
}

/// What a baseline updates.
pub enum Trainable<'a> {
    Adapters(&'a LoraAdapterSet),
    AllWeights,
}

#[derive(Clone, Debug)]
pub struct BaselineOutcome {
    pub adapters: Option<LoraAdapterSet>,
    pub params: Option<ParamStore>,
    pub history: LossHistory,
    pub optimizer_scalars: usize,
}

/// Plain fine-tuning through the full network, drawing the same
/// `(sample, t, noise)` pool a cache of `pool` records would hold.
pub fn train_baseline(
    graph: &BlockGraph,
    params: &ParamStore,
    data: TrainData<'_>,
    pool: usize,
    prior_pool: usize,
    what: Trainable<'_>,
    cfg: &TrainConfig,
) -> Result<BaselineOutcome> {
    if data.instances.latents.is_empty() || pool == 0 {
        return Err(Error::Config("no instance samples".into()));
    }
    let inst_keys = draw_keys(data.instances, pool, data.schedule, cfg.seed_for_pool());
    let prior_keys = match data.priors {
        Some(p) if !p.latents.is_empty() => draw_keys(p, prior_pool, data.schedule, cfg.seed_for_pool()),
        _ => Vec::new(),
    };
    let mut orders = [
        RecordOrder::new((0..inst_keys.len()).collect(), name_seed(cfg.seed, "instance-order")),
        RecordOrder::new((0..prior_keys.len()).collect(), name_seed(cfg.seed, "prior-order")),
    ];
    let draw = |kind: SampleKind| -> Result<Option<Vec<Example>>> {
        let (order, keys, samples) = match kind {
            SampleKind::Instance => (&mut orders[0], &inst_keys, data.instances),
            SampleKind::Prior => match data.priors {
                Some(p) => (&mut orders[1], &prior_keys, p),
                None => return Ok(None),
            },
        };
        let mut out = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let Some(i) = order.next() else { return Ok(None) };
            out.push(example(&keys[i], samples, data.schedule, None)?);
        }
        Ok(Some(out))
    };
    match what {
        Trainable::Adapters(a) => {
            let lg = LossGraph::new(graph, Route::Full, Some(a), cfg.batch)?;
            let mut set = a.clone();
            let mut trainables = set.tensors();
            let step = |b: &Batch, t: &BTreeMap<String, Tensor>| {
                let layered = Layered {
                    first: params,
                    second: t,
                };
                lg.run(graph, b, &layered, &is_adapter_param)
            };
            let (history, optimizer_scalars, _) = run_loop(cfg, &mut trainables, draw, step)?;
            set.set_tensors(&trainables)?;
            set.provenance = Provenance::TrainedOnFull;
            Ok(BaselineOutcome {
                adapters: Some(set),
                params: None,
                history,
                optimizer_scalars,
            })
        }
        Trainable::AllWeights => {
            let lg = LossGraph::new(graph, Route::Full, None, cfg.batch)?;
            let mut trainables = params.as_map().clone();
            let step = |b: &Batch, t: &BTreeMap<String, Tensor>| lg.run(graph, b, t, &|_| true);
            let (history, optimizer_scalars, _) = run_loop(cfg, &mut trainables, draw, step)?;
            Ok(BaselineOutcome {
                adapters: None,
                params: Some(ParamStore::from_map(graph, trainables)?),
                history,
                optimizer_scalars,
            })
        }
    }
}

impl TrainConfig {
    /// Seed of the `(sample, t, noise)` pool. Equal to the cache seed when the
    /// pipeline uses one seed for both.
    fn seed_for_pool(&self) -> u64 {
        self.seed
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Draws a batch of clean class latents `[B, C, S, S]` and their prompt
/// embeddings `[B, L, D]`.
pub trait ClassSource {
    fn draw(&mut self, rng: &mut ChaCha8Rng, batch: usize) -> Result<(Tensor, Tensor)>;
}

/// Trains every weight of a freshly initialized network on class samples.
pub fn pretrain_toy(
    graph: &BlockGraph,
    schedule: &NoiseSchedule,
    source: &mut dyn ClassSource,
    cfg: &PretrainConfig,
) -> Result<(ParamStore, LossHistory)> {
    let init = ParamStore::init(graph, cfg.seed);
    if cfg.steps == 0 {
        return Ok((init, LossHistory::default()));
    }
    let tc = TrainConfig {
        steps: cfg.steps,
        lr: cfg.lr,
        batch: cfg.batch,
        lambda: 0.0,
        seed: cfg.seed,
        rank: 1,
        ..TrainConfig::new(TrainMode::FullFt)
    };
    let lg = LossGraph::new(graph, Route::Full, None, cfg.batch)?;
    let mut trainables = init.into_map();
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(cfg.seed, "pretrain"));
    let draw = |_: SampleKind| -> Result<Option<Vec<Example>>> {
        let (z, cond) = source.draw(&mut rng, cfg.batch)?;
        let t: Vec<usize> = (0..cfg.batch).map(|_| rng.gen_range(1..=schedule.steps())).collect();
        let eps = sample_noise(rng.gen(), z.dims());
        let z_t = noise_latent(&z, &t, &eps, schedule)?;
        let mut out = Vec::with_capacity(cfg.batch);
        for i in 0..cfg.batch {
            out.push(Example {
                z_t: z_t.batch_item(i)?,
                eps: eps.batch_item(i)?,
                t: t[i],
                cond: cond.batch_item(i)?,
                tap: None,
            });
        }
        Ok(Some(out))
    };
    let step = |b: &Batch, t: &BTreeMap<String, Tensor>| lg.run(graph, b, t, &|_| true);
    let (history, _, _) = run_loop(&tc, &mut trainables, draw, step)?;
    Ok((ParamStore::from_map(graph, trainables)?, history))
}
