//! Stages shared by the commands, the sweep and the benchmark.

use hollownet::analysis::fidelity_proxy;
use hollownet::cache::{precompute, to_bytes, ActivationCache, CacheKey, SampleKind, SampleSet};
use hollownet::hash::name_seed;
use hollownet::hollow::{HollowPlan, HollowedView};
use hollownet::inference::{sample, EpsModel, SamplerConfig};
use hollownet::lora::{init_adapters, transfer_adapters, LoraAdapterSet};
use hollownet::model::{embed_prompt, BlockGraph, NoiseSchedule, ParamStore, PromptSpec};
use hollownet::numerics::Tensor;
use hollownet::trainer::{
    cached_loss, pretrain_toy, train_baseline, train_hollowed, BaselineOutcome, LossHistory, TrainConfig, TrainData,
    TrainMode, TrainOutcome, Trainable,
};
use hollownet::{Error, Result};

use crate::config::RunConfig;
use crate::dataset::{class_index, make_toy_dataset, ClassImages, ToyDataset};

pub fn graph(cfg: &RunConfig) -> Result<BlockGraph> {
    BlockGraph::new(&cfg.arch)
}

pub fn schedule() -> NoiseSchedule {
    NoiseSchedule::default()
}

/// Prompt ids: 0 for the instance prompt, `1 + class` for class prompts.
pub fn instance_prompt(cfg: &RunConfig) -> PromptSpec {
    PromptSpec::instance(&cfg.class, 0)
}

pub fn class_prompt(cfg: &RunConfig) -> Result<PromptSpec> {
    Ok(PromptSpec::prior(&cfg.class, 1 + class_index(&cfg.class)? as u32))
}

pub fn embed(cfg: &RunConfig, graph: &BlockGraph, prompt: &PromptSpec) -> Result<Tensor> {
    let c = &graph.config;
    embed_prompt(prompt, cfg.table_seed, c.context_dim, c.context_len)
}

fn check_pixel_latents(graph: &BlockGraph) -> Result<()> {
    if graph.config.latent_channels != 3 {
        return Err(Error::Config(format!(
            "preset `{}` has {} latent channels; the synthetic data needs 3",
            graph.config.preset, graph.config.latent_channels
        )));
    }
    Ok(())
}

pub fn pretrain(cfg: &RunConfig, graph: &BlockGraph) -> Result<(ParamStore, LossHistory)> {
    check_pixel_latents(graph)?;
    let c = &graph.config;
    let mut source = ClassImages::new(c.latent_size, cfg.table_seed, c.context_dim, c.context_len)?;
    pretrain_toy(graph, &schedule(), &mut source, &cfg.pretrain)
}

/// The subject's images and the sample sets the trainer reads.
#[derive(Clone, Debug)]
pub struct Subject {
    pub data: ToyDataset,
    pub instances: SampleSet,
    pub priors: Option<SampleSet>,
}

impl Subject {
    pub fn train_data<'a>(&'a self, schedule: &'a NoiseSchedule) -> TrainData<'a> {
        TrainData {
            instances: &self.instances,
            priors: self.priors.as_ref(),
            schedule,
        }
    }
}

pub fn subject_images(cfg: &RunConfig, graph: &BlockGraph) -> Result<ToyDataset> {
    check_pixel_latents(graph)?;
    make_toy_dataset(&cfg.class, cfg.subject_seed, graph.config.latent_size, cfg.n_images)
}

pub fn instance_set(cfg: &RunConfig, graph: &BlockGraph, data: &ToyDataset) -> Result<SampleSet> {
    let s = graph.config.latent_size;
    Ok(SampleSet {
        kind: SampleKind::Instance,
        latents: data
            .instances
            .iter()
            .map(|t| t.reshape(&[1, 3, s, s]))
            .collect::<Result<_>>()?,
        prompt_id: 0,
        cond: embed(cfg, graph, &instance_prompt(cfg))?,
    })
}

/// Wraps prior latents with the class prompt.
pub fn prior_set_from(cfg: &RunConfig, graph: &BlockGraph, latents: Vec<Tensor>) -> Result<SampleSet> {
    let prompt = class_prompt(cfg)?;
    Ok(SampleSet {
        kind: SampleKind::Prior,
        latents,
        prompt_id: prompt.prompt_id,
        cond: embed(cfg, graph, &prompt)?,
    })
}

/// Class samples drawn from the frozen base for the prior term.
pub fn generate_priors(cfg: &RunConfig, graph: &BlockGraph, params: &ParamStore) -> Result<Vec<Tensor>> {
    let cond = embed(cfg, graph, &class_prompt(cfg)?)?;
    let sampler = SamplerConfig {
        seed: name_seed(cfg.cache_seed, "prior-samples"),
        ..cfg.sampler.clone()
    };
    hollownet::cache::make_prior_set(graph, params, &schedule(), &cond, cfg.n_prior_samples, &sampler)
}

/// Subject plus freshly generated priors; no priors when the prior term is off.
pub fn subject(cfg: &RunConfig, graph: &BlockGraph, params: &ParamStore) -> Result<Subject> {
    let data = subject_images(cfg, graph)?;
    let instances = instance_set(cfg, graph, &data)?;
    let priors = if cfg.train.lambda > 0.0 && cfg.n_prior > 0 && cfg.n_prior_samples > 0 {
        Some(prior_set_from(cfg, graph, generate_priors(cfg, graph, params)?)?)
    } else {
        None
    };
    Ok(Subject {
        data,
        instances,
        priors,
    })
}

/// Stage one in memory: the cache bytes for `plan`.
pub fn build_cache(
    cfg: &RunConfig,
    graph: &BlockGraph,
    params: &ParamStore,
    plan: &HollowPlan,
    subject: &Subject,
) -> Result<(CacheKey, ActivationCache)> {
    let schedule = schedule();
    let n_prior = if subject.priors.is_some() { cfg.n_prior } else { 0 };
    let records = precompute(
        graph,
        params,
        plan,
        &schedule,
        &subject.instances,
        subject.priors.as_ref(),
        cfg.n_records,
        n_prior,
        cfg.cache_seed,
    )?;
    let key = CacheKey::new(graph, params, plan, &schedule);
    Ok((key, ActivationCache::from_bytes(to_bytes(key, &records))?))
}

/// A hollowed fine-tuning run and its cache-wide instance loss before and after.
#[derive(Clone, Debug)]
pub struct HollowedRun {
    pub outcome: TrainOutcome,
    pub transferred: LoraAdapterSet,
    pub loss_before: f64,
    pub loss_after: f64,
}

pub fn train_with_cache(
    cfg: &RunConfig,
    graph: &BlockGraph,
    params: &ParamStore,
    plan: &HollowPlan,
    subject: &Subject,
    key: &CacheKey,
    cache: &ActivationCache,
) -> Result<HollowedRun> {
    let schedule = schedule();
    let view = HollowedView::new(graph, plan)?;
    let fresh = init_adapters(graph, Some(plan), cfg.rank, cfg.train.seed)?;
    let tc = TrainConfig {
        mode: TrainMode::Hollowed,
        ..cfg.train.clone()
    };
    let outcome = train_hollowed(&view, params, cache, key, subject.train_data(&schedule), &fresh, &tc)?;
    let loss_before = cached_loss(&view, params, cache, &subject.instances, &schedule, None)?;
    let loss_after = cached_loss(
        &view,
        params,
        cache,
        &subject.instances,
        &schedule,
        Some(&outcome.adapters),
    )?;
    let transferred = transfer_adapters(&outcome.adapters, graph, plan)?;
    Ok(HollowedRun {
        outcome,
        transferred,
        loss_before,
        loss_after,
    })
}

/// Pre-compute, train on the hollowed network and transfer, all in memory.
pub fn run_hollowed(
    cfg: &RunConfig,
    graph: &BlockGraph,
    params: &ParamStore,
    plan: &HollowPlan,
    subject: &Subject,
) -> Result<HollowedRun> {
    let (key, cache) = build_cache(cfg, graph, params, plan, subject)?;
    train_with_cache(cfg, graph, params, plan, subject, &key, &cache)
}

/// Plain LoRA (or full) fine-tuning on the same record pool.
pub fn run_baseline(
    cfg: &RunConfig,
    graph: &BlockGraph,
    params: &ParamStore,
    subject: &Subject,
    mode: TrainMode,
) -> Result<BaselineOutcome> {
    let schedule = schedule();
    let tc = TrainConfig {
        mode,
        ..cfg.train.clone()
    };
    let n_prior = if subject.priors.is_some() { cfg.n_prior } else { 0 };
    let data = subject.train_data(&schedule);
    match mode {
        TrainMode::FullFt => train_baseline(graph, params, data, cfg.n_records, n_prior, Trainable::AllWeights, &tc),
        _ => {
            let fresh = init_adapters(graph, None, cfg.rank, cfg.train.seed)?;
            train_baseline(
                graph,
                params,
                data,
                cfg.n_records,
                n_prior,
                Trainable::Adapters(&fresh),
                &tc,
            )
        }
    }
}

/// `cfg.n_samples` images `[3, S, S]` for the instance prompt.
pub fn generate(cfg: &RunConfig, model: &EpsModel<'_>) -> Result<Vec<Tensor>> {
    let cond = embed(cfg, model.graph, &instance_prompt(cfg))?;
    let z = sample(model, &schedule(), &cond, cfg.n_samples, &cfg.sampler)?;
    split_images(&z)
}

pub fn split_images(z: &Tensor) -> Result<Vec<Tensor>> {
    (0..z.dims()[0])
        .map(|i| {
            let t = z.batch_item(i)?;
            t.reshape(&t.dims()[1..])
        })
        .collect()
}

/// Mean fidelity-proxy distance of `images` to the subject's instance images.
pub fn fidelity(subject: &Subject, images: &[Tensor]) -> Result<f64> {
    Ok(fidelity_proxy(images, &subject.data.instances)?.mean)
}
