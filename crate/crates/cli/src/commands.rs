//! One function per subcommand. Each writes its artifacts under the run root
//! plus a `<command>.manifest` that reloads to the same configuration.

use std::collections::BTreeMap;
use std::path::Path;

use hollownet::analysis::{
    block_weight_delta, memory_estimate, summarize_deltas, write_block_delta_csv, write_cost_csv, write_sweep_csv,
    SweepRow, WeightSet,
};
use hollownet::cache::{precompute, write_cache, ActivationCache, CacheKey, SampleSet};
use hollownet::hollow::{candidate_plans, count_params, HollowPlan};
use hollownet::inference::{write_image, EpsModel};
use hollownet::lora::{transfer_adapters, LoraAdapterSet};
use hollownet::model::{BlockGraph, ParamStore};
use hollownet::numerics::Tensor;
use hollownet::trainer::TrainMode;
use hollownet::{Error, Result};

use crate::config::RunConfig;
use crate::formats::{load_adapters, load_tensors, load_weights, save_adapters, save_tensors, save_weights};
use crate::pipeline::{self, Subject};
use crate::selftest;

pub const COMMANDS: [&str; 9] = [
    "plan",
    "pretrain",
    "precompute",
    "train",
    "transfer",
    "infer",
    "analyze",
    "sweep",
    "selftest",
];

/// 2 for configuration errors, 3 for missing or mismatched inputs, 4 for
/// numerical failures.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Plan(_) => 2,
        Error::Mismatch(_) | Error::Format { .. } | Error::Missing { .. } | Error::Adapter(_) | Error::Io(_) => 3,
        Error::Numerical(_) | Error::NonFinite { .. } | Error::Shape { .. } => 4,
    }
}

pub fn run(command: &str, cfg: &RunConfig) -> Result<()> {
    match command {
        "plan" => plan(cfg),
        "pretrain" => pretrain(cfg),
        "precompute" => precompute_cmd(cfg),
        "train" => train(cfg),
        "transfer" => transfer(cfg),
        "infer" => infer(cfg),
        "analyze" => analyze(cfg),
        "sweep" => sweep(cfg),
        "selftest" => selftest_cmd(),
        other => Err(Error::Config(format!("unknown command `{other}`"))),
    }?;
    if command != "selftest" {
        cfg.write_manifest(command)?;
    }
    Ok(())
}

fn gib(bytes: usize) -> f64 {
    bytes as f64 / (1u64 << 30) as f64
}

pub fn plan_table(graph: &BlockGraph, chosen: &HollowPlan, rank: usize) -> Result<String> {
    let mut plans = candidate_plans(graph);
    if !plans.iter().any(|p| p.removed == chosen.removed) {
        plans.push(chosen.clone());
    }
    let mut out = format!(
        "{:<2} {:>8} {:>14} {:>12}  removed\n",
        "", "fraction", "retained", "train GiB"
    );
    let full = memory_estimate(graph, None, rank, TrainMode::LoraFt)?;
    out.push_str(&format!(
        "{:<2} {:>7.1}% {:>14} {:>12.4}  (none, lora-ft)\n",
        "",
        0.0,
        count_params(graph, None).retained,
        gib(full.training_bytes())
    ));
    for p in &plans {
        let mem = memory_estimate(graph, Some(p), rank, TrainMode::Hollowed)?;
        let mark = if p.removed == chosen.removed { "*" } else { "" };
        out.push_str(&format!(
            "{:<2} {:>7.1}% {:>14} {:>12.4}  {}\n",
            mark,
            100.0 * p.fraction,
            count_params(graph, Some(p)).retained,
            gib(mem.training_bytes()),
            p.label_list()
        ));
    }
    Ok(out)
}

fn plan(cfg: &RunConfig) -> Result<()> {
    let graph = pipeline::graph(cfg)?;
    let chosen = cfg.plan.build(&graph)?;
    print!("{}", plan_table(&graph, &chosen, cfg.rank)?);
    Ok(())
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn pretrain(cfg: &RunConfig) -> Result<()> {
    let graph = pipeline::graph(cfg)?;
    let (params, history) = pipeline::pretrain(cfg, &graph)?;
    create_parent(&cfg.base_path)?;
    save_weights(&cfg.base_path, &params)?;
    history.write_csv(&cfg.out("pretrain_loss.csv"))?;
    if let Some((first, last)) = history.first_last((history.rows.len() / 5).clamp(1, 50)) {
        println!("pretrain loss {first:.4} -> {last:.4}");
    }
    println!("wrote {}", cfg.base_path.display());
    Ok(())
}

/// Fails with a missing-artifact error naming `path` and the command that makes it.
fn require(path: &Path, made_by: &'static str) -> Result<()> {
    if path.exists() {
        return Ok(());
    }
    Err(Error::Missing {
        what: made_by,
        name: path.display().to_string(),
    })
}

fn load_base(cfg: &RunConfig, graph: &BlockGraph) -> Result<ParamStore> {
    require(&cfg.base_path, "`pretrain` output")?;
    load_weights(&cfg.base_path, graph)
}

fn prior_name(i: usize) -> String {
    format!("prior.{i:04}")
}

fn save_priors(path: &Path, priors: &SampleSet) -> Result<()> {
    let map: BTreeMap<String, Tensor> = priors
        .latents
        .iter()
        .enumerate()
        .map(|(i, t)| (prior_name(i), t.clone()))
        .collect();
    create_parent(path)?;
    save_tensors(path, &map)
}

fn load_priors(cfg: &RunConfig, graph: &BlockGraph) -> Result<SampleSet> {
    require(&cfg.priors_path, "`precompute` output")?;
    let map = load_tensors(&cfg.priors_path)?;
    let latents: Vec<Tensor> = (0..map.len())
        .map(|i| {
            map.get(&prior_name(i))
                .cloned()
                .ok_or_else(|| Error::Mismatch(format!("{}: missing `{}`", cfg.priors_path.display(), prior_name(i))))
        })
        .collect::<Result<_>>()?;
    pipeline::prior_set_from(cfg, graph, latents)
}

fn wants_priors(cfg: &RunConfig) -> bool {
    cfg.train.lambda > 0.0 && cfg.n_prior > 0 && cfg.n_prior_samples > 0
}

/// The subject with priors read back from the precompute stage.
fn stored_subject(cfg: &RunConfig, graph: &BlockGraph) -> Result<Subject> {
    let data = pipeline::subject_images(cfg, graph)?;
    let instances = pipeline::instance_set(cfg, graph, &data)?;
    let priors = if wants_priors(cfg) {
        Some(load_priors(cfg, graph)?)
    } else {
        None
    };
    Ok(Subject {
        data,
        instances,
        priors,
    })
}

fn precompute_cmd(cfg: &RunConfig) -> Result<()> {
    let graph = pipeline::graph(cfg)?;
    let plan = cfg.plan.build(&graph)?;
    let params = load_base(cfg, &graph)?;
    let subject = pipeline::subject(cfg, &graph, &params)?;
    if let Some(p) = &subject.priors {
        save_priors(&cfg.priors_path, p)?;
    }
    let schedule = pipeline::schedule();
    let n_prior = if subject.priors.is_some() { cfg.n_prior } else { 0 };
    let records = precompute(
        &graph,
        &params,
        &plan,
        &schedule,
        &subject.instances,
        subject.priors.as_ref(),
        cfg.n_records,
        n_prior,
        cfg.cache_seed,
    )?;
    create_parent(&cfg.cache_path)?;
    write_cache(
        &cfg.cache_path,
        CacheKey::new(&graph, &params, &plan, &schedule),
        &records,
    )?;
    println!(
        "wrote {} records ({} instance, {n_prior} prior) to {}",
        records.len(),
        cfg.n_records,
        cfg.cache_path.display()
    );
    Ok(())
}

fn train(cfg: &RunConfig) -> Result<()> {
    let graph = pipeline::graph(cfg)?;
    let params = load_base(cfg, &graph)?;
    create_parent(&cfg.adapters_path)?;
    match cfg.train.mode {
        TrainMode::Hollowed => {
            let plan = cfg.plan.build(&graph)?;
            require(&cfg.cache_path, "`precompute` output")?;
            let cache = ActivationCache::open(&cfg.cache_path)?;
            let subject = stored_subject(cfg, &graph)?;
            let key = CacheKey::new(&graph, &params, &plan, &pipeline::schedule());
            let run = pipeline::train_with_cache(cfg, &graph, &params, &plan, &subject, &key, &cache)?;
            run.outcome.history.write_csv(&cfg.out("train_loss.csv"))?;
            save_adapters(&cfg.adapters_path, &run.outcome.adapters)?;
            println!(
                "cached instance loss {:.4} -> {:.4}; wrote {}",
                run.loss_before,
                run.loss_after,
                cfg.adapters_path.display()
            );
        }
        mode => {
            let subject = if wants_priors(cfg) && cfg.priors_path.exists() {
                stored_subject(cfg, &graph)?
            } else {
                pipeline::subject(cfg, &graph, &params)?
            };
            let out = pipeline::run_baseline(cfg, &graph, &params, &subject, mode)?;
            out.history.write_csv(&cfg.out("train_loss.csv"))?;
            if let Some(a) = &out.adapters {
                save_adapters(&cfg.adapters_path, a)?;
                println!("wrote {}", cfg.adapters_path.display());
            }
            if let Some(p) = &out.params {
                create_parent(&cfg.weights_path)?;
                save_weights(&cfg.weights_path, p)?;
                println!("wrote {}", cfg.weights_path.display());
            }
        }
    }
    Ok(())
}

fn transfer(cfg: &RunConfig) -> Result<()> {
    let graph = pipeline::graph(cfg)?;
    let plan = cfg.plan.build(&graph)?;
    require(&cfg.adapters_path, "`train` output")?;
    let trained = load_adapters(&cfg.adapters_path, &graph)?;
    let moved = transfer_adapters(&trained, &graph, &plan)?;
    create_parent(&cfg.transferred_path)?;
    save_adapters(&cfg.transferred_path, &moved)?;
    println!("wrote {}", cfg.transferred_path.display());
    Ok(())
}

fn write_samples(dir: &Path, prefix: &str, images: &[Tensor]) -> Result<()> {
    for (i, im) in images.iter().enumerate() {
        write_image(&dir.join(format!("{prefix}-{i}.ppm")), im)?;
    }
    Ok(())
}

fn infer(cfg: &RunConfig) -> Result<()> {
    let graph = pipeline::graph(cfg)?;
    let base = load_base(cfg, &graph)?;
    let data = pipeline::subject_images(cfg, &graph)?;
    let instances = pipeline::instance_set(cfg, &graph, &data)?;
    let subject = Subject {
        data,
        instances,
        priors: None,
    };
    std::fs::create_dir_all(&cfg.samples_dir)?;
    let plain = EpsModel {
        graph: &graph,
        params: &base,
        adapters: None,
        plan: None,
    };
    let base_images = pipeline::generate(cfg, &plain)?;
    write_samples(&cfg.samples_dir, "base", &base_images)?;

    let mode = cfg.train.mode;
    let tuned_images = match mode {
        TrainMode::Hollowed => {
            let plan = cfg.plan.build(&graph)?;
            require(&cfg.transferred_path, "`transfer` output")?;
            let set = load_adapters(&cfg.transferred_path, &graph)?;
            let model = EpsModel {
                adapters: Some(&set),
                plan: Some(&plan),
                ..plain
            };
            pipeline::generate(cfg, &model)?
        }
        TrainMode::LoraFt => {
            require(&cfg.adapters_path, "`train` output")?;
            let set: LoraAdapterSet = load_adapters(&cfg.adapters_path, &graph)?;
            pipeline::generate(
                cfg,
                &EpsModel {
                    adapters: Some(&set),
                    ..plain
                },
            )?
        }
        TrainMode::FullFt => {
            require(&cfg.weights_path, "`train` output")?;
            let tuned = load_weights(&cfg.weights_path, &graph)?;
            pipeline::generate(
                cfg,
                &EpsModel {
                    params: &tuned,
                    ..plain
                },
            )?
        }
    };
    write_samples(&cfg.samples_dir, mode.name(), &tuned_images)?;

    let base_fid = pipeline::fidelity(&subject, &base_images)?;
    let tuned_fid = pipeline::fidelity(&subject, &tuned_images)?;
    std::fs::write(
        cfg.out("fidelity.csv"),
        format!(
            "model,fidelity_proxy\nbase,{base_fid:.6}\n{},{tuned_fid:.6}\n",
            mode.name()
        ),
    )?;
    println!(
        "fidelity proxy (lower is closer): base {base_fid:.4}, {} {tuned_fid:.4}",
        mode.name()
    );
    Ok(())
}

fn analyze(cfg: &RunConfig) -> Result<()> {
    let graph = pipeline::graph(cfg)?;
    let plan = cfg.plan.build(&graph)?;
    let reports = vec![
        (
            "full-ft".to_string(),
            memory_estimate(&graph, None, cfg.rank, TrainMode::FullFt)?,
        ),
        (
            "lora-ft".to_string(),
            memory_estimate(&graph, None, cfg.rank, TrainMode::LoraFt)?,
        ),
        (
            format!("hollowed {}", plan.label_list()),
            memory_estimate(&graph, Some(&plan), cfg.rank, TrainMode::Hollowed)?,
        ),
    ];
    std::fs::create_dir_all(&cfg.root)?;
    write_cost_csv(&cfg.out("cost_report.csv"), &reports)?;
    for (name, r) in &reports {
        println!(
            "{name:<24} training {:.4} GiB ({:.2}x inference)",
            gib(r.training_bytes()),
            r.ratio_to_inference()
        );
    }

    let mut deltas = Vec::new();
    if let Some(path) = [&cfg.transferred_path, &cfg.adapters_path]
        .into_iter()
        .find(|p| p.exists())
    {
        let set = load_adapters(path, &graph)?;
        let mut zero = set.clone();
        zero.set_tensors(
            &set.tensors()
                .into_iter()
                .map(|(k, t)| (k, Tensor::zeros(t.dims())))
                .collect(),
        )?;
        deltas.push(block_weight_delta(
            WeightSet::Adapters(&zero),
            WeightSet::Adapters(&set),
            &graph,
        )?);
    }
    if cfg.weights_path.exists() && cfg.base_path.exists() {
        let before = load_base(cfg, &graph)?;
        let after = load_weights(&cfg.weights_path, &graph)?;
        deltas.push(block_weight_delta(
            WeightSet::Weights(&before),
            WeightSet::Weights(&after),
            &graph,
        )?);
    }
    if !deltas.is_empty() {
        write_block_delta_csv(&cfg.out("block_delta.csv"), &summarize_deltas(&deltas)?)?;
        println!("wrote {}", cfg.out("block_delta.csv").display());
    }
    Ok(())
}

fn sweep_key(axis: &str) -> &'static str {
    match axis {
        "fraction" => "plan.fraction",
        "rank" => "lora.rank",
        _ => "cache.n_records",
    }
}

fn sweep(cfg: &RunConfig) -> Result<()> {
    let graph = pipeline::graph(cfg)?;
    let params = load_base(cfg, &graph)?;
    let subject = pipeline::subject(cfg, &graph, &params)?;
    let mut rows = Vec::new();
    for v in &cfg.sweep_values {
        let mut raw = cfg.raw.clone();
        raw.set(sweep_key(&cfg.sweep_axis), &v.to_string())?;
        let point = RunConfig::from_raw(raw)?;
        let plan = point.plan.build(&graph)?;
        let run = pipeline::run_hollowed(&point, &graph, &params, &plan, &subject)?;
        let model = EpsModel {
            graph: &graph,
            params: &params,
            adapters: Some(&run.transferred),
            plan: Some(&plan),
        };
        let images = pipeline::generate(&point, &model)?;
        let mem = memory_estimate(&graph, Some(&plan), point.rank, TrainMode::Hollowed)?;
        let row = SweepRow {
            value: v.to_string(),
            training_bytes: mem.training_bytes(),
            fidelity: pipeline::fidelity(&subject, &images)?,
            final_loss: run.loss_after,
        };
        println!(
            "{} = {}: {} bytes, fidelity {:.4}, loss {:.4}",
            cfg.sweep_axis, row.value, row.training_bytes, row.fidelity, row.final_loss
        );
        rows.push(row);
    }
    std::fs::create_dir_all(&cfg.root)?;
    let path = cfg.out(&format!("sweep_{}.csv", cfg.sweep_axis));
    write_sweep_csv(&path, &cfg.sweep_axis, &rows)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn selftest_cmd() -> Result<()> {
    let checks = selftest::run_all()?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if failed > 0 {
        return Err(Error::Numerical(format!(
            "{failed} of {} self-checks failed",
            checks.len()
        )));
    }
    println!("all {} self-checks passed", checks.len());
    Ok(())
}
