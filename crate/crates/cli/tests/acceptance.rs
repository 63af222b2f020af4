//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use hollownet::analysis::{early_repeat_flops, flops_estimate, memory_estimate, Stage};
use hollownet::cache::{precompute, replay, write_cache, ActivationCache, CacheKey};
use hollownet::hash::digest64;
use hollownet::hollow::{count_params, parse_plan, HollowPlan};
use hollownet::inference::EpsModel;
use hollownet::lora::adapter_param_count;
use hollownet::model::{ArchConfig, BlockGraph, ParamStore};
use hollownet::trainer::TrainMode;
use hollownet::{Error, Result};
use hollownet_cli::commands;
use hollownet_cli::config::RunConfig;
use hollownet_cli::formats::{load_weights, save_weights};
use hollownet_cli::pipeline::{self, Subject};
use hollownet_cli::selftest;

const APPENDIX_PLANS: [(&str, f64); 7] = [
    ("5-1,5-2", 0.115),
    ("4-2,5-1,5-2,6-1", 0.208),
    ("4-1,4-2,5-1,5-2,6-1,6-2", 0.301),
    ("3-3,4-1,4-2,5-1,5-2,6-1,6-2,6-3,6-4", 0.392),
    ("3-2,3-3,4-1,4-2,5-1,5-2,6-1,6-2,6-3,6-4,7-1", 0.566),
    ("3-1,3-2,3-3,4-1,4-2,5-1,5-2,6-1,6-2,6-3,6-4,7-1,7-2", 0.733),
    ("2-3,3-1,3-2,3-3,4-1,4-2,5-1,5-2,6-1,6-2,6-3,6-4,7-1,7-2,7-3,7-4", 0.843),
];
const FRACTION_TOL: f64 = 0.015;
const TOTAL_PARAMS: f64 = 866e6;
const RETAINED_PARAMS: f64 = 527e6;
const PARAM_TOL: f64 = 0.03;
const ADAPTERS_FULL: f64 = 27e6;
const ADAPTERS_PLAN: f64 = 24e6;
const ADAPTER_TOL: f64 = 0.10;
const ADAPTER_RANK: usize = 128;

const BENCH_SEEDS: [u64; 3] = [0, 1, 2];
const BENCH_STEPS: &str = "300";
const BENCH_RANK: &str = "16";
const BENCH_RECORDS: &str = "200";
const BENCH_LR: &str = "0.003";
const BENCH_BATCH: &str = "4";
const MIN_LOSS_DROP: f64 = 0.30;
const MAX_FIDELITY_GAP: f64 = 0.15;
const BENCH_BUDGET: Duration = Duration::from_secs(600);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        passed,
        detail: detail.into(),
    })
}

fn sd21() -> Result<(BlockGraph, Vec<HollowPlan>)> {
    let g = BlockGraph::new(&ArchConfig::sd21_shaped())?;
    let plans = APPENDIX_PLANS
        .iter()
        .map(|(l, _)| parse_plan(&g, l))
        .collect::<Result<_>>()?;
    Ok((g, plans))
}

fn rel(got: f64, want: f64) -> f64 {
    (got / want - 1.0).abs()
}

fn fractions() -> Result<Outcome> {
    let (g, plans) = sd21()?;
    let mut worst = 0.0f64;
    let mut got = Vec::new();
    for (p, (_, want)) in plans.iter().zip(APPENDIX_PLANS) {
        let f = count_params(&g, Some(p)).fraction;
        worst = worst.max((f - want).abs());
        got.push(format!("{:.1}", 100.0 * f));
    }
    let total = count_params(&g, None).total as f64;
    let retained = count_params(&g, Some(&plans[3])).retained as f64;
    outcome(
        worst <= FRACTION_TOL && rel(total, TOTAL_PARAMS) <= PARAM_TOL && rel(retained, RETAINED_PARAMS) <= PARAM_TOL,
        format!(
            "fractions [{}]%, worst off by {:.2} pp; total {:.1}M, retained {:.1}M",
            got.join(", "),
            100.0 * worst,
            total / 1e6,
            retained / 1e6
        ),
    )
}

fn adapter_counts() -> Result<Outcome> {
    let (g, plans) = sd21()?;
    let full = adapter_param_count(&g, None, ADAPTER_RANK) as f64;
    let hollow = adapter_param_count(&g, Some(&plans[3]), ADAPTER_RANK) as f64;
    outcome(
        rel(full, ADAPTERS_FULL) <= ADAPTER_TOL && rel(hollow, ADAPTERS_PLAN) <= ADAPTER_TOL,
        format!(
            "rank {ADAPTER_RANK}: full {:.1}M, 39.2% plan {:.1}M",
            full / 1e6,
            hollow / 1e6
        ),
    )
}

fn checks(list: Vec<selftest::Check>) -> Result<Outcome> {
    let passed = list.iter().all(|c| c.passed);
    let detail: Vec<String> = list.iter().map(|c| format!("{}: {}", c.name, c.detail)).collect();
    outcome(passed, detail.join("; "))
}

fn gradients() -> Result<Outcome> {
    let mut list = selftest::gradients()?;
    let footprint = selftest::transfer_equivalence()?;
    list.extend(footprint.into_iter().filter(|c| c.name == "gradient footprint"));
    let passed = list.iter().all(|c| c.passed);
    let cases = list
        .iter()
        .filter(|c| c.name.starts_with("gradient ") && c.name != "gradient footprint")
        .count();
    let footprint = list.last().map(|c| c.detail.clone()).unwrap_or_default();
    outcome(
        passed,
        format!(
            "{cases} op/stack cases at h = {}, tol {}; {footprint}",
            selftest::GRAD_H,
            selftest::GRAD_TOL
        ),
    )
}

fn orderings() -> Result<Outcome> {
    let (g, plans) = sd21()?;
    let full = memory_estimate(&g, None, ADAPTER_RANK, TrainMode::FullFt)?.training_bytes();
    let lora = memory_estimate(&g, None, ADAPTER_RANK, TrainMode::LoraFt)?.training_bytes();
    let mut ok = full > lora;
    let mut last = lora;
    let lora_flops = flops_estimate(&g, None, Stage::Finetune, ADAPTER_RANK)?;
    for p in &plans {
        let h = memory_estimate(&g, Some(p), ADAPTER_RANK, TrainMode::Hollowed)?.training_bytes();
        ok &= h < last;
        last = h;
        ok &= flops_estimate(&g, Some(p), Stage::Finetune, ADAPTER_RANK)? < lora_flops;
        let plain = flops_estimate(&g, Some(p), Stage::InferencePlain, ADAPTER_RANK)?;
        let two = flops_estimate(&g, Some(p), Stage::InferenceTwoPath, ADAPTER_RANK)?;
        ok &= two - plain == early_repeat_flops(&g, p)?;
    }
    let h39 = memory_estimate(&g, Some(&plans[3]), ADAPTER_RANK, TrainMode::Hollowed)?.training_bytes();
    outcome(
        ok,
        format!(
            "training bytes full {:.2} GiB > lora {:.2} GiB > hollowed(39.2%) {:.2} GiB; decreasing over 7 plans; \
             hollowed step < lora step; two-path overhead = early repeat",
            full as f64 / 1073741824.0,
            lora as f64 / 1073741824.0,
            h39 as f64 / 1073741824.0
        ),
    )
}

fn small_config(root: &Path, extra: &[&str]) -> Result<RunConfig> {
    let mut o: Vec<String> = [
        "--pretrain.steps=6",
        "--pretrain.batch=2",
        "--prior.n=4",
        "--cache.n_prior=4",
        "--cache.n_records=12",
        "--train.steps=4",
        "--sampler.steps=4",
        "--sampler.n=2",
        "--sweep.values=0.2,0.4",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    o.push(format!("--paths.root={}", root.display()));
    o.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::load(None, &o)
}

fn cache_integrity() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let cfg = small_config(dir.path(), &[])?;
    let graph = pipeline::graph(&cfg)?;
    let params = ParamStore::init(&graph, 5);
    let plan = cfg.plan.build(&graph)?;
    let subject = pipeline::subject(&cfg, &graph, &params)?;
    let schedule = pipeline::schedule();
    let records = precompute(
        &graph,
        &params,
        &plan,
        &schedule,
        &subject.instances,
        subject.priors.as_ref(),
        cfg.n_records,
        cfg.n_prior,
        cfg.cache_seed,
    )?;
    let key = CacheKey::new(&graph, &params, &plan, &schedule);
    let path = dir.path().join("c.hnac");
    write_cache(&path, key, &records)?;
    let cache = ActivationCache::open(&path)?;
    let back = cache.records()?;
    let round_trip = back.len() == records.len()
        && back.iter().zip(&records).all(|(a, b)| {
            a.sample_id == b.sample_id
                && a.kind == b.kind
                && a.timestep == b.timestep
                && a.noise_seed == b.noise_seed
                && a.prompt_id == b.prompt_id
                && a.tap.bit_eq(&b.tap)
        });
    let mut replayed = 0;
    for r in &back {
        let set = match r.kind {
            hollownet::cache::SampleKind::Instance => &subject.instances,
            hollownet::cache::SampleKind::Prior => subject.priors.as_ref().expect("priors"),
        };
        if replay(&graph, &params, &plan, &schedule, set, r)?.bit_eq(&r.tap) {
            replayed += 1;
        }
    }
    let other_params = ParamStore::init(&graph, 6);
    let other_plan = parse_plan(&graph, "3-1,3-2")?;
    let stale_weights = cache.check(&CacheKey::new(&graph, &other_params, &plan, &schedule));
    let stale_plan = cache.check(&CacheKey::new(&graph, &params, &other_plan, &schedule));
    let rejected = matches!(stale_weights, Err(Error::Mismatch(_))) && matches!(stale_plan, Err(Error::Mismatch(_)));
    outcome(
        round_trip && replayed == records.len() && rejected && cache.check(&key).is_ok(),
        format!(
            "{} records round-trip bit-exact: {round_trip}; {replayed} replayed bitwise; stale weights/plan rejected: {rejected}",
            records.len()
        ),
    )
}

/// Files under `dir` with manifests reduced to their config lines.
fn snapshot(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let name = p.strip_prefix(dir).expect("under dir").display().to_string();
            let mut bytes = std::fs::read(&p)?;
            if name.ends_with(".manifest") {
                let text = String::from_utf8_lossy(&bytes).into_owned();
                let kept: Vec<&str> = text
                    .lines()
                    .filter(|l| !l.starts_with("# unix time") && !l.starts_with("paths.root"))
                    .collect();
                bytes = kept.join("\n").into_bytes();
            }
            files.insert(name, bytes);
        }
    }
    Ok(files)
}

fn determinism() -> Result<Outcome> {
    let mut snaps = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir()?;
        let cfg = small_config(dir.path(), &[])?;
        for c in [
            "pretrain",
            "precompute",
            "train",
            "transfer",
            "infer",
            "analyze",
            "sweep",
        ] {
            commands::run(c, &cfg)?;
        }
        let lora = small_config(dir.path(), &["--train.mode=lora-ft", "--paths.adapters=lora.hnlr"])?;
        for c in ["train", "infer"] {
            commands::run(c, &lora)?;
        }
        snaps.push(snapshot(dir.path())?);
    }
    let (a, b) = (&snaps[0], &snaps[1]);
    let differing: Vec<&String> = a.keys().filter(|k| b.get(*k) != a.get(*k)).collect();
    outcome(
        a.keys().eq(b.keys()) && differing.is_empty(),
        format!(
            "{} artifacts from pretrain..sweep and lora-ft, {} differ{}",
            a.len(),
            differing.len(),
            if differing.is_empty() {
                String::new()
            } else {
                format!(": {differing:?}")
            }
        ),
    )
}

struct SeedResult {
    loss_drop: f64,
    window_drop: f64,
    base: f64,
    hollowed: f64,
    lora: f64,
}

fn bench_config(seed: u64) -> Result<RunConfig> {
    let s = seed.to_string();
    let o: Vec<String> = [
        ("train.steps", BENCH_STEPS),
        ("lora.rank", BENCH_RANK),
        ("cache.n_records", BENCH_RECORDS),
        ("train.lr", BENCH_LR),
        ("train.batch", BENCH_BATCH),
        ("train.seed", &s),
        ("subject.seed", &s),
        ("cache.seed", &s),
        ("sampler.seed", &s),
        ("paths.root", "."),
    ]
    .iter()
    .map(|(k, v)| format!("--{k}={v}"))
    .collect();
    RunConfig::load(None, &o)
}

/// The shared frozen base, kept between runs of this suite under the target
/// directory and keyed by the pretraining settings.
fn base_model(cfg: &RunConfig, graph: &BlockGraph) -> Result<(ParamStore, String)> {
    let tag = format!("{}|{:?}|{}", graph.config.canonical(), cfg.pretrain, cfg.table_seed);
    let path = Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("base-{:016x}.hnwt", digest64(tag.as_bytes())));
    if path.exists() {
        if let Ok(p) = load_weights(&path, graph) {
            return Ok((p, format!("base loaded from {}", path.display())));
        }
    }
    let t = Instant::now();
    let (params, history) = pipeline::pretrain(cfg, graph)?;
    save_weights(&path, &params)?;
    let (first, last) = history.first_last(100).unwrap_or_default();
    Ok((
        params,
        format!(
            "base pretrained in {:.0} s ({} steps, loss {first:.4} -> {last:.4})",
            t.elapsed().as_secs_f64(),
            cfg.pretrain.steps
        ),
    ))
}

fn personalization() -> Result<Outcome> {
    let cfg0 = bench_config(BENCH_SEEDS[0])?;
    let graph = pipeline::graph(&cfg0)?;
    let (params, base_note) = base_model(&cfg0, &graph)?;
    let plan = cfg0.plan.build(&graph)?;

    let start = Instant::now();
    // class priors depend only on the base and the class prompt
    let priors = pipeline::prior_set_from(&cfg0, &graph, pipeline::generate_priors(&cfg0, &graph, &params)?)?;
    let mut rows = Vec::new();
    for seed in BENCH_SEEDS {
        let cfg = bench_config(seed)?;
        let data = pipeline::subject_images(&cfg, &graph)?;
        let instances = pipeline::instance_set(&cfg, &graph, &data)?;
        let subject = Subject {
            data,
            instances,
            priors: Some(priors.clone()),
        };
        let run = pipeline::run_hollowed(&cfg, &graph, &params, &plan, &subject)?;
        let lora = pipeline::run_baseline(&cfg, &graph, &params, &subject, TrainMode::LoraFt)?;
        let lora_set = lora.adapters.expect("lora-ft trains adapters");

        let plain = EpsModel {
            graph: &graph,
            params: &params,
            adapters: None,
            plan: None,
        };
        let base_images = pipeline::generate(&cfg, &plain)?;
        let hollow_images = pipeline::generate(
            &cfg,
            &EpsModel {
                adapters: Some(&run.transferred),
                plan: Some(&plan),
                ..plain
            },
        )?;
        let lora_images = pipeline::generate(
            &cfg,
            &EpsModel {
                adapters: Some(&lora_set),
                ..plain
            },
        )?;
        let (w0, w1) = run.outcome.history.first_last(50).unwrap_or_default();
        let row = SeedResult {
            loss_drop: 1.0 - run.loss_after / run.loss_before,
            window_drop: 1.0 - w1 / w0,
            base: pipeline::fidelity(&subject, &base_images)?,
            hollowed: pipeline::fidelity(&subject, &hollow_images)?,
            lora: pipeline::fidelity(&subject, &lora_images)?,
        };
        println!(
            "    seed {seed}: cached loss {:.4} -> {:.4} ({:.1}% drop, training window {:.1}%), \
             fidelity base {:.4} hollowed {:.4} lora-ft {:.4}",
            run.loss_before,
            run.loss_after,
            100.0 * row.loss_drop,
            100.0 * row.window_drop,
            row.base,
            row.hollowed,
            row.lora
        );
        rows.push(row);
    }
    let elapsed = start.elapsed();
    let n = rows.len() as f64;
    let mean = |f: fn(&SeedResult) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let drop = mean(|r| r.loss_drop);
    let (base, hollowed, lora) = (mean(|r| r.base), mean(|r| r.hollowed), mean(|r| r.lora));
    let gap = (hollowed - lora).abs() / lora;
    let a = drop >= MIN_LOSS_DROP;
    let b = hollowed < base;
    let c = gap <= MAX_FIDELITY_GAP;
    let fast = elapsed <= BENCH_BUDGET;
    outcome(
        a && b && c && fast,
        format!(
            "(a) mean loss drop {:.1}% [{}]; (b) fidelity hollowed {hollowed:.4} vs base {base:.4} (lower is closer) [{}]; \
             (c) gap to lora-ft {lora:.4} is {:.1}% [{}]; benchmark {:.0} s [{}]; {base_note}",
            100.0 * drop,
            if a { "ok" } else { "fail" },
            if b { "ok" } else { "fail" },
            100.0 * gap,
            if c { "ok" } else { "fail" },
            elapsed.as_secs_f64(),
            if fast { "ok" } else { "fail" },
        ),
    )
}

fn main() {
    hollownet_cli::tune_allocator();
    let criteria: [(&str, fn() -> Result<Outcome>); 9] = [
        ("fraction reproduction", fractions),
        ("adapter counts", adapter_counts),
        ("splice identity", || checks(selftest::splice_identity()?)),
        ("transfer/inference equivalence", || {
            checks(
                selftest::transfer_equivalence()?
                    .into_iter()
                    .filter(|c| c.name == "transfer equivalence")
                    .collect(),
            )
        }),
        ("gradient correctness", gradients),
        ("memory/FLOPs orderings", orderings),
        ("end-to-end toy personalization", personalization),
        ("cache integrity", cache_integrity),
        ("determinism", determinism),
    ];
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if filter.as_ref().is_some_and(|f| *f != id && !name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let (passed, detail) = match run() {
            Ok(o) => (o.passed, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!passed);
        println!(
            "criterion {id} {name}: {} ({:.1} s) {detail}",
            if passed { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
