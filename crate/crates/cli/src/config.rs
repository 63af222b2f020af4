//! Flat `section.key = value` run configuration.
//!
//! A file holds one assignment per line; `#` starts a comment. Command-line
//! overrides use the same keys as `--section.key=value`. Relative paths are
//! resolved against `paths.root`, which defaults to `$HOLLOW_HOME` or `runs`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use hollownet::hollow::{make_plan_for_fraction, parse_plan, HollowPlan};
use hollownet::inference::{SamplerConfig, SamplerKind};
use hollownet::model::{ArchConfig, BlockGraph};
use hollownet::trainer::{PretrainConfig, TrainConfig, TrainMode};
use hollownet::{Error, Result};

pub const HOME_VAR: &str = "HOLLOW_HOME";

/// Every accepted key with its default, in manifest order.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("arch.preset", "toy16"),
    ("plan.removed", "2-2,3-1,3-2,4-1"),
    ("plan.fraction", ""),
    ("lora.rank", "16"),
    ("pretrain.steps", "1500"),
    ("pretrain.batch", "8"),
    ("pretrain.lr", "0.002"),
    ("pretrain.seed", "1"),
    ("subject.class", "circle"),
    ("subject.seed", "0"),
    ("subject.n_images", "0"),
    ("prompt.table_seed", "7"),
    ("prior.n", "50"),
    ("train.mode", "hollowed"),
    ("train.steps", "300"),
    ("train.lr", "0.003"),
    ("train.lambda", "1.0"),
    ("train.batch", "1"),
    ("train.seed", "0"),
    ("cache.n_records", "200"),
    ("cache.n_prior", "50"),
    ("cache.seed", "0"),
    ("cache.path", "cache.hnac"),
    ("sampler.kind", "ddim"),
    ("sampler.steps", "50"),
    ("sampler.guidance", "1.0"),
    ("sampler.seed", "0"),
    ("sampler.clip", "true"),
    ("sampler.n", "6"),
    ("sweep.axis", "fraction"),
    ("sweep.values", "0.2,0.39,0.57"),
    ("paths.root", ""),
    ("paths.base", "base.hnwt"),
    ("paths.priors", "priors.hnwt"),
    ("paths.adapters", "adapters.hnlr"),
    ("paths.transferred", "transferred.hnlr"),
    ("paths.weights", "finetuned.hnwt"),
    ("paths.samples", "samples"),
];

/// Raw key/value assignments, checked against [`DEFAULTS`].
#[derive(Clone, Debug, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl Default for RawConfig {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|&(k, v)| (k.to_owned(), v.to_owned())).collect(),
        }
    }
}

impl RawConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.to_owned();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key `{key}`"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .expect("key listed in DEFAULTS")
    }

    /// Applies the assignments in `text` on top of the current values.
    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.merge_text(&text, &path.display().to_string())
    }

    /// Applies one `--section.key=value` argument.
    pub fn apply_override(&mut self, arg: &str) -> Result<()> {
        let body = arg
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected --section.key=value, got `{arg}`")))?;
        let (k, v) = body
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{arg}` has no value")))?;
        self.set(k, v)
    }

    /// Config text that reproduces these values, in [`DEFAULTS`] order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, _) in DEFAULTS {
            let _ = writeln!(out, "{k} = {}", self.get(k));
        }
        out
    }
}

fn parse<T: FromStr>(raw: &RawConfig, key: &str) -> Result<T> {
    let v = raw.get(key);
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}` has invalid value `{v}`")))
}

/// How the removed region is chosen.
#[derive(Clone, Debug, PartialEq)]
pub enum PlanChoice {
    Labels(String),
    Fraction(f64),
}

impl PlanChoice {
    pub fn build(&self, graph: &BlockGraph) -> Result<HollowPlan> {
        match self {
            PlanChoice::Labels(list) => parse_plan(graph, list),
            PlanChoice::Fraction(f) => make_plan_for_fraction(graph, *f),
        }
    }
}

/// Resolved, typed configuration.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub raw: RawConfig,
    pub arch: ArchConfig,
    pub plan: PlanChoice,
    pub rank: usize,
    pub pretrain: PretrainConfig,
    pub class: String,
    pub subject_seed: u64,
    /// `None` draws 4 to 6 from the subject seed.
    pub n_images: Option<usize>,
    pub table_seed: u64,
    pub n_prior_samples: usize,
    pub train: TrainConfig,
    pub n_records: usize,
    pub n_prior: usize,
    pub cache_seed: u64,
    pub sampler: SamplerConfig,
    pub n_samples: usize,
    pub sweep_axis: String,
    pub sweep_values: Vec<f64>,
    pub root: PathBuf,
    pub cache_path: PathBuf,
    pub base_path: PathBuf,
    pub priors_path: PathBuf,
    pub adapters_path: PathBuf,
    pub transferred_path: PathBuf,
    pub weights_path: PathBuf,
    pub samples_dir: PathBuf,
}

impl RunConfig {
    pub fn from_raw(raw: RawConfig) -> Result<Self> {
        let arch = ArchConfig::preset(raw.get("arch.preset"))?;
        let plan = match (raw.get("plan.removed"), raw.get("plan.fraction")) {
            (_, f) if !f.is_empty() => PlanChoice::Fraction(parse(&raw, "plan.fraction")?),
            (l, _) if !l.is_empty() => PlanChoice::Labels(l.to_owned()),
            _ => return Err(Error::Config("set plan.removed or plan.fraction".into())),
        };
        let mode = TrainMode::parse(raw.get("train.mode"))?;
        let train = TrainConfig {
            steps: parse(&raw, "train.steps")?,
            lr: parse(&raw, "train.lr")?,
            lambda: parse(&raw, "train.lambda")?,
            batch: parse(&raw, "train.batch")?,
            seed: parse(&raw, "train.seed")?,
            rank: parse(&raw, "lora.rank")?,
            ..TrainConfig::new(mode)
        };
        train.validate()?;
        let pretrain = PretrainConfig {
            steps: parse(&raw, "pretrain.steps")?,
            batch: parse(&raw, "pretrain.batch")?,
            lr: parse(&raw, "pretrain.lr")?,
            seed: parse(&raw, "pretrain.seed")?,
        };
        if pretrain.batch == 0 {
            return Err(Error::Config("pretrain.batch must be positive".into()));
        }
        let clip = match raw.get("sampler.clip") {
            "true" => true,
            "false" => false,
            v => {
                return Err(Error::Config(format!(
                    "`sampler.clip` must be true or false, got `{v}`"
                )))
            }
        };
        let sampler = SamplerConfig {
            kind: SamplerKind::parse(raw.get("sampler.kind"))?,
            steps: parse(&raw, "sampler.steps")?,
            guidance: parse(&raw, "sampler.guidance")?,
            seed: parse(&raw, "sampler.seed")?,
            clip,
        };
        let class = raw.get("subject.class").to_owned();
        crate::dataset::class_index(&class)?;
        let n_images = match parse::<usize>(&raw, "subject.n_images")? {
            0 => None,
            n => Some(n),
        };
        let sweep_values = raw
            .get("sweep.values")
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("`sweep.values` entry `{s}` is not a number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let sweep_axis = raw.get("sweep.axis").to_owned();
        if !["fraction", "rank", "n_records"].contains(&sweep_axis.as_str()) {
            return Err(Error::Config(format!(
                "`sweep.axis` must be fraction, rank or n_records, got `{sweep_axis}`"
            )));
        }
        let root = match raw.get("paths.root") {
            "" => std::env::var_os(HOME_VAR).map_or_else(|| PathBuf::from("runs"), PathBuf::from),
            r => PathBuf::from(r),
        };
        let at = |key: &str| {
            let p = Path::new(raw.get(key));
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                root.join(p)
            }
        };
        Ok(Self {
            plan,
            rank: train.rank,
            class,
            subject_seed: parse(&raw, "subject.seed")?,
            n_images,
            table_seed: parse(&raw, "prompt.table_seed")?,
            n_prior_samples: parse(&raw, "prior.n")?,
            n_records: parse(&raw, "cache.n_records")?,
            n_prior: parse(&raw, "cache.n_prior")?,
            cache_seed: parse(&raw, "cache.seed")?,
            n_samples: parse(&raw, "sampler.n")?,
            cache_path: at("cache.path"),
            base_path: at("paths.base"),
            priors_path: at("paths.priors"),
            adapters_path: at("paths.adapters"),
            transferred_path: at("paths.transferred"),
            weights_path: at("paths.weights"),
            samples_dir: at("paths.samples"),
            root,
            arch,
            pretrain,
            train,
            sampler,
            sweep_axis,
            sweep_values,
            raw,
        })
    }

    /// Defaults, then an optional file, then `--key=value` overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut raw = RawConfig::default();
        if let Some(f) = file {
            raw.merge_file(f)?;
        }
        for o in overrides {
            raw.apply_override(o)?;
        }
        Self::from_raw(raw)
    }

    /// A path under the artifact root.
    pub fn out(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Writes `<command>.manifest`: the full config plus a comment header.
    /// Loading the file as a config re-creates the run.
    pub fn write_manifest(&self, command: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.root)?;
        let stamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        let mut text = format!("# command: {command}\n# unix time: {stamp}\n");
        let mut raw = self.raw.clone();
        raw.set("paths.root", &self.root.display().to_string())?;
        text.push_str(&raw.to_text());
        let path = self.out(&format!("{command}.manifest"));
        std::fs::write(&path, text)?;
        Ok(path)
    }
}
