use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--pretrain.steps=6",
    "--pretrain.batch=2",
    "--prior.n=3",
    "--cache.n_prior=3",
    "--cache.n_records=8",
    "--train.steps=3",
    "--sampler.steps=3",
    "--sampler.n=2",
    "--sweep.values=0.2,0.4",
];

fn hollownet(root: &Path, command: &str, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hollownet"))
        .arg(command)
        .arg(format!("--paths.root={}", root.display()))
        .args(SMALL)
        .args(extra)
        .env_remove("HOLLOW_HOME")
        .output()
        .expect("spawn hollownet")
}

fn ok(root: &Path, command: &str, extra: &[&str]) {
    let out = hollownet(root, command, extra);
    assert!(
        out.status.success(),
        "{command} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Every file under `dir`, manifests without their timestamp line.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let name = p.strip_prefix(dir).unwrap().display().to_string();
            let mut bytes = std::fs::read(&p).unwrap();
            if name.ends_with(".manifest") {
                let text = String::from_utf8(bytes).unwrap();
                let kept: Vec<&str> = text
                    .lines()
                    .filter(|l| !l.starts_with("# unix time") && !l.starts_with("paths.root"))
                    .collect();
                bytes = kept.join("\n").into_bytes();
            }
            files.insert(name, bytes);
        }
    }
    files
}

const PIPELINE: [&str; 7] = [
    "pretrain",
    "precompute",
    "train",
    "transfer",
    "infer",
    "analyze",
    "sweep",
];

#[test]
fn pipeline_runs_and_repeats_byte_for_byte() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        for c in PIPELINE {
            ok(dir, c, &[]);
        }
    }
    let sa = snapshot(a.path());
    for f in [
        "base.hnwt",
        "cache.hnac",
        "priors.hnwt",
        "adapters.hnlr",
        "transferred.hnlr",
        "fidelity.csv",
        "cost_report.csv",
        "block_delta.csv",
        "sweep_fraction.csv",
        "samples/hollowed-0.ppm",
        "samples/base-1.ppm",
        "train.manifest",
    ] {
        assert!(sa.contains_key(f), "missing {f}");
    }
    assert_eq!(&sa["cache.hnac"][..4], b"HNAC");
    assert_eq!(&sa["adapters.hnlr"][..4], b"HNLR");
    let sb = snapshot(b.path());
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (name, bytes) in &sa {
        assert!(bytes == &sb[name], "{name} differs between identical runs");
    }
}

#[test]
fn baselines_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), "pretrain", &[]);
    ok(dir.path(), "train", &["--train.mode=lora-ft"]);
    ok(dir.path(), "infer", &["--train.mode=lora-ft"]);
    assert!(dir.path().join("samples/lora-ft-0.ppm").exists());
    ok(dir.path(), "train", &["--train.mode=full-ft", "--train.lambda=0"]);
    assert!(dir.path().join("finetuned.hnwt").exists());
    // adapters trained on the full network cannot be transferred
    let out = hollownet(dir.path(), "transfer", &[]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn manifest_reruns_the_same_command() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), "pretrain", &[]);
    let first = std::fs::read(dir.path().join("base.hnwt")).unwrap();
    std::fs::remove_file(dir.path().join("base.hnwt")).unwrap();
    let manifest = dir.path().join("pretrain.manifest");
    let out = Command::new(env!("CARGO_BIN_EXE_hollownet"))
        .arg("--config")
        .arg(&manifest)
        .arg("pretrain")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(std::fs::read(dir.path().join("base.hnwt")).unwrap(), first);
}

#[test]
fn train_without_cache_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), "pretrain", &[]);
    let out = hollownet(dir.path(), "train", &[]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("cache.hnac"), "{}", stderr(&out));
}

#[test]
fn stale_cache_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), "pretrain", &[]);
    ok(dir.path(), "precompute", &[]);
    ok(dir.path(), "pretrain", &["--pretrain.seed=9"]);
    let out = hollownet(dir.path(), "train", &["--pretrain.seed=9"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = hollownet(dir.path(), "plan", &["--plan.removed=2-2,3-1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("skip"), "{}", stderr(&out));
    let out = hollownet(dir.path(), "plan", &["--lora.alpha=2"]);
    assert_eq!(out.status.code(), Some(2));
    let out = hollownet(dir.path(), "train", &["--train.mode=sideways"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn plan_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = hollownet(dir.path(), "plan", &[]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l.starts_with('*')), "{text}");

    let out = hollownet(dir.path(), "plan", &["--arch.preset=sd21", "--plan.fraction=0.39"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let fractions: Vec<f64> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .skip(1)
        .filter_map(|l| l.split_whitespace().find(|w| w.ends_with('%')))
        .map(|w| w.trim_end_matches('%').parse::<f64>().unwrap())
        .collect();
    assert!(fractions.iter().any(|f| (f - 39.2).abs() <= 1.5), "{fractions:?}");
}

#[test]
fn selftest_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    let out = hollownet(dir.path(), "selftest", &[]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{text}");
    assert!(text.contains("transfer equivalence"));
    assert!(!text.contains("FAIL"));
}
