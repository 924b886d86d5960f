//! End-to-end runs of the `cir2` binary on a tiny configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
sweep_ks = [5, 10, 20]
ablation_seeds = [0]
ablation_variants = ["full", "without-zt"]
timing_queries = 4
[pipeline]
k = 10
[pipeline.benchmark]
train_queries = 48
val_queries = 24
seed = 3
[pipeline.benchmark.corpus]
num_items = 96
d_model = 16
[pipeline.filter_model]
d_model = 16
heads = 2
layers = 1
d_ff = 32
d_proj = 8
[pipeline.rerank_model]
d_model = 16
heads = 2
layers = 2
d_ff = 32
[pipeline.filter_train]
batch_size = 8
epochs = 2
[pipeline.rerank_train]
batch_size = 4
epochs = 2
"#;

struct Env {
    _tmp: tempfile::TempDir,
    config: PathBuf,
    data: PathBuf,
}

impl Env {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let config = tmp.path().join("tiny.toml");
        std::fs::write(&config, TINY).unwrap();
        let data = tmp.path().join("data");
        Env { _tmp: tmp, config, data }
    }

    fn run_in(&self, data: &Path, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_cir2"))
            .args(args)
            .arg("--config")
            .arg(&self.config)
            .arg("--data-dir")
            .arg(data)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_in(&self.data, args)
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn read(&self, name: &str) -> Vec<u8> {
        std::fs::read(self.data.join(name)).unwrap()
    }

    fn jsonl(&self, name: &str) -> Vec<serde_json::Value> {
        String::from_utf8(self.read(name))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }

    /// gen through rerank with the default variant.
    fn pipeline(&self) {
        for cmd in ["gen", "train-filter", "embed", "filter", "train-rerank", "rerank"] {
            self.ok(&[cmd]);
        }
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn gen_is_deterministic_and_refuses_to_overwrite() {
    let env = Env::new();
    env.ok(&["gen"]);
    let other = env._tmp.path().join("other");
    assert!(env.run_in(&other, &["gen"]).status.success());
    for f in ["manifest.json", "train.triplets", "val.triplets"] {
        assert_eq!(env.read(f), std::fs::read(other.join(f)).unwrap(), "{f}");
    }
    assert_eq!(code(&env.run(&["gen"])), 2);
    env.ok(&["gen", "--force"]);
}

#[test]
fn infeasible_corpus_size_is_a_config_error() {
    let env = Env::new();
    let out = env.run(&["gen", "--corpus-size", "200000"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("infeasible"));
    assert!(!env.data.join("manifest.json").exists());
}

#[test]
fn pipeline_outputs_have_the_right_shape_and_rerun_identically() {
    let env = Env::new();
    env.pipeline();
    let top = env.jsonl("filter.topk.jsonl");
    let full = env.jsonl("filter.rankings.jsonl");
    let reranked = env.jsonl("rerank-full.rankings.jsonl");
    assert_eq!(top.len(), 24);
    for ((t, f), r) in top.iter().zip(&full).zip(&reranked) {
        assert_eq!(t["ids"].as_array().unwrap().len(), 10);
        // the reference image is excluded from its own ranking
        assert_eq!(f["ids"].as_array().unwrap().len(), 95);
        assert_eq!(r["ids"].as_array().unwrap().len(), 95);
        assert_eq!(f["ids"].as_array().unwrap()[10..], r["ids"].as_array().unwrap()[10..]);
    }
    let before = [env.read("filter.rankings.jsonl"), env.read("rerank-full.rankings.jsonl")];
    assert_eq!(code(&env.run(&["rerank"])), 2);
    env.ok(&["filter", "--force"]);
    env.ok(&["rerank", "--force"]);
    assert_eq!(before, [env.read("filter.rankings.jsonl"), env.read("rerank-full.rankings.jsonl")]);

    let out = env.ok(&["filter", "--force", "--k", "96"]);
    assert!(out.contains("coverage@96 = 100.00"), "{out}");

    let report = env.ok(&["eval"]);
    assert!(report.contains("rerank.recall@1"));
    let timed = env.ok(&["eval", "--timing"]);
    assert!(timed.contains("timing.ratio"));
}

#[test]
fn sweep_keeps_subset_metrics_constant() {
    let env = Env::new();
    env.pipeline();
    let out = env.ok(&["sweep-k"]);
    let records: Vec<serde_json::Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 3);
    for (r, k) in records.iter().zip([5, 10, 20]) {
        assert_eq!(r["echo"]["k"], k);
    }
    for m in ["recall_subset@1", "recall_subset@2", "recall_subset@3"] {
        for stage in ["filter", "rerank"] {
            let key = format!("{stage}.{m}");
            let first = &records[0]["metrics"][&key];
            assert!(first.is_number());
            assert!(records.iter().all(|r| &r["metrics"][&key] == first), "{key}");
        }
    }
}

#[test]
fn stale_or_tampered_artifacts_are_provenance_errors() {
    let env = Env::new();
    for cmd in ["gen", "train-filter", "embed"] {
        env.ok(&[cmd]);
    }
    // a new filter checkpoint leaves the old index behind
    env.ok(&["train-filter", "--force", "--seed", "11"]);
    let out = env.run(&["filter"]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));

    env.ok(&["embed", "--force", "--seed", "11"]);
    env.ok(&["filter", "--seed", "11"]);
    let path = env.data.join("val.triplets");
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 2;
    bytes[last] ^= 1;
    std::fs::write(&path, bytes).unwrap();
    assert_eq!(code(&env.run(&["filter", "--force", "--seed", "11"])), 4);
}

#[test]
fn reranking_without_zt_or_filter_fails_cleanly() {
    let env = Env::new();
    env.ok(&["gen"]);
    assert_eq!(code(&env.run(&["train-rerank"])), 3);
    env.ok(&["train-rerank", "--variant", "without-zt"]);
}
