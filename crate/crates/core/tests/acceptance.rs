//! Acceptance suite. Each test prints one `criterion N PASS|FAIL` line
//! straight to stdout (visible without `--nocapture`) and then asserts.
//!
//! Criteria 6, 7, 8 and 10 share one default-config pipeline run.

mod common;

use std::collections::HashSet;
use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use cir2_core::autodiff::Graph;
use cir2_core::data::{Benchmark, BenchmarkConfig, CorpusConfig};
use cir2_core::eval::{average_metric_cirr, average_metric_fiq, recall_at_k, round2, MetricReport};
use cir2_core::filtering::{filtering_loss, CandidateIndex, FilterConfig, FilteringModel};
use cir2_core::pipeline::{
    ablation_mean, apply_rerank, build_zt_cache, embed_corpus, encode_queries, filter_rankings, ground_truth,
    rerank_inputs, rerank_logits, run_ablation, run_pipeline, sweep_k, time_stages, PipelineConfig, PipelineRun,
};
use cir2_core::rerank::{rerank_loss, AblationVariant, RerankConfig, RerankModel};
use cir2_core::Tensor;
use common::grad_suite;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    let mut out = std::io::stdout().lock();
    let tag = if pass { "PASS" } else { "FAIL" };
    writeln!(out, "criterion {n:>2} {tag}: {name}: {detail}").unwrap();
    out.flush().unwrap();
}

fn finish(n: u32, name: &str, failures: &[String], detail: &str) {
    verdict(n, name, failures.is_empty(), detail);
    assert!(failures.is_empty(), "criterion {n} ({name}) failed: {failures:#?}");
}

const SWEEP_KS: [usize; 4] = [10, 25, 50, 100];

struct DefaultRun {
    run: PipelineRun,
    elapsed: Duration,
}

fn default_run() -> &'static DefaultRun {
    static RUN: OnceLock<DefaultRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let run = run_pipeline(&PipelineConfig::default(), *SWEEP_KS.iter().max().unwrap()).unwrap();
        DefaultRun {
            run,
            elapsed: start.elapsed(),
        }
    })
}

#[test]
fn criterion_01_gradient_suite() {
    const SEEDS: u64 = 100;
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    let mut coords = 0;
    for (name, family) in grad_suite::FAMILIES {
        let t = family(SEEDS);
        for r in t.0.values() {
            worst = worst.max(r.max_rel_err);
            coords += r.coordinates;
        }
        failures.extend(t.failures().into_iter().map(|f| format!("{name}/{f}")));
    }
    let elapsed = start.elapsed();
    if elapsed >= Duration::from_secs(120) {
        failures.push(format!("runtime {elapsed:?} exceeds 2 min"));
    }
    let detail = format!(
        "{} families x {SEEDS} configs, {coords} coords, worst rel err {worst:.2e}, {:.1}s",
        grad_suite::FAMILIES.len(),
        elapsed.as_secs_f64()
    );
    finish(1, "gradient suite", &failures, &detail);
}

fn filter_loss_of(q: Tensor<f64>, t: Tensor<f64>, lambda: f64) -> f64 {
    let mut g = Graph::<f64>::new();
    let (q, t) = (g.constant(q), g.constant(t));
    let l = g.constant(Tensor::scalar(lambda));
    let loss = filtering_loss(&mut g, q, t, l).unwrap();
    g.value(loss).item()
}

fn rerank_loss_of(logits: Tensor<f64>) -> f64 {
    let mut g = Graph::<f64>::new();
    let x = g.constant(logits);
    let loss = rerank_loss(&mut g, x).unwrap();
    g.value(loss).item()
}

fn unit_rows(rows: usize, row: &[f64]) -> Tensor<f64> {
    let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
    let data: Vec<f64> = (0..rows).flat_map(|_| row.iter().map(|x| x / n)).collect();
    Tensor::new(vec![rows, row.len()], data).unwrap()
}

#[test]
fn criterion_02_loss_identities() {
    // independent scalar evaluations of both losses, frozen at 5 decimals
    let oracle_filter = (1.0 + (-1.0f64).exp()).ln();
    let oracle_rerank = (1.0 + (-2.0f64).exp()).ln();
    const FILTER_B2: f64 = 0.31326;
    const RERANK_B2: f64 = 0.12693;
    assert!((oracle_filter - FILTER_B2).abs() < 5e-6 && (oracle_rerank - RERANK_B2).abs() < 5e-6);

    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for lambda in [1.0, 1.0 / 0.07, 100.0] {
        let v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let l = filter_loss_of(unit_rows(1, &v), unit_rows(1, &v), lambda);
        if l != 0.0 {
            failures.push(format!("filter B=1 λ={lambda}: {l}"));
        }
    }
    let x: f64 = rng.random_range(-5.0..5.0);
    let l = rerank_loss_of(Tensor::new(vec![1, 1], vec![x]).unwrap());
    if l != 0.0 {
        failures.push(format!("rerank B=1: {l}"));
    }
    for b in [2usize, 4, 8] {
        let ln_b = (b as f64).ln();
        let v: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lf = filter_loss_of(unit_rows(b, &v), unit_rows(b, &v), 1.0 / 0.07);
        let c: f64 = rng.random_range(-3.0..3.0);
        let lr = rerank_loss_of(Tensor::full(&[b, b], c));
        for (which, l) in [("filter", lf), ("rerank", lr)] {
            if (l - ln_b).abs() > 1e-6 {
                failures.push(format!("{which} uniform B={b}: {l} vs ln B {ln_b}"));
            }
        }
    }
    let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let lf = filter_loss_of(eye.clone(), eye, 1.0);
    let lr = rerank_loss_of(Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 2.0]).unwrap());
    if (lf - FILTER_B2).abs() > 1e-5 {
        failures.push(format!("filter B=2 closed form: {lf}"));
    }
    if (lr - RERANK_B2).abs() > 1e-5 {
        failures.push(format!("rerank B=2 closed form: {lr}"));
    }
    let detail = format!("B=1 -> 0, uniform -> ln B at B in {{2,4,8}}, B=2 closed forms {lf:.5} and {lr:.5}");
    finish(2, "loss identities", &failures, &detail);
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

#[test]
fn criterion_03_topk_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = Vec::new();
    for inst in 0..1000 {
        let m = rng.random_range(1..=1000usize);
        let d = rng.random_range(1..=8usize);
        // rows drawn from a small palette so exact score ties are common
        let palette: Vec<Vec<f32>> = (0..rng.random_range(1..=12)).map(|_| random_unit(&mut rng, d)).collect();
        let mut ids: Vec<u64> = (0..m as u64).map(|i| i * 7919 + rng.random_range(0..7919)).collect();
        ids.shuffle(&mut rng);
        let rows: Vec<Vec<f32>> = (0..m).map(|_| palette[rng.random_range(0..palette.len())].clone()).collect();
        let index = CandidateIndex::new(ids.clone(), rows.clone(), [0; 32]).unwrap();
        let query = random_unit(&mut rng, d);
        let k = rng.random_range(1..=m + 2);
        let exclude: HashSet<u64> = (0..rng.random_range(0..3)).map(|_| ids[rng.random_range(0..m)]).collect();
        let got = index.select_topk(inst, &query, k, &exclude).unwrap();

        let mut all: Vec<(f32, u64)> = rows
            .iter()
            .zip(&ids)
            .filter(|(_, id)| !exclude.contains(id))
            .map(|(r, id)| (r.iter().zip(&query).fold(0.0f32, |s, (a, b)| s + a * b), *id))
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        all.truncate(k);
        let want_ids: Vec<u64> = all.iter().map(|p| p.1).collect();
        let want_scores: Vec<f32> = all.iter().map(|p| p.0).collect();
        if got.ids != want_ids || got.scores != want_scores {
            failures.push(format!("instance {inst}: M={m} K={k}"));
        }
    }
    let detail = format!("1000 instances, M <= 1000, {} mismatches", failures.len());
    finish(3, "top-K oracle equivalence", &failures, &detail);
}

#[test]
fn criterion_04_permutation_within_k() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut failures = Vec::new();
    for setting in 0..100u64 {
        let d = 16;
        let bench = Benchmark::generate(&BenchmarkConfig {
            corpus: CorpusConfig {
                num_items: [32usize, 48, 64, 96][rng.random_range(0..4)],
                d_model: d,
                ..CorpusConfig::default()
            },
            train_queries: 4,
            val_queries: rng.random_range(4..24),
            max_edits: 2,
            seed: setting,
        })
        .unwrap();
        let fcfg = FilterConfig {
            d_model: d,
            heads: 2,
            layers: 1,
            d_ff: 32,
            d_proj: 8,
            ..FilterConfig::default()
        };
        let variant = AblationVariant::ALL[setting as usize % AblationVariant::ALL.len()];
        let rcfg = RerankConfig {
            d_model: d,
            heads: 2,
            layers: rng.random_range(1..4),
            d_ff: 32,
            variant,
            ..RerankConfig::default()
        };
        let filter = FilteringModel::<f32>::new(fcfg, &mut rng).unwrap();
        let rerank = RerankModel::<f32>::new(rcfg, &mut rng).unwrap();
        let index = embed_corpus(&filter, &bench.val, [0; 32]).unwrap();
        let enc = encode_queries(&filter, &bench.val, &bench.val_queries).unwrap();
        let zt = build_zt_cache(&enc, &bench.val_queries, d, [0; 32]).unwrap();
        let emb: Vec<Vec<f32>> = enc.into_iter().map(|e| e.1).collect();
        let rankings = filter_rankings(&index, &emb, &bench.val_queries, true).unwrap();
        let inputs = rerank_inputs(variant, &bench.val, &bench.val_queries, Some(&zt)).unwrap();
        let k = rng.random_range(1..=bench.val.len());
        let logits = rerank_logits(&rerank, &bench.val, &inputs, &rankings, k).unwrap();
        let reranked = apply_rerank(&rankings, &logits, k).unwrap();
        let gt = ground_truth(&bench.val_queries);
        let (a, b) = (recall_at_k(&reranked, &gt, k).unwrap(), recall_at_k(&rankings, &gt, k).unwrap());
        if a != b {
            failures.push(format!("setting {setting} ({variant}, K={k}): {a} vs {b}"));
        }
    }
    let detail = format!("100 (model, corpus, K) settings, {} violations", failures.len());
    finish(4, "permutation within K", &failures, &detail);
}

#[test]
fn criterion_05_metric_arithmetic() {
    let fiq = round2(average_metric_fiq(51.17, 73.13));
    let cirr = round2(average_metric_cirr(81.75, 80.04));
    let mut failures = Vec::new();
    if format!("{fiq:.2}") != "62.15" {
        failures.push(format!("fiq average {fiq}"));
    }
    if format!("{cirr:.2}") != "80.90" {
        failures.push(format!("cirr average {cirr}"));
    }
    finish(5, "metric arithmetic", &failures, &format!("avg_fiq {fiq:.2}, avg_cirr {cirr:.2}"));
}

#[test]
fn criterion_06_end_to_end() {
    let d = default_run();
    let r = &d.run.report;
    let cov = r.get("filter.coverage@50").unwrap();
    let f1 = r.get("filter.recall@1").unwrap();
    let r1 = r.get("rerank.recall@1").unwrap();
    let losses: Vec<f64> = d.run.filter.log.iter().take(3).map(|e| e.train_loss).collect();
    let mut failures = Vec::new();
    if cov < 90.0 {
        failures.push(format!("coverage@50 {cov:.2} < 90"));
    }
    if r1 - f1 < 3.0 {
        failures.push(format!("R@1 gain {:.2} < 3", r1 - f1));
    }
    if losses.len() < 3 || !losses.windows(2).all(|w| w[1] < w[0]) {
        failures.push(format!("filter loss not strictly decreasing over 3 epochs: {losses:?}"));
    }
    // measured on one core; the budget is stated for four
    if d.elapsed >= Duration::from_secs(20 * 60) {
        failures.push(format!("runtime {:?} exceeds 20 min", d.elapsed));
    }
    let detail = format!(
        "coverage@50 {cov:.2}, R@1 {f1:.2} -> {r1:.2} (+{:.2}), filter loss {:.3?}, {:.0}s single-core",
        r1 - f1,
        losses,
        d.elapsed.as_secs_f64()
    );
    finish(6, "end-to-end synthetic benchmark", &failures, &detail);
}

#[test]
fn criterion_07_ablation_direction() {
    let d = default_run();
    let run = &d.run;
    let seeds = [0u64, 1, 2];
    assert_eq!(run.config.rerank_train.seed, seeds[0]);
    // the shared run is the Full model at seed 0
    let mut runs = run_ablation(&run.config, &run.bench, &run.filter_eval, &[AblationVariant::Full], &seeds[1..]).unwrap();
    runs.extend(run_ablation(&run.config, &run.bench, &run.filter_eval, &[AblationVariant::WithoutZt], &seeds).unwrap());
    let full_seed0 = run.report.get("rerank.recall@1").unwrap();
    let full_rest: Vec<f64> = runs
        .iter()
        .filter(|r| r.variant == AblationVariant::Full)
        .map(|r| r.report.get("rerank.recall@1").unwrap())
        .collect();
    let full = (full_seed0 + full_rest.iter().sum::<f64>()) / seeds.len() as f64;
    let without = ablation_mean(&runs, AblationVariant::WithoutZt, "rerank.recall@1").unwrap();
    let per_seed: Vec<f64> = runs
        .iter()
        .filter(|r| r.variant == AblationVariant::WithoutZt)
        .map(|r| r.report.get("rerank.recall@1").unwrap())
        .collect();
    let mut failures = Vec::new();
    if full - without < 1.0 {
        failures.push(format!("Full {full:.2} - WithoutZt {without:.2} < 1.0"));
    }
    let detail = format!(
        "mean R@1 Full {full:.2} (seeds {:.2?}) vs WithoutZt {without:.2} (seeds {per_seed:.2?})",
        [&[full_seed0][..], &full_rest].concat()
    );
    finish(7, "ablation directionality", &failures, &detail);
}

#[test]
fn criterion_08_k_sweep() {
    let d = default_run();
    let reports = sweep_k(&d.run, &SWEEP_KS).unwrap();
    let mut failures = Vec::new();
    let series = |key: &dyn Fn(usize) -> String| -> Vec<f64> {
        reports.iter().zip(SWEEP_KS).map(|(r, k)| r.get(&key(k)).unwrap()).collect()
    };
    let cov = series(&|k| format!("filter.coverage@{k}"));
    let r50 = series(&|_| "rerank.recall@50".into());
    for (name, s) in [("coverage", &cov), ("re-ranked R@50", &r50)] {
        if !s.windows(2).all(|w| w[1] >= w[0]) {
            failures.push(format!("{name} decreases: {s:?}"));
        }
    }
    for stage in ["filter", "rerank"] {
        for j in 1..=3 {
            let key = format!("{stage}.recall_subset@{j}");
            let vals: Vec<u64> = reports.iter().map(|r| r.get(&key).unwrap().to_bits()).collect();
            if vals.windows(2).any(|w| w[0] != w[1]) {
                failures.push(format!("{key} varies across the sweep"));
            }
        }
    }
    let detail = format!(
        "K {SWEEP_KS:?}: coverage {cov:.2?}, re-ranked R@50 {r50:.2?}, subset columns constant"
    );
    finish(8, "K sweep", &failures, &detail);
}

/// A scaled-down configuration; two full default runs would double the
/// suite's dominant cost.
fn reduced_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.benchmark.corpus.num_items = 256;
    cfg.benchmark.train_queries = 512;
    cfg.benchmark.val_queries = 128;
    cfg.filter_train.epochs = 2;
    cfg.rerank_train.epochs = 1;
    cfg.k = 20;
    cfg
}

fn timed_report(cfg: &PipelineConfig) -> (MetricReport, [u8; 32], [u8; 32]) {
    let run = run_pipeline(cfg, cfg.k).unwrap();
    let mut report = run.report.clone();
    report.timing = Some(
        time_stages(
            &run.bench,
            &run.filter.model,
            &run.filter_eval.index,
            &run.rerank.model,
            &run.rerank.val_inputs,
            cfg.k,
            cfg.exclude_reference,
            9,
        )
        .unwrap(),
    );
    (report, run.filter.hash, run.rerank.checkpoint.hash())
}

#[test]
fn criterion_09_determinism() {
    let cfg = reduced_config();
    let (a, fa, ra) = timed_report(&cfg);
    let (b, fb, rb) = timed_report(&cfg);
    let mut failures = Vec::new();
    if a.without_timing() != b.without_timing() {
        failures.push("metric reports differ".to_string());
    }
    if (fa, ra) != (fb, rb) {
        failures.push("checkpoint hashes differ".to_string());
    }
    let detail = format!(
        "two seeded runs (M=256, Q=512/128): {} metrics identical, checkpoints identical",
        a.metrics.len()
    );
    finish(9, "determinism", &failures, &detail);
}

#[test]
fn criterion_10_timing_ratio() {
    let d = default_run();
    let run = &d.run;
    let t = time_stages(
        &run.bench,
        &run.filter.model,
        &run.filter_eval.index,
        &run.rerank.model,
        &run.rerank.val_inputs,
        50,
        run.config.exclude_reference,
        65,
    )
    .unwrap();
    let ratio = t.ratio.unwrap_or(f64::NAN);
    let failures = if ratio > 1.0 {
        Vec::new()
    } else {
        vec![format!("ratio {ratio}")]
    };
    let detail = format!(
        "K=50, 1 worker, {} queries: filter {:.0}us, rerank {:.0}us per query, ratio {ratio:.2}",
        t.queries, t.filter_per_query_us, t.rerank_per_query_us
    );
    finish(10, "timing report", &failures, &detail);
}
