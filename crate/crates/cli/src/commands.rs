use std::collections::BTreeMap;

use cir2_core::checkpoint::Checkpoint;
use cir2_core::data::{load_triplets, save_triplets, Benchmark, Manifest, QueryTriplet};
use cir2_core::eval::{MetricReport, RankedList};
use cir2_core::filtering::CandidateIndex;
use cir2_core::pipeline::{
    ablation_mean, apply_rerank, build_zt_cache, echo_run, embed_corpus, encode_queries, evaluate_filter_stage,
    filter_rankings, filter_subset_rankings, ground_truth, head, load_filter, load_rerank, rerank_inputs,
    rerank_logits, rerank_subset_rankings, run_ablation, run_filter_stage, stage_report, time_stages, with_workers,
    FilterStage, StageLists,
};
use cir2_core::rerank::{AblationVariant, QueryInput, QuerySource, RerankModel, ZtCache};
use cir2_core::train::{train_rerank as fit_rerank, TrainConfig};
use cir2_core::{Error, Result};
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::store::{self, Store};

pub struct Ctx {
    pub cfg: RunConfig,
    pub store: Store,
    pub workers: Option<usize>,
    pub timing: bool,
}

impl Ctx {
    fn variant(&self) -> AblationVariant {
        self.cfg.pipeline.rerank_model.variant
    }

    fn k(&self) -> usize {
        self.cfg.pipeline.k
    }
}

fn load_bench(store: &Store) -> Result<Benchmark> {
    for n in [store::MANIFEST, store::TRAIN_TRIPLETS, store::VAL_TRIPLETS] {
        store.verify(n)?;
    }
    let text = store.read_text(store::MANIFEST)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: store.path(store::MANIFEST),
        msg: e.to_string(),
    })?;
    let (train, val) = Benchmark::corpora_from_manifest(&manifest)?;
    Ok(Benchmark {
        config: manifest.config,
        train,
        val,
        train_queries: load_triplets(&store.path(store::TRAIN_TRIPLETS))?,
        val_queries: load_triplets(&store.path(store::VAL_TRIPLETS))?,
    })
}

fn load_checkpoint(store: &Store, name: &str) -> Result<Checkpoint> {
    store.verify(name)?;
    Checkpoint::load(&store.path(name))
}

/// Filter checkpoint plus its content hash.
fn load_filter_ckpt(store: &Store) -> Result<(Checkpoint, [u8; 32])> {
    let ckpt = load_checkpoint(store, store::FILTER_CKPT)?;
    let hash = ckpt.hash();
    Ok((ckpt, hash))
}

fn check_provenance(what: &str, found: [u8; 32], expected: [u8; 32]) -> Result<()> {
    if found != expected {
        return Err(Error::Provenance(format!(
            "{what} was produced by filter checkpoint {} but the current one is {}",
            hex::encode(found),
            hex::encode(expected)
        )));
    }
    Ok(())
}

/// z_t cache for `name`, checked against the current filter checkpoint.
/// `None` when neither the cache nor a checkpoint exists.
fn load_zt(store: &Store, name: &str, triplets: &[QueryTriplet], bench: &Benchmark, train: bool) -> Result<Option<ZtCache>> {
    let have_ckpt = store.path(store::FILTER_CKPT).exists();
    if store.path(name).exists() {
        store.verify(name)?;
        let cache = ZtCache::load(&store.path(name))?;
        if have_ckpt {
            let (_, hash) = load_filter_ckpt(store)?;
            check_provenance(name, cache.provenance, hash)?;
        }
        return Ok(Some(cache));
    }
    if !have_ckpt {
        return Ok(None);
    }
    info!("{name} missing; building it from the filter checkpoint");
    let (ckpt, hash) = load_filter_ckpt(store)?;
    let model = load_filter(&ckpt)?;
    let corpus = if train { &bench.train } else { &bench.val };
    let enc = encode_queries(&model, corpus, triplets)?;
    Ok(Some(build_zt_cache(&enc, triplets, model.config.d_model, hash)?))
}

fn variant_inputs(ctx: &Ctx, bench: &Benchmark, variant: AblationVariant, train: bool) -> Result<Vec<QueryInput<f32>>> {
    let (name, corpus, triplets) = if train {
        (store::TRAIN_ZT, &bench.train, &bench.train_queries)
    } else {
        (store::VAL_ZT, &bench.val, &bench.val_queries)
    };
    let zt = if variant.query_source() == QuerySource::Zt {
        load_zt(&ctx.store, name, triplets, bench, train)?
    } else {
        None
    };
    rerank_inputs(variant, corpus, triplets, zt.as_ref())
}

pub fn gen(ctx: &mut Ctx) -> Result<()> {
    let outputs = [store::MANIFEST, store::TRAIN_TRIPLETS, store::VAL_TRIPLETS, store::RUN_CONFIG];
    ctx.store.check_writable(&outputs)?;
    let bench = Benchmark::generate(&ctx.cfg.pipeline.benchmark)?;
    let manifest = serde_json::to_string(&bench.manifest()).expect("manifest serializes");
    ctx.store.write_text(store::MANIFEST, &manifest)?;
    save_triplets(&ctx.store.path(store::TRAIN_TRIPLETS), &bench.train_queries)?;
    save_triplets(&ctx.store.path(store::VAL_TRIPLETS), &bench.val_queries)?;
    ctx.store.write_text(store::RUN_CONFIG, &ctx.cfg.to_toml())?;
    ctx.store.record(store::MANIFEST, &[])?;
    ctx.store.record(store::TRAIN_TRIPLETS, &[store::MANIFEST])?;
    ctx.store.record(store::VAL_TRIPLETS, &[store::MANIFEST])?;
    ctx.store.record(store::RUN_CONFIG, &[])?;
    let c = &bench.config;
    println!("seed = {}", c.seed);
    println!("train_items = {}", bench.train.len());
    println!("val_items = {}", bench.val.len());
    println!("train_queries = {}", bench.train_queries.len());
    println!("val_queries = {}", bench.val_queries.len());
    println!("slots = {} x {} values, grid {}x{}, d_model {}", c.corpus.num_slots, c.corpus.values_per_slot, c.corpus.grid_side, c.corpus.grid_side, c.corpus.d_model);
    println!("vocab = {}", bench.vocab().size());
    println!("manifest_sha256 = {}", ctx.store.file_hash(store::MANIFEST)?);
    Ok(())
}

pub fn train_filter(ctx: &mut Ctx) -> Result<()> {
    ctx.store.check_writable(&[store::FILTER_CKPT, store::FILTER_LOG])?;
    let bench = load_bench(&ctx.store)?;
    let cfg = ctx.cfg.pipeline.clone();
    let k = ctx.k();
    let stage = with_workers(ctx.workers, || run_filter_stage(&cfg, &bench, Some(k)))?;
    let hash = stage.checkpoint.save(&ctx.store.path(store::FILTER_CKPT))?;
    ctx.store.write_jsonl(store::FILTER_LOG, &stage.log)?;
    let inputs = [store::MANIFEST, store::TRAIN_TRIPLETS, store::VAL_TRIPLETS];
    ctx.store.record(store::FILTER_CKPT, &inputs)?;
    ctx.store.record(store::FILTER_LOG, &inputs)?;
    for e in &stage.log {
        println!(
            "epoch {} loss {:.4} coverage@{k} {}",
            e.epoch,
            e.train_loss,
            e.validation.map_or("-".into(), |v| format!("{v:.2}"))
        );
    }
    println!("checkpoint_sha256 = {}", hex::encode(hash));
    Ok(())
}

pub fn embed(ctx: &mut Ctx) -> Result<()> {
    ctx.store.check_writable(&[store::INDEX, store::TRAIN_ZT, store::VAL_ZT])?;
    let bench = load_bench(&ctx.store)?;
    let (ckpt, hash) = load_filter_ckpt(&ctx.store)?;
    let model = load_filter(&ckpt)?;
    let (index, train_zt, val_zt) = with_workers(ctx.workers, || -> Result<_> {
        let index = embed_corpus(&model, &bench.val, hash)?;
        let enc = encode_queries(&model, &bench.train, &bench.train_queries)?;
        let train_zt = build_zt_cache(&enc, &bench.train_queries, model.config.d_model, hash)?;
        let enc = encode_queries(&model, &bench.val, &bench.val_queries)?;
        let val_zt = build_zt_cache(&enc, &bench.val_queries, model.config.d_model, hash)?;
        Ok((index, train_zt, val_zt))
    })?;
    index.save(&ctx.store.path(store::INDEX))?;
    train_zt.save(&ctx.store.path(store::TRAIN_ZT))?;
    val_zt.save(&ctx.store.path(store::VAL_ZT))?;
    ctx.store.record(store::INDEX, &[store::FILTER_CKPT, store::MANIFEST])?;
    ctx.store.record(store::TRAIN_ZT, &[store::FILTER_CKPT, store::MANIFEST, store::TRAIN_TRIPLETS])?;
    ctx.store.record(store::VAL_ZT, &[store::FILTER_CKPT, store::MANIFEST, store::VAL_TRIPLETS])?;
    println!("indexed {} candidates (d_proj {})", index.len(), index.d_proj);
    println!("cached z_t for {} train and {} validation queries", bench.train_queries.len(), bench.val_queries.len());
    Ok(())
}

pub fn filter(ctx: &mut Ctx) -> Result<()> {
    ctx.store
        .check_writable(&[store::FILTER_TOPK, store::FILTER_RANKINGS, store::FILTER_SUBSETS])?;
    let bench = load_bench(&ctx.store)?;
    let (ckpt, hash) = load_filter_ckpt(&ctx.store)?;
    ctx.store.verify(store::INDEX)?;
    let index = CandidateIndex::load(&ctx.store.path(store::INDEX))?;
    check_provenance(store::INDEX, index.provenance, hash)?;
    let model = load_filter(&ckpt)?;
    let k = ctx.k();
    let exclude = ctx.cfg.pipeline.exclude_reference;
    let (rankings, subsets) = with_workers(ctx.workers, || -> Result<_> {
        let emb: Vec<Vec<f32>> = encode_queries(&model, &bench.val, &bench.val_queries)?
            .into_iter()
            .map(|e| e.1)
            .collect();
        let r = filter_rankings(&index, &emb, &bench.val_queries, exclude)?;
        let s = filter_subset_rankings(&index, &emb, &bench.val_queries)?;
        Ok((r, s))
    })?;
    let tops: Vec<RankedList> = rankings
        .iter()
        .map(|r| {
            let t = head(r, k);
            RankedList {
                query_id: t.query_id,
                ids: t.ids,
                scores: t.scores,
            }
        })
        .collect();
    ctx.store.write_jsonl(store::FILTER_TOPK, &tops)?;
    ctx.store.write_jsonl(store::FILTER_RANKINGS, &rankings)?;
    ctx.store.write_jsonl(store::FILTER_SUBSETS, &subsets)?;
    let inputs = [store::INDEX, store::FILTER_CKPT, store::VAL_TRIPLETS];
    for n in [store::FILTER_TOPK, store::FILTER_RANKINGS, store::FILTER_SUBSETS] {
        ctx.store.record(n, &inputs)?;
    }
    let gt = ground_truth(&bench.val_queries);
    let tops: Vec<_> = rankings.iter().map(|r| head(r, k)).collect();
    println!("coverage@{k} = {:.2}", cir2_core::eval::round2(cir2_core::filtering::coverage(&tops, &gt)?));
    Ok(())
}

pub fn train_rerank(ctx: &mut Ctx) -> Result<()> {
    let variant = ctx.variant();
    let ckpt_name = store::rerank_ckpt(variant.name());
    let log_name = store::rerank_log(variant.name());
    ctx.store.check_writable(&[&ckpt_name, &log_name])?;
    let bench = load_bench(&ctx.store)?;
    let inputs = variant_inputs(ctx, &bench, variant, true)?;
    let train_cfg: TrainConfig = ctx.cfg.pipeline.rerank_train.clone();
    let model_cfg = ctx.cfg.pipeline.rerank_model.clone();
    let out = fit_rerank(&train_cfg, &model_cfg, &bench.train, &bench.train_queries, &inputs, None, None)?;
    let hash = out.checkpoint.save(&ctx.store.path(&ckpt_name))?;
    ctx.store.write_jsonl(&log_name, &out.log)?;
    let mut deps = vec![store::MANIFEST, store::TRAIN_TRIPLETS];
    if variant.query_source() == QuerySource::Zt && ctx.store.path(store::TRAIN_ZT).exists() {
        deps.push(store::TRAIN_ZT);
    }
    ctx.store.record(&ckpt_name, &deps)?;
    ctx.store.record(&log_name, &deps)?;
    for e in &out.log {
        println!("epoch {} loss {:.4}", e.epoch, e.train_loss);
    }
    println!("checkpoint_sha256 = {}", hex::encode(hash));
    Ok(())
}

/// Side file describing how re-ranked lists were produced.
#[derive(Serialize, Deserialize)]
struct RerankMeta {
    k: usize,
    variant: AblationVariant,
}

fn meta_name(variant: AblationVariant) -> String {
    format!("rerank-{}.meta.json", variant.name())
}

fn load_reranker(ctx: &Ctx) -> Result<RerankModel<f32>> {
    let variant = ctx.variant();
    let ckpt = load_checkpoint(&ctx.store, &store::rerank_ckpt(variant.name()))?;
    let model = load_rerank(&ckpt)?;
    if model.variant() != variant {
        return Err(Error::Provenance(format!(
            "checkpoint holds a {} re-ranker, not {variant}",
            model.variant()
        )));
    }
    Ok(model)
}

pub fn rerank(ctx: &mut Ctx) -> Result<()> {
    let variant = ctx.variant();
    let out_name = store::rerank_rankings(variant.name());
    let sub_name = store::rerank_subsets(variant.name());
    let meta = meta_name(variant);
    ctx.store.check_writable(&[&out_name, &sub_name, &meta])?;
    let bench = load_bench(&ctx.store)?;
    let model = load_reranker(ctx)?;
    ctx.store.verify(store::FILTER_RANKINGS)?;
    let rankings: Vec<RankedList> = ctx.store.read_jsonl(store::FILTER_RANKINGS)?;
    let inputs = variant_inputs(ctx, &bench, variant, false)?;
    let k = ctx.k();
    let (reranked, subsets) = with_workers(ctx.workers, || -> Result<_> {
        let logits = rerank_logits(&model, &bench.val, &inputs, &rankings, k)?;
        let reranked = apply_rerank(&rankings, &logits, k)?;
        let subsets = rerank_subset_rankings(&model, &bench.val, &inputs, &bench.val_queries)?;
        Ok((reranked, subsets))
    })?;
    ctx.store.write_jsonl(&out_name, &reranked)?;
    ctx.store.write_jsonl(&sub_name, &subsets)?;
    let m = serde_json::to_string(&RerankMeta { k, variant }).expect("meta serializes");
    ctx.store.write_text(&meta, &m)?;
    let ckpt_name = store::rerank_ckpt(variant.name());
    let mut deps = vec![ckpt_name.as_str(), store::FILTER_RANKINGS, store::VAL_TRIPLETS];
    if variant.query_source() == QuerySource::Zt && ctx.store.path(store::VAL_ZT).exists() {
        deps.push(store::VAL_ZT);
    }
    for n in [&out_name, &sub_name, &meta] {
        ctx.store.record(n, &deps)?;
    }
    println!("re-ranked top-{k} for {} queries with {variant}", reranked.len());
    Ok(())
}

fn print_side_by_side(report: &MetricReport) {
    for (k, v) in &report.echo {
        println!("{k} = {v}");
    }
    let mut rows: BTreeMap<String, (Option<f64>, Option<f64>)> = BTreeMap::new();
    for (name, v) in &report.metrics {
        if let Some((stage, metric)) = name.split_once('.') {
            let e = rows.entry(metric.to_string()).or_default();
            if stage == "filter" {
                e.0 = Some(*v);
            } else {
                e.1 = Some(*v);
            }
        }
    }
    let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.2}", cir2_core::eval::round2(x)));
    println!("{:<20} {:>9} {:>9}", "metric", "filter", "rerank");
    for (metric, (f, r)) in rows {
        println!("{metric:<20} {:>9} {:>9}", cell(f), cell(r));
    }
    if let Some(t) = &report.timing {
        println!("timing.queries = {}", t.queries);
        println!("timing.filter_per_query_us = {:.3}", t.filter_per_query_us);
        println!("timing.rerank_per_query_us = {:.3}", t.rerank_per_query_us);
        match t.ratio {
            Some(r) => println!("timing.ratio = {r:.3}"),
            None => println!("timing.ratio = unavailable"),
        }
    }
    println!("{}", report.to_json_line());
}

pub fn eval(ctx: &mut Ctx) -> Result<()> {
    let variant = ctx.variant();
    let bench = load_bench(&ctx.store)?;
    let names = [
        store::FILTER_RANKINGS.to_string(),
        store::FILTER_SUBSETS.to_string(),
        store::rerank_rankings(variant.name()),
        store::rerank_subsets(variant.name()),
        meta_name(variant),
    ];
    for n in &names {
        ctx.store.verify(n)?;
    }
    let meta: RerankMeta = serde_json::from_str(&ctx.store.read_text(&names[4])?).map_err(|e| Error::Format {
        path: ctx.store.path(&names[4]),
        msg: e.to_string(),
    })?;
    let filter_r: Vec<RankedList> = ctx.store.read_jsonl(&names[0])?;
    let filter_s: Vec<RankedList> = ctx.store.read_jsonl(&names[1])?;
    let rerank_r: Vec<RankedList> = ctx.store.read_jsonl(&names[2])?;
    let rerank_s: Vec<RankedList> = ctx.store.read_jsonl(&names[3])?;
    let mut report = stage_report(
        meta.k,
        &ground_truth(&bench.val_queries),
        StageLists {
            rankings: &filter_r,
            subsets: &filter_s,
        },
        StageLists {
            rankings: &rerank_r,
            subsets: &rerank_s,
        },
    )?;
    echo_run(&mut report, &ctx.cfg.pipeline, &bench, meta.variant, meta.k);
    if ctx.timing {
        report.timing = Some(timing(ctx, &bench, meta.k)?);
    }
    print_side_by_side(&report);
    Ok(())
}

fn timing(ctx: &Ctx, bench: &Benchmark, k: usize) -> Result<cir2_core::eval::TimingReport> {
    let (ckpt, hash) = load_filter_ckpt(&ctx.store)?;
    let filter = load_filter(&ckpt)?;
    ctx.store.verify(store::INDEX)?;
    let index = CandidateIndex::load(&ctx.store.path(store::INDEX))?;
    check_provenance(store::INDEX, index.provenance, hash)?;
    let model = load_reranker(ctx)?;
    let inputs = variant_inputs(ctx, bench, ctx.variant(), false)?;
    time_stages(
        bench,
        &filter,
        &index,
        &model,
        &inputs,
        k,
        ctx.cfg.pipeline.exclude_reference,
        ctx.cfg.timing_queries + 1,
    )
}

pub fn sweep_k(ctx: &mut Ctx, ks: &[usize]) -> Result<()> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("cutoffs must be positive".into()));
    }
    let variant = ctx.variant();
    let bench = load_bench(&ctx.store)?;
    ctx.store.verify(store::FILTER_RANKINGS)?;
    ctx.store.verify(store::FILTER_SUBSETS)?;
    let filter_r: Vec<RankedList> = ctx.store.read_jsonl(store::FILTER_RANKINGS)?;
    let filter_s: Vec<RankedList> = ctx.store.read_jsonl(store::FILTER_SUBSETS)?;
    let model = load_reranker(ctx)?;
    let inputs = variant_inputs(ctx, &bench, variant, false)?;
    let max_k = *ks.iter().max().expect("non-empty");
    let (logits, subsets) = with_workers(ctx.workers, || -> Result<_> {
        let l = rerank_logits(&model, &bench.val, &inputs, &filter_r, max_k)?;
        let s = rerank_subset_rankings(&model, &bench.val, &inputs, &bench.val_queries)?;
        Ok((l, s))
    })?;
    let gt = ground_truth(&bench.val_queries);
    for &k in ks {
        let reranked = apply_rerank(&filter_r, &logits, k)?;
        let mut report = stage_report(
            k,
            &gt,
            StageLists {
                rankings: &filter_r,
                subsets: &filter_s,
            },
            StageLists {
                rankings: &reranked,
                subsets: &subsets,
            },
        )?;
        echo_run(&mut report, &ctx.cfg.pipeline, &bench, variant, k);
        if ctx.timing {
            report.timing = Some(timing(ctx, &bench, k)?);
        }
        println!("{}", report.to_json_line());
    }
    Ok(())
}

pub fn ablate(ctx: &mut Ctx) -> Result<()> {
    const OUT: &str = "ablation.jsonl";
    ctx.store.check_writable(&[OUT])?;
    let bench = load_bench(&ctx.store)?;
    let (ckpt, hash) = load_filter_ckpt(&ctx.store)?;
    let stage = FilterStage {
        model: load_filter(&ckpt)?,
        checkpoint: ckpt,
        hash,
        log: Vec::new(),
    };
    let cfg = ctx.cfg.pipeline.clone();
    let variants = ctx.cfg.ablation_variants.clone();
    let seeds = ctx.cfg.ablation_seeds.clone();
    let runs = with_workers(ctx.workers, || -> Result<_> {
        let fe = evaluate_filter_stage(&cfg, &bench, &stage)?;
        run_ablation(&cfg, &bench, &fe, &variants, &seeds)
    })?;
    let reports: Vec<&MetricReport> = runs.iter().map(|r| &r.report).collect();
    ctx.store.write_jsonl(OUT, &reports)?;
    ctx.store.record(OUT, &[store::FILTER_CKPT, store::MANIFEST, store::TRAIN_TRIPLETS, store::VAL_TRIPLETS])?;
    for r in &runs {
        println!("{}", r.report.to_json_line());
    }
    println!("{:<18} {:>10} {:>10}", "variant", "mean R@1", "mean R@5");
    for v in variants {
        let r1 = ablation_mean(&runs, v, "rerank.recall@1").unwrap_or(f64::NAN);
        let r5 = ablation_mean(&runs, v, "rerank.recall@5").unwrap_or(f64::NAN);
        println!("{:<18} {:>10.2} {:>10.2}", v.name(), r1, r5);
    }
    Ok(())
}
