//! End-to-end orchestration: embed, filter, re-rank and evaluate, plus the
//! K sweep and the ablation suite.

use std::collections::{HashMap, HashSet};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{Benchmark, BenchmarkConfig, QueryTriplet, SyntheticCorpus, Vocab};
use crate::error::{Error, Result};
use crate::eval::{
    average_metric_cirr, average_metric_fiq, recall_at_k, recall_subset_at_k, timing_report,
    MetricReport, RankedList, TimingReport,
};
use crate::filtering::{coverage, select_topk_scored, CandidateIndex, FilterConfig, FilteringModel, TopKList};
use crate::rerank::{rerank_candidates, AblationVariant, QueryInput, QuerySource, RerankConfig, RerankModel, ZtCache};
use crate::tensor::Tensor;
use crate::train::{checkpoint_configs, train_filter, train_rerank, EpochLog, Stage, TrainConfig};

/// Queries per batched encoder call.
const ENCODE_CHUNK: usize = 64;

/// Everything one pipeline run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub benchmark: BenchmarkConfig,
    pub filter_model: FilterConfig,
    pub rerank_model: RerankConfig,
    pub filter_train: TrainConfig,
    pub rerank_train: TrainConfig,
    /// Re-ranking cutoff.
    pub k: usize,
    /// Remove each query's reference item from its candidates.
    pub exclude_reference: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            benchmark: BenchmarkConfig::default(),
            filter_model: FilterConfig::default(),
            rerank_model: RerankConfig::default(),
            filter_train: TrainConfig::filter_default(),
            rerank_train: TrainConfig::rerank_default(),
            k: 50,
            exclude_reference: true,
        }
    }
}

impl PipelineConfig {
    /// Applies one seed to data generation and both training stages.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.benchmark.seed = seed;
        self.filter_train.seed = seed;
        self.rerank_train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let vocab = Vocab::new(self.benchmark.corpus.num_slots, self.benchmark.corpus.values_per_slot);
        for (name, v, d, len) in [
            ("filter", self.filter_model.vocab, self.filter_model.d_model, self.filter_model.max_len),
            ("rerank", self.rerank_model.vocab, self.rerank_model.d_model, self.rerank_model.max_len),
        ] {
            if v < vocab.size() {
                return Err(Error::Config(format!(
                    "{name} vocabulary {v} is smaller than the {} corpus tokens",
                    vocab.size()
                )));
            }
            if d != self.benchmark.corpus.d_model {
                return Err(Error::Config(format!(
                    "{name} width {d} differs from feature width {}",
                    self.benchmark.corpus.d_model
                )));
            }
            if len < 1 + 4 * self.benchmark.max_edits {
                return Err(Error::Config(format!("{name} max_len {len} is too short")));
            }
        }
        if self.k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        Ok(())
    }
}

/// Rebuilds a filtering model from a checkpoint's own config echo.
pub fn load_filter(ckpt: &Checkpoint) -> Result<FilteringModel<f32>> {
    let (train, model_cfg): (TrainConfig, FilterConfig) = checkpoint_configs(ckpt)?;
    if train.stage != Stage::Filter {
        return Err(Error::contract("not a filtering checkpoint"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut model = FilteringModel::new(model_cfg, &mut rng)?;
    ckpt.restore(&mut model.store)?;
    Ok(model)
}

/// Rebuilds a re-ranking model from a checkpoint's own config echo.
pub fn load_rerank(ckpt: &Checkpoint) -> Result<RerankModel<f32>> {
    let (train, model_cfg): (TrainConfig, RerankConfig) = checkpoint_configs(ckpt)?;
    if train.stage != Stage::Rerank {
        return Err(Error::contract("not a re-ranking checkpoint"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut model = RerankModel::new(model_cfg, &mut rng)?;
    ckpt.restore(&mut model.store)?;
    Ok(model)
}

/// Runs `f` on a pool of `workers` threads (all cores when `None`).
pub fn with_workers<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    match workers {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .expect("thread pool")
            .install(f),
    }
}

/// `z_t` and query embedding of every triplet.
pub fn encode_queries(
    filter: &FilteringModel<f32>,
    corpus: &SyntheticCorpus,
    triplets: &[QueryTriplet],
) -> Result<Vec<(Tensor<f32>, Vec<f32>)>> {
    let vocab = Vocab::new(corpus.config.num_slots, corpus.config.values_per_slot);
    let chunks: Vec<Result<Vec<(Tensor<f32>, Vec<f32>)>>> = triplets
        .par_chunks(ENCODE_CHUNK)
        .map(|chunk| {
            let texts: Vec<Vec<u32>> = chunk.iter().map(|t| vocab.encode(&t.tokens)).collect::<Result<_>>()?;
            let tref: Vec<&[u32]> = texts.iter().map(Vec::as_slice).collect();
            let refs: Vec<u64> = chunk.iter().map(|t| t.ref_id).collect();
            let img = corpus.stacked_features::<f32>(&refs)?;
            filter.encode_queries(&tref, &img, corpus.seq_len())
        })
        .collect();
    let mut out = Vec::with_capacity(triplets.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

pub fn build_zt_cache(
    encoded: &[(Tensor<f32>, Vec<f32>)],
    triplets: &[QueryTriplet],
    d_model: usize,
    provenance: [u8; 32],
) -> Result<ZtCache> {
    let mut cache = ZtCache::new(d_model, provenance);
    for (t, (z, _)) in triplets.iter().zip(encoded) {
        cache.insert(t.query_id, z.clone())?;
    }
    Ok(cache)
}

/// Candidate index over every corpus item.
pub fn embed_corpus(filter: &FilteringModel<f32>, corpus: &SyntheticCorpus, provenance: [u8; 32]) -> Result<CandidateIndex> {
    let ids: Vec<u64> = corpus.ids().collect();
    let rows: Vec<Result<Vec<Vec<f32>>>> = ids
        .par_chunks(256)
        .map(|chunk| {
            let feats = corpus.stacked_features::<f32>(chunk)?;
            filter.embed_candidates(&feats, corpus.seq_len())
        })
        .collect();
    let mut all = Vec::with_capacity(ids.len());
    for r in rows {
        all.extend(r?);
    }
    CandidateIndex::new(ids, all, provenance)
}

fn exclusions(t: &QueryTriplet, exclude_reference: bool) -> HashSet<u64> {
    if exclude_reference {
        HashSet::from([t.ref_id])
    } else {
        HashSet::new()
    }
}

/// Full filtering ranking (every non-excluded candidate) per query.
pub fn filter_rankings(
    index: &CandidateIndex,
    embeddings: &[Vec<f32>],
    triplets: &[QueryTriplet],
    exclude_reference: bool,
) -> Result<Vec<RankedList>> {
    triplets
        .par_iter()
        .zip(embeddings)
        .map(|(t, e)| {
            let l = index.select_topk(t.query_id, e, index.len(), &exclusions(t, exclude_reference))?;
            Ok(RankedList {
                query_id: l.query_id,
                ids: l.ids,
                scores: l.scores,
            })
        })
        .collect()
}

pub fn head(list: &RankedList, k: usize) -> TopKList {
    let k = k.min(list.ids.len());
    TopKList {
        query_id: list.query_id,
        ids: list.ids[..k].to_vec(),
        scores: list.scores[..k].to_vec(),
    }
}

/// First-branch inputs for a variant. `Zt` variants need the cache.
pub fn rerank_inputs(
    variant: AblationVariant,
    corpus: &SyntheticCorpus,
    triplets: &[QueryTriplet],
    zt: Option<&ZtCache>,
) -> Result<Vec<QueryInput<f32>>> {
    let vocab = Vocab::new(corpus.config.num_slots, corpus.config.values_per_slot);
    triplets
        .iter()
        .map(|t| {
            let tokens = vocab.encode(&t.tokens)?;
            let z = match variant.query_source() {
                QuerySource::None => None,
                QuerySource::Zt => {
                    let cache = zt.ok_or_else(|| {
                        Error::contract("z_t cache required: build it from a filtering checkpoint")
                    })?;
                    let z = cache
                        .get(t.query_id)
                        .ok_or_else(|| Error::contract(format!("z_t missing for query {}", t.query_id)))?;
                    Some(z.clone())
                }
                QuerySource::ReferenceCls => {
                    let f = corpus.features::<f32>(t.ref_id)?;
                    Some(Tensor::new(vec![1, f.cols()], f.row(0).to_vec())?)
                }
                QuerySource::ReferenceGrid => Some(corpus.features::<f32>(t.ref_id)?),
            };
            Ok(QueryInput { tokens, z })
        })
        .collect()
}

/// Re-ranker logits for the first `k` filtered candidates of each query.
pub fn rerank_logits(
    model: &RerankModel<f32>,
    corpus: &SyntheticCorpus,
    inputs: &[QueryInput<f32>],
    rankings: &[RankedList],
    k: usize,
) -> Result<Vec<Vec<f32>>> {
    inputs
        .par_iter()
        .zip(rankings)
        .map(|(q, r)| {
            let ids = &r.ids[..k.min(r.ids.len())];
            let feats = corpus.stacked_features::<f32>(ids)?;
            model.score_candidates(q, &feats, corpus.seq_len())
        })
        .collect()
}

/// Applies cached logits (for a prefix of at least `k` candidates) with
/// cutoff `k`.
pub fn apply_rerank(rankings: &[RankedList], logits: &[Vec<f32>], k: usize) -> Result<Vec<RankedList>> {
    rankings
        .iter()
        .zip(logits)
        .map(|(r, l)| {
            let top = head(r, k);
            if l.len() < top.ids.len() {
                return Err(Error::contract("fewer logits than the cutoff"));
            }
            rerank_candidates(&top, &l[..top.ids.len()], r)
        })
        .collect()
}

fn subset_of(t: &QueryTriplet) -> Result<&[u64]> {
    t.subset
        .as_deref()
        .ok_or_else(|| Error::contract(format!("query {} has no candidate subset", t.query_id)))
}

/// Subset candidates ranked by filtering similarity.
pub fn filter_subset_rankings(
    index: &CandidateIndex,
    embeddings: &[Vec<f32>],
    triplets: &[QueryTriplet],
) -> Result<Vec<RankedList>> {
    let pos = index.position_map();
    triplets
        .iter()
        .zip(embeddings)
        .map(|(t, e)| {
            let subset = subset_of(t)?;
            let scores = subset
                .iter()
                .map(|id| {
                    let i = pos
                        .get(id)
                        .ok_or_else(|| Error::contract(format!("subset id {id} not indexed")))?;
                    Ok(index.row(*i).iter().zip(e).map(|(a, b)| a * b).sum())
                })
                .collect::<Result<Vec<f32>>>()?;
            let l = select_topk_scored(t.query_id, subset, &scores, subset.len(), &HashSet::new())?;
            Ok(RankedList {
                query_id: l.query_id,
                ids: l.ids,
                scores: l.scores,
            })
        })
        .collect()
}

/// Subset candidates ranked by re-ranker logits.
pub fn rerank_subset_rankings(
    model: &RerankModel<f32>,
    corpus: &SyntheticCorpus,
    inputs: &[QueryInput<f32>],
    triplets: &[QueryTriplet],
) -> Result<Vec<RankedList>> {
    triplets
        .par_iter()
        .zip(inputs)
        .map(|(t, q)| {
            let subset = subset_of(t)?;
            let feats = corpus.stacked_features::<f32>(subset)?;
            let logits = model.score_candidates(q, &feats, corpus.seq_len())?;
            Ok(RankedList::from_scores(t.query_id, subset, &logits))
        })
        .collect()
}

pub fn ground_truth(triplets: &[QueryTriplet]) -> HashMap<u64, u64> {
    triplets.iter().map(|t| (t.query_id, t.target_id)).collect()
}

/// Cutoffs reported for every stage.
pub const REPORT_KS: [usize; 4] = [1, 5, 10, 50];

/// Recall@{1,5,10,50}, subset recall and both averages for one stage.
pub fn stage_metrics(
    report: &mut MetricReport,
    prefix: &str,
    lists: &[RankedList],
    subset_lists: Option<&[RankedList]>,
    gt: &HashMap<u64, u64>,
) -> Result<()> {
    let mut r = HashMap::new();
    for k in REPORT_KS {
        let v = recall_at_k(lists, gt, k)?;
        r.insert(k, v);
        report.set(format!("{prefix}.recall@{k}"), v)?;
    }
    report.set(format!("{prefix}.avg_fiq"), average_metric_fiq(r[&10], r[&50]))?;
    if let Some(s) = subset_lists {
        let mut sub1 = 0.0;
        for k in 1..=3 {
            let v = recall_subset_at_k(s, gt, k)?;
            if k == 1 {
                sub1 = v;
            }
            report.set(format!("{prefix}.recall_subset@{k}"), v)?;
        }
        report.set(format!("{prefix}.avg_cirr"), average_metric_cirr(r[&5], sub1))?;
    }
    Ok(())
}

/// Trained stage-one artifacts.
pub struct FilterStage {
    pub model: FilteringModel<f32>,
    pub checkpoint: Checkpoint,
    pub hash: [u8; 32],
    pub log: Vec<EpochLog>,
}

/// Validation-side stage-one outputs shared by every re-ranker.
pub struct FilterEval {
    pub index: CandidateIndex,
    pub embeddings: Vec<Vec<f32>>,
    pub rankings: Vec<RankedList>,
    pub subset_rankings: Vec<RankedList>,
    pub val_zt: ZtCache,
    pub train_zt: ZtCache,
}

pub fn run_filter_stage(cfg: &PipelineConfig, bench: &Benchmark, validate_k: Option<usize>) -> Result<FilterStage> {
    let mut val = |m: &FilteringModel<f32>, _epoch: usize| -> Result<Option<f64>> {
        let Some(k) = validate_k else { return Ok(None) };
        let idx = embed_corpus(m, &bench.val, [0; 32])?;
        let enc = encode_queries(m, &bench.val, &bench.val_queries)?;
        let emb: Vec<Vec<f32>> = enc.into_iter().map(|e| e.1).collect();
        let ranks = filter_rankings(&idx, &emb, &bench.val_queries, cfg.exclude_reference)?;
        let tops: Vec<TopKList> = ranks.iter().map(|r| head(r, k)).collect();
        Ok(Some(coverage(&tops, &ground_truth(&bench.val_queries))?))
    };
    let out = train_filter(
        &cfg.filter_train,
        &cfg.filter_model,
        &bench.train,
        &bench.train_queries,
        None,
        Some(&mut val),
    )?;
    let hash = out.checkpoint.hash();
    Ok(FilterStage {
        model: out.model,
        checkpoint: out.checkpoint,
        hash,
        log: out.log,
    })
}

pub fn evaluate_filter_stage(cfg: &PipelineConfig, bench: &Benchmark, stage: &FilterStage) -> Result<FilterEval> {
    let index = embed_corpus(&stage.model, &bench.val, stage.hash)?;
    let enc = encode_queries(&stage.model, &bench.val, &bench.val_queries)?;
    let val_zt = build_zt_cache(&enc, &bench.val_queries, cfg.filter_model.d_model, stage.hash)?;
    let embeddings: Vec<Vec<f32>> = enc.into_iter().map(|e| e.1).collect();
    let rankings = filter_rankings(&index, &embeddings, &bench.val_queries, cfg.exclude_reference)?;
    let subset_rankings = filter_subset_rankings(&index, &embeddings, &bench.val_queries)?;
    let train_enc = encode_queries(&stage.model, &bench.train, &bench.train_queries)?;
    let train_zt = build_zt_cache(&train_enc, &bench.train_queries, cfg.filter_model.d_model, stage.hash)?;
    Ok(FilterEval {
        index,
        embeddings,
        rankings,
        subset_rankings,
        val_zt,
        train_zt,
    })
}

/// Trained stage-two artifacts with validation scores.
pub struct RerankStage {
    pub model: RerankModel<f32>,
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub val_inputs: Vec<QueryInput<f32>>,
    /// Logits for the first `max_k` filtered candidates of each query.
    pub logits: Vec<Vec<f32>>,
    pub max_k: usize,
    pub subset_rankings: Vec<RankedList>,
}

pub fn run_rerank_stage(
    cfg: &PipelineConfig,
    bench: &Benchmark,
    filter: &FilterEval,
    variant: AblationVariant,
    seed: u64,
    max_k: usize,
) -> Result<RerankStage> {
    let mut model_cfg = cfg.rerank_model.clone();
    model_cfg.variant = variant;
    let mut train_cfg = cfg.rerank_train.clone();
    train_cfg.seed = seed;
    let inputs = rerank_inputs(variant, &bench.train, &bench.train_queries, Some(&filter.train_zt))?;
    let out = train_rerank(&train_cfg, &model_cfg, &bench.train, &bench.train_queries, &inputs, None, None)?;
    let val_inputs = rerank_inputs(variant, &bench.val, &bench.val_queries, Some(&filter.val_zt))?;
    let logits = rerank_logits(&out.model, &bench.val, &val_inputs, &filter.rankings, max_k)?;
    let subset_rankings = rerank_subset_rankings(&out.model, &bench.val, &val_inputs, &bench.val_queries)?;
    Ok(RerankStage {
        model: out.model,
        checkpoint: out.checkpoint,
        log: out.log,
        val_inputs,
        logits,
        max_k,
        subset_rankings,
    })
}

/// Filtering and re-ranked metrics at cutoff `k`.
pub fn report_at_k(
    cfg: &PipelineConfig,
    bench: &Benchmark,
    filter: &FilterEval,
    rerank: &RerankStage,
    k: usize,
) -> Result<MetricReport> {
    if k > rerank.max_k {
        return Err(Error::contract(format!("no logits beyond K = {}", rerank.max_k)));
    }
    let reranked = apply_rerank(&filter.rankings, &rerank.logits, k)?;
    let mut report = stage_report(
        k,
        &ground_truth(&bench.val_queries),
        StageLists {
            rankings: &filter.rankings,
            subsets: &filter.subset_rankings,
        },
        StageLists {
            rankings: &reranked,
            subsets: &rerank.subset_rankings,
        },
    )?;
    echo_run(&mut report, cfg, bench, rerank.model.variant(), k);
    Ok(report)
}

/// Run parameters echoed into every report.
pub fn echo_run(report: &mut MetricReport, cfg: &PipelineConfig, bench: &Benchmark, variant: AblationVariant, k: usize) {
    report.echo("k", k);
    report.echo("seed", cfg.benchmark.seed);
    report.echo("rerank_seed", cfg.rerank_train.seed);
    report.echo("variant", variant.name());
    report.echo("train_queries", bench.train_queries.len());
    report.echo("val_queries", bench.val_queries.len());
    report.echo("corpus_items", bench.val.len());
}

/// One stage's full rankings and subset rankings.
#[derive(Clone, Copy)]
pub struct StageLists<'a> {
    pub rankings: &'a [RankedList],
    pub subsets: &'a [RankedList],
}

/// Side-by-side filtering and re-ranked metrics at cutoff `k`, including
/// coverage@K and both stages' Recall@K.
pub fn stage_report(k: usize, gt: &HashMap<u64, u64>, filter: StageLists<'_>, rerank: StageLists<'_>) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    let tops: Vec<TopKList> = filter.rankings.iter().map(|r| head(r, k)).collect();
    report.set(format!("filter.coverage@{k}"), coverage(&tops, gt)?)?;
    stage_metrics(&mut report, "filter", filter.rankings, Some(filter.subsets), gt)?;
    stage_metrics(&mut report, "rerank", rerank.rankings, Some(rerank.subsets), gt)?;
    report.set(format!("rerank.recall@{k}"), recall_at_k(rerank.rankings, gt, k)?)?;
    report.set(format!("filter.recall@{k}"), recall_at_k(filter.rankings, gt, k)?)?;
    Ok(report)
}

/// Single-threaded per-query timing of both stages at cutoff `k`, with one
/// warm-up query excluded.
pub fn time_stages(
    bench: &Benchmark,
    filter_model: &FilteringModel<f32>,
    index: &CandidateIndex,
    rerank: &RerankModel<f32>,
    inputs: &[QueryInput<f32>],
    k: usize,
    exclude_reference: bool,
    queries: usize,
) -> Result<TimingReport> {
    with_workers(Some(1), || {
        let corpus = &bench.val;
        let vocab = Vocab::new(corpus.config.num_slots, corpus.config.values_per_slot);
        let n = queries.min(bench.val_queries.len());
        if n < 2 {
            return Err(Error::contract("timing needs at least two queries"));
        }
        let mut filter_time = Duration::ZERO;
        let mut rerank_time = Duration::ZERO;
        for (i, t) in bench.val_queries[..n].iter().enumerate() {
            let start = Instant::now();
            let tokens = vocab.encode(&t.tokens)?;
            let refs = corpus.features::<f32>(t.ref_id)?;
            let (_, e) = filter_model.encode_query(&tokens, &refs)?;
            let top = index.select_topk(t.query_id, &e, k, &exclusions(t, exclude_reference))?;
            let f = start.elapsed();
            let start = Instant::now();
            let feats = corpus.stacked_features::<f32>(&top.ids)?;
            let logits = rerank.score_candidates(&inputs[i], &feats, corpus.seq_len())?;
            let full = RankedList {
                query_id: top.query_id,
                ids: top.ids.clone(),
                scores: top.scores.clone(),
            };
            let out = rerank_candidates(&top, &logits, &full)?;
            std::hint::black_box(out);
            let r = start.elapsed();
            if i > 0 {
                filter_time += f;
                rerank_time += r;
            }
        }
        timing_report(filter_time, rerank_time, n - 1)
    })
}

/// Outputs of one full run.
pub struct PipelineRun {
    pub config: PipelineConfig,
    pub bench: Benchmark,
    pub filter: FilterStage,
    pub filter_eval: FilterEval,
    pub rerank: RerankStage,
    pub report: MetricReport,
}

/// Generate, train both stages, and evaluate at `cfg.k`; re-ranker logits
/// are kept for cutoffs up to `max_k`.
pub fn run_pipeline(cfg: &PipelineConfig, max_k: usize) -> Result<PipelineRun> {
    cfg.validate()?;
    let bench = Benchmark::generate(&cfg.benchmark)?;
    let filter = run_filter_stage(cfg, &bench, Some(cfg.k))?;
    let filter_eval = evaluate_filter_stage(cfg, &bench, &filter)?;
    let rerank = run_rerank_stage(
        cfg,
        &bench,
        &filter_eval,
        cfg.rerank_model.variant,
        cfg.rerank_train.seed,
        max_k.max(cfg.k),
    )?;
    let report = report_at_k(cfg, &bench, &filter_eval, &rerank, cfg.k)?;
    Ok(PipelineRun {
        config: cfg.clone(),
        bench,
        filter,
        filter_eval,
        rerank,
        report,
    })
}

/// One record per cutoff.
pub fn sweep_k(run: &PipelineRun, ks: &[usize]) -> Result<Vec<MetricReport>> {
    ks.iter()
        .map(|&k| report_at_k(&run.config, &run.bench, &run.filter_eval, &run.rerank, k))
        .collect()
}

/// One ablation run.
pub struct AblationRun {
    pub variant: AblationVariant,
    pub seed: u64,
    pub report: MetricReport,
}

/// Trains and evaluates every (variant, seed) re-ranker over shared data
/// and a shared stage one.
pub fn run_ablation(
    cfg: &PipelineConfig,
    bench: &Benchmark,
    filter: &FilterEval,
    variants: &[AblationVariant],
    seeds: &[u64],
) -> Result<Vec<AblationRun>> {
    let mut out = Vec::new();
    for &variant in variants {
        for &seed in seeds {
            let mut c = cfg.clone();
            c.rerank_train.seed = seed;
            c.rerank_model.variant = variant;
            let stage = run_rerank_stage(&c, bench, filter, variant, seed, c.k)?;
            let report = report_at_k(&c, bench, filter, &stage, c.k)?;
            out.push(AblationRun { variant, seed, report });
        }
    }
    Ok(out)
}

/// Mean of `metric` over the runs of `variant`.
pub fn ablation_mean(runs: &[AblationRun], variant: AblationVariant, metric: &str) -> Option<f64> {
    let v: Vec<f64> = runs
        .iter()
        .filter(|r| r.variant == variant)
        .filter_map(|r| r.report.get(metric))
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}
