//! Recall metrics, published average metrics, stage timing and the
//! model-free oracle rankers.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::data::{edited_bundle, SyntheticCorpus, QueryTriplet, Vocab};
use crate::error::{Error, Result};
use crate::filtering::rank_order;

/// Candidate ids best-first with parallel scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: u64,
    pub ids: Vec<u64>,
    pub scores: Vec<f32>,
}

impl RankedList {
    /// Sorts candidates by descending score, ties by ascending id.
    pub fn from_scores(query_id: u64, ids: &[u64], scores: &[f32]) -> Self {
        let mut pairs: Vec<(f32, u64)> = scores.iter().copied().zip(ids.iter().copied()).collect();
        pairs.sort_by(|a, b| rank_order(*a, *b));
        RankedList {
            query_id,
            ids: pairs.iter().map(|p| p.1).collect(),
            scores: pairs.iter().map(|p| p.0).collect(),
        }
    }

    /// 1-based rank of `id`.
    pub fn rank_of(&self, id: u64) -> Option<usize> {
        self.ids.iter().position(|&x| x == id).map(|p| p + 1)
    }
}

fn count_hits(lists: &[RankedList], gt: &HashMap<u64, u64>, k: usize, require_present: bool) -> Result<f64> {
    if k == 0 {
        return Err(Error::contract("K must be at least 1"));
    }
    if lists.is_empty() {
        return Err(Error::contract("recall over zero queries"));
    }
    let mut hits = 0usize;
    for l in lists {
        let target = gt
            .get(&l.query_id)
            .ok_or_else(|| Error::contract(format!("query {} has no ground truth", l.query_id)))?;
        match l.rank_of(*target) {
            Some(r) if r <= k => hits += 1,
            None if require_present => {
                return Err(Error::contract(format!(
                    "subset of query {} lacks its ground truth",
                    l.query_id
                )))
            }
            _ => {}
        }
    }
    Ok(100.0 * hits as f64 / lists.len() as f64)
}

/// Percentage of queries whose target ranks within the top `k`.
pub fn recall_at_k(lists: &[RankedList], gt: &HashMap<u64, u64>, k: usize) -> Result<f64> {
    count_hits(lists, gt, k, false)
}

/// Recall over per-query five-candidate subsets, `k ∈ {1, 2, 3}`.
pub fn recall_subset_at_k(subset_lists: &[RankedList], gt: &HashMap<u64, u64>, k: usize) -> Result<f64> {
    if !(1..=3).contains(&k) {
        return Err(Error::contract("subset recall is defined for K in 1..=3"));
    }
    count_hits(subset_lists, gt, k, true)
}

/// Half-up rounding to two decimals. The tiny bias absorbs binary
/// representation error of decimal halves (80.895 is stored as
/// 80.89499999999999).
pub fn round2(x: f64) -> f64 {
    ((x * 100.0) + 0.5 + 1e-7).floor() / 100.0
}

/// `(R@10 + R@50) / 2`.
pub fn average_metric_fiq(r10: f64, r50: f64) -> f64 {
    (r10 + r50) / 2.0
}

/// `(R@5 + R_subset@1) / 2`.
pub fn average_metric_cirr(r5: f64, rsub1: f64) -> f64 {
    (r5 + rsub1) / 2.0
}

fn query_bundle(corpus: &SyntheticCorpus, q: &QueryTriplet) -> Result<Vec<u8>> {
    let vocab = Vocab::new(corpus.config.num_slots, corpus.config.values_per_slot);
    let edits = vocab.parse_edits(&q.tokens)?;
    let reference = corpus
        .item(q.ref_id)
        .ok_or_else(|| Error::contract(format!("unknown reference {}", q.ref_id)))?;
    Ok(edited_bundle(reference, &edits))
}

/// Ranks the corpus by the number of attributes shared with the edited
/// reference bundle, ties by ascending id. Scores are match counts.
pub fn oracle_rank(corpus: &SyntheticCorpus, q: &QueryTriplet, exclude_reference: bool) -> Result<RankedList> {
    let want = query_bundle(corpus, q)?;
    let mut ids = Vec::with_capacity(corpus.len());
    let mut scores = Vec::with_capacity(corpus.len());
    for it in &corpus.items {
        if exclude_reference && it.id == q.ref_id {
            continue;
        }
        let m = it.attrs.iter().zip(&want).filter(|(a, b)| a == b).count();
        ids.push(it.id);
        scores.push(m as f32);
    }
    Ok(RankedList::from_scores(q.query_id, &ids, &scores))
}

/// Independent oracle: buckets items by mismatch count and emits buckets
/// from fewest mismatches, each in ascending id order.
pub fn oracle_rank_bucketed(corpus: &SyntheticCorpus, q: &QueryTriplet, exclude_reference: bool) -> Result<RankedList> {
    let want = query_bundle(corpus, q)?;
    let a = want.len();
    let mut buckets: Vec<Vec<u64>> = vec![Vec::new(); a + 1];
    for it in &corpus.items {
        if exclude_reference && it.id == q.ref_id {
            continue;
        }
        let mut miss = 0;
        for s in 0..a {
            if it.attrs[s] != want[s] {
                miss += 1;
            }
        }
        buckets[miss].push(it.id);
    }
    let mut ids = Vec::new();
    let mut scores = Vec::new();
    for (miss, mut b) in buckets.into_iter().enumerate() {
        b.sort_unstable();
        scores.extend(std::iter::repeat_n((a - miss) as f32, b.len()));
        ids.extend(b);
    }
    Ok(RankedList {
        query_id: q.query_id,
        ids,
        scores,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub queries: usize,
    pub filter_total_s: f64,
    pub rerank_total_s: f64,
    pub filter_per_query_us: f64,
    pub rerank_per_query_us: f64,
    /// `rerank_per_query / filter_per_query`, absent when the filter time
    /// is zero.
    pub ratio: Option<f64>,
}

pub fn timing_report(filter: Duration, rerank: Duration, queries: usize) -> Result<TimingReport> {
    if queries == 0 {
        return Err(Error::contract("timing over zero queries"));
    }
    let f = filter.as_secs_f64();
    let r = rerank.as_secs_f64();
    let fq = f * 1e6 / queries as f64;
    let rq = r * 1e6 / queries as f64;
    Ok(TimingReport {
        queries,
        filter_total_s: f,
        rerank_total_s: r,
        filter_per_query_us: fq,
        rerank_per_query_us: rq,
        ratio: (fq > 0.0).then(|| rq / fq),
    })
}

/// Named percentages plus configuration echo and optional timing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: BTreeMap<String, f64>,
    pub echo: BTreeMap<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingReport>,
}

impl MetricReport {
    pub fn set(&mut self, name: impl Into<String>, pct: f64) -> Result<()> {
        if !(0.0..=100.0).contains(&pct) {
            return Err(Error::contract(format!("percentage {pct} outside [0, 100]")));
        }
        self.metrics.insert(name.into(), pct);
        Ok(())
    }

    pub fn echo(&mut self, key: impl Into<String>, value: impl Serialize) {
        self.echo
            .insert(key.into(), serde_json::to_value(value).expect("serializable echo"));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    /// `key = value` lines; percentages at two decimals.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.echo {
            let _ = writeln!(s, "{k} = {v}");
        }
        for (k, v) in &self.metrics {
            let _ = writeln!(s, "{k} = {:.2}", round2(*v));
        }
        if let Some(t) = &self.timing {
            let _ = writeln!(s, "timing.queries = {}", t.queries);
            let _ = writeln!(s, "timing.filter_total_s = {:.6}", t.filter_total_s);
            let _ = writeln!(s, "timing.rerank_total_s = {:.6}", t.rerank_total_s);
            let _ = writeln!(s, "timing.filter_per_query_us = {:.3}", t.filter_per_query_us);
            let _ = writeln!(s, "timing.rerank_per_query_us = {:.3}", t.rerank_per_query_us);
            match t.ratio {
                Some(r) => {
                    let _ = writeln!(s, "timing.ratio = {r:.3}");
                }
                None => {
                    let _ = writeln!(s, "timing.ratio = unavailable");
                }
            }
        }
        s
    }

    /// One JSON object on a single line, percentages rounded.
    pub fn to_json_line(&self) -> String {
        let mut rounded = self.clone();
        for v in rounded.metrics.values_mut() {
            *v = round2(*v);
        }
        serde_json::to_string(&rounded).expect("report serializes")
    }

    /// The report without timing, for reproducibility comparisons.
    pub fn without_timing(&self) -> MetricReport {
        MetricReport {
            timing: None,
            ..self.clone()
        }
    }
}
