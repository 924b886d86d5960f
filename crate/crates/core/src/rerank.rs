//! Candidate re-ranking: a dual encoder whose branches read the cached
//! query feature `z_t` and the embedded modification text, cross-attend a
//! candidate's feature sequence, exchange their cross-attention outputs
//! through a per-layer merge and share feed-forward weights. A two-layer
//! head scores the concatenated `[CLS]` rows.
//!
//! Pairs are processed in bulk: for `P` (query, candidate) pairs the
//! branch states are `P · L` rows, the first self-attention runs once per
//! query before being gathered to pairs, and each layer projects candidate
//! keys and values once per candidate.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttnLayout, Graph, Var};
use crate::checkpoint::{put_f32s, Reader};
use crate::error::{Error, Result};
use crate::eval::RankedList;
use crate::filtering::{rank_order, TopKList};
use crate::nn::{
    padding_mask, residual_norm, AttentionParams, FeedForwardParams, LayerNormParams, Linear,
    TextBatch, TokenEmbedding,
};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationVariant {
    Full,
    WithoutZt,
    RefCls,
    #[serde(rename = "ref-cls-spatial")]
    RefClsSpatial6x6,
    FullMlpMerge,
    #[serde(rename = "dual-ff")]
    DualFeedForward,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 6] = [
        AblationVariant::Full,
        AblationVariant::WithoutZt,
        AblationVariant::RefCls,
        AblationVariant::RefClsSpatial6x6,
        AblationVariant::FullMlpMerge,
        AblationVariant::DualFeedForward,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::WithoutZt => "without-zt",
            AblationVariant::RefCls => "ref-cls",
            AblationVariant::RefClsSpatial6x6 => "ref-cls-spatial",
            AblationVariant::FullMlpMerge => "full-mlp-merge",
            AblationVariant::DualFeedForward => "dual-ff",
        }
    }

    /// What the first branch reads.
    pub fn query_source(self) -> QuerySource {
        match self {
            AblationVariant::WithoutZt => QuerySource::None,
            AblationVariant::RefCls => QuerySource::ReferenceCls,
            AblationVariant::RefClsSpatial6x6 => QuerySource::ReferenceGrid,
            _ => QuerySource::Zt,
        }
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = AblationVariant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant {s:?}; expected one of {names:?}"))
            })
    }
}

/// Input of the first encoder branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuerySource {
    /// No first branch.
    None,
    /// Cached filtering-encoder output, one row per text token.
    Zt,
    /// The reference item's `[CLS]` feature row.
    ReferenceCls,
    /// The reference `[CLS]` row followed by its spatial grid.
    ReferenceGrid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MergeOp {
    AveragePool,
    ConcatMlp,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MergeSchedule(pub Vec<MergeOp>);

impl MergeSchedule {
    /// Average pooling for the first ⌈n/2⌉ layers, concat + MLP after.
    pub fn half_and_half(layers: usize) -> Self {
        let first = layers.div_ceil(2);
        MergeSchedule(
            (0..layers)
                .map(|l| if l < first { MergeOp::AveragePool } else { MergeOp::ConcatMlp })
                .collect(),
        )
    }

    pub fn all_mlp(layers: usize) -> Self {
        MergeSchedule(vec![MergeOp::ConcatMlp; layers])
    }

    pub fn for_variant(variant: AblationVariant, layers: usize) -> Self {
        match variant {
            AblationVariant::FullMlpMerge => Self::all_mlp(layers),
            _ => Self::half_and_half(layers),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RerankConfig {
    pub vocab: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub variant: AblationVariant,
}

impl Default for RerankConfig {
    fn default() -> Self {
        RerankConfig {
            vocab: 64,
            max_len: 16,
            d_model: 64,
            heads: 4,
            layers: 4,
            d_ff: 256,
            variant: AblationVariant::Full,
        }
    }
}

#[derive(Clone, Debug)]
struct Branch {
    sa: AttentionParams,
    ln_sa: LayerNormParams,
    ca: AttentionParams,
    ln_ca: LayerNormParams,
    ff: FeedForwardParams,
    ln_ff: LayerNormParams,
}

#[derive(Clone, Debug)]
struct RerankLayer {
    zt: Option<Branch>,
    t: Branch,
    merge: MergeOp,
    mlp: Option<Linear>,
}

/// Stage-two model f_γ.
#[derive(Debug)]
pub struct RerankModel<T> {
    pub config: RerankConfig,
    pub store: ParamStore<T>,
    pub schedule: MergeSchedule,
    embed: TokenEmbedding,
    layers: Vec<RerankLayer>,
    hidden: Linear,
    out: Linear,
}

impl<T: Scalar> Clone for RerankModel<T> {
    fn clone(&self) -> Self {
        RerankModel {
            config: self.config.clone(),
            store: self.store.clone(),
            schedule: self.schedule.clone(),
            embed: self.embed.clone(),
            layers: self.layers.clone(),
            hidden: self.hidden.clone(),
            out: self.out.clone(),
        }
    }
}

/// One query as seen by the re-ranker.
#[derive(Clone, Debug)]
pub struct QueryInput<T> {
    /// Token ids with leading `[CLS]`.
    pub tokens: Vec<u32>,
    /// First-branch input; ignored by single-branch variants.
    pub z: Option<Tensor<T>>,
}

/// Branch state over `n` sequences of `len` rows each.
#[derive(Clone)]
struct Stream {
    x: Var,
    len: usize,
    lengths: Vec<usize>,
}

impl Stream {
    fn mask(&self) -> Option<Vec<bool>> {
        if self.lengths.iter().all(|&l| l == self.len) {
            None
        } else {
            Some(padding_mask(&self.lengths, self.len))
        }
    }
}

fn expand_rows(seqs: &[usize], len: usize) -> Arc<Vec<usize>> {
    Arc::new(seqs.iter().flat_map(|&s| s * len..(s + 1) * len).collect())
}

impl<T: Scalar> RerankModel<T> {
    pub fn new<R: Rng + ?Sized>(config: RerankConfig, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let d = config.d_model;
        let variant = config.variant;
        let schedule = MergeSchedule::for_variant(variant, config.layers);
        let embed = TokenEmbedding::new(&mut store, "embed", config.vocab, config.max_len, d, rng);
        let two = variant.query_source() != QuerySource::None;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("layer{l}");
            let branch = |store: &mut ParamStore<T>,
                          rng: &mut R,
                          tag: &str,
                          ff: Option<(FeedForwardParams, LayerNormParams)>|
             -> Result<Branch> {
                let q = format!("{p}.{tag}");
                let (ff, ln_ff) = match ff {
                    Some(shared) => shared,
                    None => (
                        FeedForwardParams::new(store, &format!("{q}.ff"), d, config.d_ff, rng),
                        LayerNormParams::new(store, &format!("{q}.ln_ff"), d),
                    ),
                };
                Ok(Branch {
                    sa: AttentionParams::new(store, &format!("{q}.sa"), d, config.heads, rng)?,
                    ln_sa: LayerNormParams::new(store, &format!("{q}.ln_sa"), d),
                    ca: AttentionParams::new(store, &format!("{q}.ca"), d, config.heads, rng)?,
                    ln_ca: LayerNormParams::new(store, &format!("{q}.ln_ca"), d),
                    ff,
                    ln_ff,
                })
            };
            let shared = if two && variant != AblationVariant::DualFeedForward {
                Some((
                    FeedForwardParams::new(&mut store, &format!("{p}.ff"), d, config.d_ff, rng),
                    LayerNormParams::new(&mut store, &format!("{p}.ln_ff"), d),
                ))
            } else {
                None
            };
            let zt = if two {
                Some(branch(&mut store, rng, "zt", shared.clone())?)
            } else {
                None
            };
            let t = branch(&mut store, rng, "t", shared)?;
            let merge = schedule.0[l];
            let mlp = (two && merge == MergeOp::ConcatMlp)
                .then(|| Linear::new(&mut store, &format!("{p}.merge"), 2 * d, d, rng));
            layers.push(RerankLayer { zt, t, merge, mlp });
        }
        let hidden = Linear::new(&mut store, "scorer.hidden", 2 * d, d, rng);
        let out = Linear::new(&mut store, "scorer.out", d, 1, rng);
        Ok(RerankModel {
            config,
            store,
            schedule,
            embed,
            layers,
            hidden,
            out,
        })
    }

    pub fn variant(&self) -> AblationVariant {
        self.config.variant
    }

    /// True when layer `l` of both branches reads one FF parameter set.
    pub fn shares_feed_forward(&self, l: usize) -> bool {
        match &self.layers[l].zt {
            Some(zt) => zt.ff.up.w == self.layers[l].t.ff.up.w,
            None => false,
        }
    }

    pub fn zero_scorer(&mut self) {
        self.hidden.zero(&mut self.store);
        self.out.zero(&mut self.store);
    }

    /// Copies every first-branch SA/CA/LN parameter from the text branch.
    pub fn tie_branches(&mut self) {
        for layer in &self.layers {
            let Some(zt) = &layer.zt else { continue };
            let pairs = [
                (&zt.sa, &layer.t.sa),
                (&zt.ca, &layer.t.ca),
            ];
            for (dst, src) in pairs {
                for (d, s) in [(&dst.q, &src.q), (&dst.k, &src.k), (&dst.v, &src.v), (&dst.o, &src.o)] {
                    *self.store.value_mut(d.w) = self.store.value(s.w).clone();
                    *self.store.value_mut(d.b) = self.store.value(s.b).clone();
                }
            }
            for (d, s) in [(&zt.ln_sa, &layer.t.ln_sa), (&zt.ln_ca, &layer.t.ln_ca), (&zt.ln_ff, &layer.t.ln_ff)] {
                *self.store.value_mut(d.gamma) = self.store.value(s.gamma).clone();
                *self.store.value_mut(d.beta) = self.store.value(s.beta).clone();
            }
            for (d, s) in [(&zt.ff.up, &layer.t.ff.up), (&zt.ff.down, &layer.t.ff.down)] {
                *self.store.value_mut(d.w) = self.store.value(s.w).clone();
                *self.store.value_mut(d.b) = self.store.value(s.b).clone();
            }
        }
    }

    /// Sets every concat-MLP merge to the average of its two halves.
    pub fn set_averaging_merges(&mut self) {
        let d = self.config.d_model;
        for layer in &self.layers {
            if let Some(mlp) = &layer.mlp {
                let mut w = Tensor::zeros(&[2 * d, d]);
                for i in 0..d {
                    w.data_mut()[i * d + i] = T::lit(0.5);
                    w.data_mut()[(d + i) * d + i] = T::lit(0.5);
                }
                *self.store.value_mut(mlp.w) = w;
                self.store.value_mut(mlp.b).fill(T::zero());
            }
        }
    }

    /// Embedded text rows (the second branch's input).
    pub fn embed_text(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        let batch = TextBatch::new(&[tokens], self.config.max_len)?;
        let mut g = Graph::new();
        let x = self.embed.forward(&mut g, &self.store, &batch)?;
        Ok(g.value(x).clone())
    }

    fn check_query(&self, q: &QueryInput<T>) -> Result<()> {
        let d = self.config.d_model;
        let source = self.variant().query_source();
        if source == QuerySource::None {
            return Ok(());
        }
        let z = q
            .z
            .as_ref()
            .ok_or_else(|| Error::contract("first-branch input missing"))?;
        if z.cols() != d {
            return Err(Error::dim("first-branch width", &[z.cols()], &[d]));
        }
        let ok = match source {
            QuerySource::Zt => z.rows() == q.tokens.len(),
            QuerySource::ReferenceCls => z.rows() == 1,
            _ => z.rows() >= 1,
        };
        if !ok {
            return Err(Error::contract(format!(
                "first-branch length {} does not fit text length {} for {}",
                z.rows(),
                q.tokens.len(),
                self.variant()
            )));
        }
        Ok(())
    }

    fn query_streams(&self, g: &mut Graph<T>, queries: &[&QueryInput<T>]) -> Result<(Option<Stream>, Stream)> {
        for q in queries {
            self.check_query(q)?;
        }
        let texts: Vec<&[u32]> = queries.iter().map(|q| q.tokens.as_slice()).collect();
        let batch = TextBatch::new(&texts, self.config.max_len)?;
        let tx = self.embed.forward(g, &self.store, &batch)?;
        let t = Stream {
            x: tx,
            len: batch.padded_len,
            lengths: batch.lengths.clone(),
        };
        if self.variant().query_source() == QuerySource::None {
            return Ok((None, t));
        }
        let d = self.config.d_model;
        let zs: Vec<&Tensor<T>> = queries.iter().map(|q| q.z.as_ref().expect("checked")).collect();
        let len = zs.iter().map(|z| z.rows()).max().unwrap_or(0);
        let mut data = Vec::with_capacity(zs.len() * len * d);
        for z in &zs {
            data.extend_from_slice(z.data());
            data.extend(std::iter::repeat_n(T::zero(), (len - z.rows()) * d));
        }
        let zx = g.constant(Tensor::new(vec![zs.len() * len, d], data)?);
        Ok((
            Some(Stream {
                x: zx,
                len,
                lengths: zs.iter().map(|z| z.rows()).collect(),
            }),
            t,
        ))
    }

    fn self_block(&self, g: &mut Graph<T>, br: &Branch, s: &Stream) -> Result<Var> {
        let n = s.lengths.len();
        let layout = Arc::new(AttnLayout::self_attn(self.config.heads, n, s.len, s.mask()));
        let a = br.sa.self_attention(g, &self.store, s.x, layout)?;
        residual_norm(g, &self.store, &br.ln_sa, s.x, a)
    }

    fn cross_block(
        &self,
        g: &mut Graph<T>,
        br: &Branch,
        s: &Stream,
        cands: Var,
        cand_len: usize,
        pair_cand: &[usize],
    ) -> Result<Var> {
        let (k, v) = br.ca.project_kv(g, &self.store, cands)?;
        let layout = Arc::new(AttnLayout {
            heads: self.config.heads,
            q_len: s.len,
            k_len: cand_len,
            key_seq: pair_cand.to_vec(),
            key_mask: None,
        });
        br.ca.attend(g, &self.store, s.x, k, v, layout)
    }

    /// Rows of `other` aligned to `len` rows per pair: identity for equal
    /// lengths, otherwise the partner's `[CLS]` row repeated.
    fn align(&self, g: &mut Graph<T>, other: Var, other_len: usize, len: usize, pairs: usize) -> Result<Var> {
        if other_len == len {
            return Ok(other);
        }
        let idx: Vec<usize> = (0..pairs).flat_map(|p| std::iter::repeat_n(p * other_len, len)).collect();
        g.gather_rows(other, Arc::new(idx))
    }

    fn merge(&self, g: &mut Graph<T>, layer: &RerankLayer, zt: Var, t: Var) -> Result<Var> {
        match (layer.merge, &layer.mlp) {
            (MergeOp::ConcatMlp, Some(mlp)) => {
                let c = g.concat_cols(zt, t)?;
                mlp.forward(g, &self.store, c)
            }
            _ => {
                let s = g.add(zt, t)?;
                Ok(g.scale(s, T::lit(0.5)))
            }
        }
    }

    fn ff_block(&self, g: &mut Graph<T>, br: &Branch, x: Var) -> Result<Var> {
        let f = br.ff.forward(g, &self.store, x)?;
        residual_norm(g, &self.store, &br.ln_ff, x, f)
    }

    /// Final `[CLS]` rows of both branches for every (query, candidate)
    /// pair. `candidates` stacks candidate sequences of `cand_len` rows.
    /// Single-branch variants return the text branch twice.
    pub fn encode_pairs(
        &self,
        g: &mut Graph<T>,
        queries: &[&QueryInput<T>],
        candidates: Var,
        cand_len: usize,
        pairs: &[(usize, usize)],
    ) -> Result<(Var, Var)> {
        let d = self.config.d_model;
        let cand_rows = g.value(candidates).rows();
        if g.value(candidates).cols() != d {
            return Err(Error::dim("candidate width", &[g.value(candidates).cols()], &[d]));
        }
        if cand_len == 0 || cand_rows % cand_len != 0 {
            return Err(Error::contract("candidate rows are not whole sequences"));
        }
        let n_cand = cand_rows / cand_len;
        if pairs.iter().any(|&(q, c)| q >= queries.len() || c >= n_cand) {
            return Err(Error::contract("pair index out of range"));
        }
        if pairs.is_empty() {
            return Err(Error::contract("no pairs to encode"));
        }
        let (zq, tq) = self.query_streams(g, queries)?;
        let pair_query: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let pair_cand: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let np = pairs.len();
        let to_pairs = |s: &Stream, x: Var, g: &mut Graph<T>| -> Result<Stream> {
            Ok(Stream {
                x: g.gather_rows(x, expand_rows(&pair_query, s.len))?,
                len: s.len,
                lengths: pair_query.iter().map(|&q| s.lengths[q]).collect(),
            })
        };
        let mut a: Option<Stream> = zq;
        let mut b: Stream = tq;
        for (l, layer) in self.layers.iter().enumerate() {
            // self-attention: per query in the first layer, per pair after
            let a1 = match (&a, &layer.zt) {
                (Some(s), Some(br)) => {
                    let x = self.self_block(g, br, s)?;
                    Some(if l == 0 { to_pairs(s, x, g)? } else { Stream { x, ..s.clone() } })
                }
                _ => None,
            };
            let b1 = {
                let x = self.self_block(g, &layer.t, &b)?;
                if l == 0 { to_pairs(&b, x, g)? } else { Stream { x, ..b.clone() } }
            };
            let ca_b = self.cross_block(g, &layer.t, &b1, candidates, cand_len, &pair_cand)?;
            match (a1, &layer.zt) {
                (Some(a1), Some(br)) => {
                    let ca_a = self.cross_block(g, br, &a1, candidates, cand_len, &pair_cand)?;
                    let (ma, mb) = if a1.len == b1.len {
                        let m = self.merge(g, layer, ca_a, ca_b)?;
                        (m, m)
                    } else {
                        let b_for_a = self.align(g, ca_b, b1.len, a1.len, np)?;
                        let a_for_b = self.align(g, ca_a, a1.len, b1.len, np)?;
                        (
                            self.merge(g, layer, ca_a, b_for_a)?,
                            self.merge(g, layer, a_for_b, ca_b)?,
                        )
                    };
                    let xa = residual_norm(g, &self.store, &br.ln_ca, a1.x, ma)?;
                    let xa = self.ff_block(g, br, xa)?;
                    a = Some(Stream { x: xa, ..a1 });
                    let xb = residual_norm(g, &self.store, &layer.t.ln_ca, b1.x, mb)?;
                    let xb = self.ff_block(g, &layer.t, xb)?;
                    b = Stream { x: xb, ..b1 };
                }
                _ => {
                    let xb = residual_norm(g, &self.store, &layer.t.ln_ca, b1.x, ca_b)?;
                    let xb = self.ff_block(g, &layer.t, xb)?;
                    b = Stream { x: xb, ..b1 };
                }
            }
        }
        if self.layers.is_empty() {
            if let Some(s) = &a {
                let x = g.gather_rows(s.x, expand_rows(&pair_query, s.len))?;
                a = Some(Stream { x, ..s.clone() });
            }
            let x = g.gather_rows(b.x, expand_rows(&pair_query, b.len))?;
            b = Stream { x, ..b };
        }
        let cls_b = g.gather_rows(b.x, Arc::new((0..np).map(|p| p * b.len).collect()))?;
        let cls_a = match &a {
            Some(s) => g.gather_rows(s.x, Arc::new((0..np).map(|p| p * s.len).collect()))?,
            None => cls_b,
        };
        Ok((cls_a, cls_b))
    }

    /// One logit per pair, shape `P × 1`.
    pub fn score_pairs(
        &self,
        g: &mut Graph<T>,
        queries: &[&QueryInput<T>],
        candidates: Var,
        cand_len: usize,
        pairs: &[(usize, usize)],
    ) -> Result<Var> {
        let (a, b) = self.encode_pairs(g, queries, candidates, cand_len, pairs)?;
        let c = g.concat_cols(a, b)?;
        let h = self.hidden.forward(g, &self.store, c)?;
        let h = g.gelu(h);
        self.out.forward(g, &self.store, h)
    }

    /// `(cls_zt, cls_t)` for one triplet.
    pub fn encode_pair(&self, query: &QueryInput<T>, candidate: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
        let mut g = Graph::new();
        let c = g.constant(candidate.clone());
        let (a, b) = self.encode_pairs(&mut g, &[query], c, candidate.rows(), &[(0, 0)])?;
        Ok((g.value(a).data().to_vec(), g.value(b).data().to_vec()))
    }

    pub fn score_triplet(&self, query: &QueryInput<T>, candidate: &Tensor<T>) -> Result<T> {
        Ok(self.score_candidates(query, candidate, candidate.rows())?[0])
    }

    /// Logits of one query against stacked candidates.
    pub fn score_candidates(&self, query: &QueryInput<T>, candidates: &Tensor<T>, cand_len: usize) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let c = g.constant(candidates.clone());
        let n = candidates.rows() / cand_len.max(1);
        let pairs: Vec<(usize, usize)> = (0..n).map(|j| (0, j)).collect();
        let s = self.score_pairs(&mut g, &[query], c, cand_len, &pairs)?;
        let v = g.value(s).data().to_vec();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("re-ranking logits"));
        }
        Ok(v)
    }

    /// `B × B` logits with entry `(i, j)` scoring query `i` against
    /// candidate `j`.
    pub fn batch_logits(
        &self,
        g: &mut Graph<T>,
        queries: &[&QueryInput<T>],
        candidates: Var,
        cand_len: usize,
    ) -> Result<Var> {
        let b = queries.len();
        let pairs: Vec<(usize, usize)> = (0..b).flat_map(|i| (0..b).map(move |j| (i, j))).collect();
        let s = self.score_pairs(g, queries, candidates, cand_len, &pairs)?;
        g.reshape(s, vec![b, b])
    }
}

/// Mean over rows of `−log softmax` at the diagonal of a square logit
/// matrix.
pub fn rerank_loss<T: Scalar>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    g.cross_entropy_diag(logits)
}

/// Reorders the first `K` entries of `full` by descending logit (ties by
/// ascending id); later entries keep their filtering order. `logits` is
/// aligned with `topk.ids`.
pub fn rerank_candidates(topk: &TopKList, logits: &[f32], full: &RankedList) -> Result<RankedList> {
    let k = topk.ids.len();
    if logits.len() != k {
        return Err(Error::contract("one logit per top-K candidate required"));
    }
    if k > full.ids.len() {
        return Err(Error::contract("top-K longer than the full ranking"));
    }
    let head: HashSet<u64> = full.ids[..k].iter().copied().collect();
    if topk.ids.iter().any(|id| !head.contains(id)) {
        return Err(Error::contract("top-K ids are not the head of the full ranking"));
    }
    let mut scored: Vec<(f32, u64)> = logits.iter().copied().zip(topk.ids.iter().copied()).collect();
    scored.sort_by(|a, b| rank_order(*a, *b));
    let mut ids: Vec<u64> = scored.iter().map(|s| s.1).collect();
    let mut scores: Vec<f32> = scored.iter().map(|s| s.0).collect();
    ids.extend_from_slice(&full.ids[k..]);
    scores.extend_from_slice(&full.scores[k..]);
    Ok(RankedList {
        query_id: full.query_id,
        ids,
        scores,
    })
}

const ZT_MAGIC: &[u8; 6] = b"CIR2ZT";
const ZT_VERSION: u32 = 1;

/// Per-query `z_t` features computed by a frozen filtering checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct ZtCache {
    pub d_model: usize,
    pub entries: BTreeMap<u64, Tensor<f32>>,
    /// Content hash of the filtering checkpoint.
    pub provenance: [u8; 32],
}

impl ZtCache {
    pub fn new(d_model: usize, provenance: [u8; 32]) -> Self {
        ZtCache {
            d_model,
            entries: BTreeMap::new(),
            provenance,
        }
    }

    pub fn insert(&mut self, query_id: u64, z: Tensor<f32>) -> Result<()> {
        if z.cols() != self.d_model || z.rows() == 0 {
            return Err(Error::dim("z_t cache entry", z.shape(), &[0, self.d_model]));
        }
        self.entries.insert(query_id, z);
        Ok(())
    }

    pub fn get(&self, query_id: u64) -> Option<&Tensor<f32>> {
        self.entries.get(&query_id)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ZT_MAGIC);
        out.extend_from_slice(&ZT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.d_model as u32).to_le_bytes());
        for (id, z) in &self.entries {
            out.extend_from_slice(&id.to_le_bytes());
            out.extend_from_slice(&(z.rows() as u32).to_le_bytes());
            put_f32s(&mut out, z.data());
        }
        out.extend_from_slice(&self.provenance);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::Format {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        let mut r = Reader::new(bytes);
        if r.take(6).map_err(|_| bad("truncated header"))? != ZT_MAGIC {
            return Err(bad("not a z_t cache"));
        }
        let version = r.u32().map_err(|_| bad("truncated header"))?;
        if version != ZT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let d = r.u32().map_err(|_| bad("truncated header"))? as usize;
        let mut cache = ZtCache::new(d, [0; 32]);
        while r.remaining() > 32 {
            let id = r.u64().map_err(|_| bad("truncated record"))?;
            let len = r.u32().map_err(|_| bad("truncated record"))? as usize;
            let data = r.f32s(len * d).map_err(|_| bad("truncated record"))?;
            cache.insert(id, Tensor::new(vec![len, d], data)?)?;
        }
        cache.provenance = r
            .take(32)
            .map_err(|_| bad("missing provenance trailer"))?
            .try_into()
            .expect("32 bytes");
        Ok(cache)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(variant: AblationVariant) -> RerankConfig {
        RerankConfig {
            vocab: 20,
            max_len: 10,
            d_model: 8,
            heads: 2,
            layers: 4,
            d_ff: 16,
            variant,
        }
    }

    fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        crate::params::truncated_normal(rng, &[r, c], 1.0)
    }

    fn query(rng: &mut ChaCha8Rng, tokens: Vec<u32>, z_len: usize) -> QueryInput<f64> {
        QueryInput {
            z: Some(rand_t(rng, z_len, 8)),
            tokens,
        }
    }

    #[test]
    fn schedule_defaults() {
        use MergeOp::*;
        assert_eq!(MergeSchedule::half_and_half(4).0, vec![AveragePool, AveragePool, ConcatMlp, ConcatMlp]);
        assert_eq!(MergeSchedule::half_and_half(12).0.iter().filter(|&&m| m == AveragePool).count(), 6);
        assert_eq!(MergeSchedule::half_and_half(3).0, vec![AveragePool, AveragePool, ConcatMlp]);
        assert_eq!(MergeSchedule::for_variant(AblationVariant::FullMlpMerge, 4).0, vec![ConcatMlp; 4]);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in AblationVariant::ALL {
            assert_eq!(v.name().parse::<AblationVariant>().unwrap(), v);
        }
        assert!("bogus".parse::<AblationVariant>().is_err());
    }

    #[test]
    fn feed_forward_sharing_follows_variant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let full = RerankModel::<f64>::new(tiny(AblationVariant::Full), &mut rng).unwrap();
        let dual = RerankModel::<f64>::new(tiny(AblationVariant::DualFeedForward), &mut rng).unwrap();
        for l in 0..4 {
            assert!(full.shares_feed_forward(l));
            assert!(!dual.shares_feed_forward(l));
        }
        assert!(dual.store.num_scalars() > full.store.num_scalars());
    }

    #[test]
    fn tied_branches_give_identical_cls() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = RerankModel::<f64>::new(tiny(AblationVariant::Full), &mut rng).unwrap();
        m.tie_branches();
        let tokens = vec![1u32, 4, 5, 6, 7];
        let z = m.embed_text(&tokens).unwrap();
        let q = QueryInput { tokens, z: Some(z) };
        let cand = rand_t(&mut rng, 37, 8);
        let (a, b) = m.encode_pair(&q, &cand).unwrap();
        assert_eq!(a.len(), 8);
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-6);
        }
        // untied branches differ
        let m2 = RerankModel::<f64>::new(tiny(AblationVariant::Full), &mut rng).unwrap();
        let (a, b) = m2.encode_pair(&q, &cand).unwrap();
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn averaging_mlp_merge_matches_average_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut full = RerankModel::<f64>::new(tiny(AblationVariant::Full), &mut rng).unwrap();
        let mut mlp = RerankModel::<f64>::new(tiny(AblationVariant::FullMlpMerge), &mut rng).unwrap();
        full.set_averaging_merges();
        mlp.set_averaging_merges();
        let shared: Vec<(String, Tensor<f64>)> = mlp
            .store
            .iter()
            .map(|(_, p)| {
                let v = match full.store.id(&p.name) {
                    Some(id) => full.store.value(id).clone(),
                    None => p.value.clone(),
                };
                (p.name.clone(), v)
            })
            .collect();
        mlp.store.load_values(&shared).unwrap();
        let q = query(&mut rng, vec![1, 4, 5, 6, 7, 8, 9, 10, 11], 9);
        let cand = rand_t(&mut rng, 37, 8);
        let (a1, b1) = full.encode_pair(&q, &cand).unwrap();
        let (a2, b2) = mlp.encode_pair(&q, &cand).unwrap();
        for (x, y) in a1.iter().chain(&b1).zip(a2.iter().chain(&b2)) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-6);
        }
    }

    #[test]
    fn zero_scorer_gives_zero_logit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = RerankModel::<f64>::new(tiny(AblationVariant::Full), &mut rng).unwrap();
        m.zero_scorer();
        let q = query(&mut rng, vec![1, 4, 5], 3);
        let cand = rand_t(&mut rng, 37, 8);
        assert_eq!(m.score_triplet(&q, &cand).unwrap(), 0.0);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = RerankModel::<f64>::new(tiny(AblationVariant::Full), &mut rng).unwrap();
        let q = query(&mut rng, vec![1, 4, 5], 4);
        let cand = rand_t(&mut rng, 37, 8);
        assert!(matches!(m.score_triplet(&q, &cand), Err(Error::Contract(_))));
    }

    #[test]
    fn without_zt_ignores_first_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = RerankModel::<f64>::new(tiny(AblationVariant::WithoutZt), &mut rng).unwrap();
        let cand = rand_t(&mut rng, 37, 8);
        let q1 = query(&mut rng, vec![1, 4, 5], 3);
        let q2 = QueryInput { tokens: q1.tokens.clone(), z: None };
        let (a, b) = m.encode_pair(&q1, &cand).unwrap();
        assert_eq!(a, b);
        assert_eq!(m.score_triplet(&q1, &cand).unwrap(), m.score_triplet(&q2, &cand).unwrap());
    }

    #[test]
    fn reference_variants_accept_their_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cand = rand_t(&mut rng, 37, 8);
        let rc = RerankModel::<f64>::new(tiny(AblationVariant::RefCls), &mut rng).unwrap();
        let q = query(&mut rng, vec![1, 4, 5, 6, 7], 1);
        assert!(rc.score_triplet(&q, &cand).unwrap().is_finite());
        let rs = RerankModel::<f64>::new(tiny(AblationVariant::RefClsSpatial6x6), &mut rng).unwrap();
        let q = query(&mut rng, vec![1, 4, 5, 6, 7], 37);
        assert!(rs.score_triplet(&q, &cand).unwrap().is_finite());
    }

    #[test]
    fn batched_scores_match_single_triplets() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for variant in AblationVariant::ALL {
            let m = RerankModel::<f64>::new(tiny(variant), &mut rng).unwrap();
            let z_len = |n: usize| match variant.query_source() {
                QuerySource::ReferenceCls => 1,
                QuerySource::ReferenceGrid => 37,
                _ => n,
            };
            let qa = query(&mut rng, vec![1, 4, 5, 6, 7], z_len(5));
            let qb = query(&mut rng, vec![1, 4, 5, 6, 7, 8, 9, 10, 11], z_len(9));
            let c0 = rand_t(&mut rng, 37, 8);
            let c1 = rand_t(&mut rng, 37, 8);
            let mut both = c0.data().to_vec();
            both.extend_from_slice(c1.data());
            let mut g = Graph::new();
            let cv = g.constant(Tensor::new(vec![74, 8], both).unwrap());
            let l = m.batch_logits(&mut g, &[&qa, &qb], cv, 37).unwrap();
            let l = g.value(l).clone();
            assert_eq!(l.shape(), &[2, 2]);
            let single = [
                m.score_triplet(&qa, &c0).unwrap(),
                m.score_triplet(&qa, &c1).unwrap(),
                m.score_triplet(&qb, &c0).unwrap(),
                m.score_triplet(&qb, &c1).unwrap(),
            ];
            for (x, y) in l.data().iter().zip(single) {
                assert_abs_diff_eq!(*x, y, epsilon = 1e-10);
            }
        }
    }

    fn loss_of(rows: &[Vec<f64>]) -> f64 {
        let mut g = Graph::new();
        let l = g.constant(Tensor::from_rows(rows));
        let v = rerank_loss(&mut g, l).unwrap();
        g.value(v).item()
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss_of(&[vec![3.0]]), 0.0);
        assert_abs_diff_eq!(loss_of(&vec![vec![0.4; 3]; 3]), 3f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(
            loss_of(&[vec![2.0, 0.0], vec![0.0, 2.0]]),
            (1.0 + (-2f64).exp()).ln(),
            epsilon = 1e-12
        );
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros(&[2, 3]));
        assert!(rerank_loss(&mut g, l).is_err());
    }

    fn ranked(ids: Vec<u64>) -> (TopKList, RankedList) {
        let scores: Vec<f32> = (0..ids.len()).map(|i| 1.0 - i as f32 * 0.1).collect();
        (
            TopKList {
                query_id: 0,
                ids: ids.clone(),
                scores: scores.clone(),
            },
            RankedList {
                query_id: 0,
                ids,
                scores,
            },
        )
    }

    #[test]
    fn rerank_reorders_only_the_head() {
        let (mut top, full) = ranked(vec![7, 3, 9, 1, 4]);
        top.ids.truncate(3);
        top.scores.truncate(3);
        let out = rerank_candidates(&top, &[0.0, 0.0, 0.0], &full).unwrap();
        assert_eq!(out.ids, vec![3, 7, 9, 1, 4]);
        let out = rerank_candidates(&top, &[0.1, 0.5, 0.9], &full).unwrap();
        assert_eq!(out.ids, vec![9, 3, 7, 1, 4]);
        let mut one = top.clone();
        one.ids.truncate(1);
        assert_eq!(rerank_candidates(&one, &[5.0], &full).unwrap().ids, full.ids);
        let mut bad = top.clone();
        bad.ids[0] = 4;
        assert!(rerank_candidates(&bad, &[0.0; 3], &full).is_err());
    }

    #[test]
    fn zt_cache_round_trip() {
        let mut c = ZtCache::new(2, [9; 32]);
        c.insert(4, Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        c.insert(1, Tensor::new(vec![3, 2], vec![0.5; 6]).unwrap()).unwrap();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..6], b"CIR2ZT");
        assert_eq!(ZtCache::from_bytes(&bytes, Path::new("z")).unwrap(), c);
        assert!(ZtCache::from_bytes(&bytes[..bytes.len() - 40], Path::new("z")).is_err());
        assert!(c.clone().insert(2, Tensor::zeros(&[1, 3])).is_err());
    }
}
