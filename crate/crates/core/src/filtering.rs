//! Candidate filtering: a multimodal text encoder that fuses the
//! modification text with reference-image features, a cosine-similarity
//! index over candidate `[CLS]` embeddings, and exact top-K selection.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttnLayout, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{
    cls_rows, residual_norm, AttentionParams, FeedForwardParams, LayerNormParams, Linear,
    TextBatch, TokenEmbedding,
};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Upper bound on the logit scale λ.
pub const MAX_TEMPERATURE: f64 = 100.0;
/// λ at initialization.
pub const INIT_TEMPERATURE: f64 = 1.0 / 0.07;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub vocab: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub d_proj: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            vocab: 64,
            max_len: 16,
            d_model: 64,
            heads: 4,
            layers: 4,
            d_ff: 256,
            d_proj: 32,
        }
    }
}

/// Whether the encoder's cross-attention sublayers run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderMode {
    UniModal,
    MultiModal,
}

#[derive(Clone, Debug)]
struct FilterLayer {
    sa: AttentionParams,
    ln_sa: LayerNormParams,
    ca: AttentionParams,
    ln_ca: LayerNormParams,
    ff: FeedForwardParams,
    ln_ff: LayerNormParams,
}

/// Stage-one model f_θ with learnable temperature.
#[derive(Debug)]
pub struct FilteringModel<T> {
    pub config: FilterConfig,
    pub store: ParamStore<T>,
    embed: TokenEmbedding,
    layers: Vec<FilterLayer>,
    text_proj: Linear,
    image_proj: Linear,
    log_temp: ParamId,
}

impl<T: Scalar> Clone for FilteringModel<T> {
    fn clone(&self) -> Self {
        FilteringModel {
            config: self.config.clone(),
            store: self.store.clone(),
            embed: self.embed.clone(),
            layers: self.layers.clone(),
            text_proj: self.text_proj.clone(),
            image_proj: self.image_proj.clone(),
            log_temp: self.log_temp,
        }
    }
}

/// Batched forward result; `z` holds `n · padded_len` rows.
pub struct QueryForward {
    pub z: Var,
    pub embeddings: Var,
    pub padded_len: usize,
}

impl<T: Scalar> FilteringModel<T> {
    pub fn new<R: Rng + ?Sized>(config: FilterConfig, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let d = config.d_model;
        let embed = TokenEmbedding::new(&mut store, "embed", config.vocab, config.max_len, d, rng);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("layer{l}");
            layers.push(FilterLayer {
                sa: AttentionParams::new(&mut store, &format!("{p}.sa"), d, config.heads, rng)?,
                ln_sa: LayerNormParams::new(&mut store, &format!("{p}.ln_sa"), d),
                ca: AttentionParams::new(&mut store, &format!("{p}.ca"), d, config.heads, rng)?,
                ln_ca: LayerNormParams::new(&mut store, &format!("{p}.ln_ca"), d),
                ff: FeedForwardParams::new(&mut store, &format!("{p}.ff"), d, config.d_ff, rng),
                ln_ff: LayerNormParams::new(&mut store, &format!("{p}.ln_ff"), d),
            });
        }
        let text_proj = Linear::new(&mut store, "text_proj", d, config.d_proj, rng);
        let image_proj = Linear::new(&mut store, "image_proj", d, config.d_proj, rng);
        let log_temp = store.add(
            "log_temp",
            Tensor::scalar(T::lit(INIT_TEMPERATURE.ln())),
            true,
        );
        Ok(FilteringModel {
            config,
            store,
            embed,
            layers,
            text_proj,
            image_proj,
            log_temp,
        })
    }

    pub fn temperature(&self) -> f64 {
        self.store.value(self.log_temp).item().as_f64().exp()
    }

    pub fn set_temperature(&mut self, lambda: f64) -> Result<()> {
        if !(lambda > 0.0) {
            return Err(Error::contract("temperature must be positive"));
        }
        *self.store.value_mut(self.log_temp) = Tensor::scalar(T::lit(lambda.min(MAX_TEMPERATURE).ln()));
        Ok(())
    }

    /// Keeps λ ≤ 100 after an optimizer step.
    pub fn clamp_temperature(&mut self) {
        let cap = T::lit(MAX_TEMPERATURE.ln());
        let v = self.store.value_mut(self.log_temp);
        if v.item() > cap {
            *v = Tensor::scalar(cap);
        }
    }

    /// Zeroes every cross-attention projection.
    pub fn zero_cross_attention(&mut self) {
        for l in &self.layers {
            l.ca.zero(&mut self.store);
        }
    }

    fn check_images(&self, g: &Graph<T>, images: Var) -> Result<()> {
        let c = g.value(images).cols();
        if c != self.config.d_model {
            return Err(Error::dim("image feature width", &[c], &[self.config.d_model]));
        }
        Ok(())
    }

    /// Runs the text encoder over a padded batch. In multimodal mode text
    /// sequence `i` cross-attends image sequence `image_of[i]` of the
    /// stacked `images` (each `image_len` rows).
    pub fn encode_text(
        &self,
        g: &mut Graph<T>,
        batch: &TextBatch,
        images: Option<(Var, usize, &[usize])>,
        mode: EncoderMode,
    ) -> Result<Var> {
        let store = &self.store;
        let heads = self.config.heads;
        let self_layout = batch.self_layout(heads);
        let cross = match (mode, images) {
            (EncoderMode::UniModal, _) => None,
            (EncoderMode::MultiModal, Some((img, img_len, image_of))) => {
                self.check_images(g, img)?;
                if image_of.len() != batch.len() {
                    return Err(Error::contract("one image per text required"));
                }
                let n_img = g.value(img).rows() / img_len.max(1);
                if img_len == 0 || g.value(img).rows() % img_len != 0 || image_of.iter().any(|&i| i >= n_img) {
                    return Err(Error::contract("image layout does not match feature rows"));
                }
                let layout = Arc::new(AttnLayout {
                    heads,
                    q_len: batch.padded_len,
                    k_len: img_len,
                    key_seq: image_of.to_vec(),
                    key_mask: None,
                });
                Some((img, layout))
            }
            (EncoderMode::MultiModal, None) => {
                return Err(Error::contract("multimodal encoding needs image features"))
            }
        };
        let mut x = self.embed.forward(g, store, batch)?;
        for layer in &self.layers {
            let a = layer.sa.self_attention(g, store, x, self_layout.clone())?;
            x = residual_norm(g, store, &layer.ln_sa, x, a)?;
            if let Some((img, layout)) = &cross {
                let c = layer.ca.cross_attention(g, store, x, *img, layout.clone())?;
                x = residual_norm(g, store, &layer.ln_ca, x, c)?;
            }
            let f = layer.ff.forward(g, store, x)?;
            x = residual_norm(g, store, &layer.ln_ff, x, f)?;
        }
        Ok(x)
    }

    /// Encodes queries and returns `z` plus unit-norm projected `[CLS]` rows.
    pub fn forward_queries(
        &self,
        g: &mut Graph<T>,
        batch: &TextBatch,
        images: Var,
        image_len: usize,
        image_of: &[usize],
    ) -> Result<QueryForward> {
        let z = self.encode_text(g, batch, Some((images, image_len, image_of)), EncoderMode::MultiModal)?;
        let cls = g.gather_rows(z, cls_rows(batch.len(), batch.padded_len))?;
        let p = self.text_proj.forward(g, &self.store, cls)?;
        let embeddings = g.l2_normalize_rows(p)?;
        Ok(QueryForward {
            z,
            embeddings,
            padded_len: batch.padded_len,
        })
    }

    /// Unit-norm projections of the `[CLS]` rows of stacked candidates.
    pub fn forward_candidates(&self, g: &mut Graph<T>, images: Var, image_len: usize) -> Result<Var> {
        self.check_images(g, images)?;
        let rows = g.value(images).rows();
        if image_len == 0 || rows % image_len != 0 {
            return Err(Error::contract("candidate rows are not whole sequences"));
        }
        let cls = g.gather_rows(images, cls_rows(rows / image_len, image_len))?;
        let p = self.image_proj.forward(g, &self.store, cls)?;
        g.l2_normalize_rows(p)
    }

    pub fn temperature_var(&self, g: &mut Graph<T>) -> Var {
        let lt = g.param(&self.store, self.log_temp);
        g.exp(lt)
    }

    /// `z_t` (one row per text token) and the query embedding.
    pub fn encode_query(&self, tokens: &[u32], image_feats: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
        if tokens.is_empty() {
            return Err(Error::contract("empty modification text"));
        }
        let mut out = self.encode_queries(&[tokens], image_feats, image_feats.rows())?;
        Ok(out.pop().expect("one query"))
    }

    /// Batched inference; `images` stacks one reference sequence per text.
    pub fn encode_queries(
        &self,
        texts: &[&[u32]],
        images: &Tensor<T>,
        image_len: usize,
    ) -> Result<Vec<(Tensor<T>, Vec<T>)>> {
        let batch = TextBatch::new(texts, self.config.max_len)?;
        let mut g = Graph::new();
        let img = g.constant(images.clone());
        let image_of: Vec<usize> = (0..texts.len()).collect();
        let fwd = self.forward_queries(&mut g, &batch, img, image_len, &image_of)?;
        let z = g.value(fwd.z);
        let e = g.value(fwd.embeddings);
        let d = self.config.d_model;
        let mut out = Vec::with_capacity(texts.len());
        for (i, &len) in batch.lengths.iter().enumerate() {
            let start = i * batch.padded_len * d;
            let zt = Tensor::new(vec![len, d], z.data()[start..start + len * d].to_vec())?;
            out.push((zt, e.row(i).to_vec()));
        }
        Ok(out)
    }

    /// Text-only encoding (cross-attention skipped).
    pub fn encode_unimodal(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        let batch = TextBatch::new(&[tokens], self.config.max_len)?;
        let mut g = Graph::new();
        let z = self.encode_text(&mut g, &batch, None, EncoderMode::UniModal)?;
        Ok(g.value(z).clone())
    }

    pub fn embed_candidate(&self, image_feats: &Tensor<T>) -> Result<Vec<T>> {
        Ok(self.embed_candidates(image_feats, image_feats.rows())?.pop().expect("one"))
    }

    pub fn embed_candidates(&self, images: &Tensor<T>, image_len: usize) -> Result<Vec<Vec<T>>> {
        let mut g = Graph::new();
        let img = g.constant(images.clone());
        let e = self.forward_candidates(&mut g, img, image_len)?;
        let e = g.value(e);
        Ok((0..e.rows()).map(|i| e.row(i).to_vec()).collect())
    }
}

/// Mean over the batch of `−log softmax_j(λ·⟨q_i, t_j⟩)` at `j = i`.
pub fn filtering_loss<T: Scalar>(g: &mut Graph<T>, queries: Var, targets: Var, lambda: Var) -> Result<Var> {
    let (qs, ts) = (g.value(queries).shape().to_vec(), g.value(targets).shape().to_vec());
    if qs.len() != 2 || ts.len() != 2 || qs[0] != ts[0] {
        return Err(Error::contract(format!(
            "query/target batch mismatch: {qs:?} vs {ts:?}"
        )));
    }
    let sims = g.matmul_t(queries, targets)?;
    let logits = g.mul_scalar(sims, lambda)?;
    g.cross_entropy_diag(logits)
}

/// Unit-norm tolerance for `similarity`.
pub const UNIT_TOL: f64 = 1e-4;

/// Cosine similarity of two unit vectors.
pub fn similarity<T: Scalar>(u: &[T], v: &[T]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::dim("similarity", &[u.len()], &[v.len()]));
    }
    for w in [u, v] {
        let n = w.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::contract(format!("vector norm {n} is not 1")));
        }
    }
    Ok(u.iter().zip(v).map(|(a, b)| a.as_f64() * b.as_f64()).sum())
}

/// Ordered candidates for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct TopKList {
    pub query_id: u64,
    pub ids: Vec<u64>,
    pub scores: Vec<f32>,
}

/// Descending score, then ascending id.
pub fn rank_order(a: (f32, u64), b: (f32, u64)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// The `k` best `(score, id)` pairs not in `exclude`, best first.
pub fn select_topk_scored(
    query_id: u64,
    ids: &[u64],
    scores: &[f32],
    k: usize,
    exclude: &HashSet<u64>,
) -> Result<TopKList> {
    if ids.is_empty() {
        return Err(Error::contract("empty candidate index"));
    }
    if k == 0 {
        return Err(Error::contract("K must be at least 1"));
    }
    let mut pairs: Vec<(f32, u64)> = scores
        .iter()
        .zip(ids)
        .filter(|(_, id)| !exclude.contains(id))
        .map(|(&s, &id)| (s, id))
        .collect();
    if k < pairs.len() {
        pairs.select_nth_unstable_by(k - 1, |a, b| rank_order(*a, *b));
        pairs.truncate(k);
    }
    pairs.sort_unstable_by(|a, b| rank_order(*a, *b));
    Ok(TopKList {
        query_id,
        ids: pairs.iter().map(|p| p.1).collect(),
        scores: pairs.iter().map(|p| p.0).collect(),
    })
}

const EMB_MAGIC: &[u8; 7] = b"CIR2EMB";
const EMB_VERSION: u32 = 1;

/// Exact-scan index of unit-norm candidate embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateIndex {
    pub ids: Vec<u64>,
    pub d_proj: usize,
    embeddings: Vec<f32>,
    /// Content hash of the checkpoint that produced the embeddings.
    pub provenance: [u8; 32],
}

impl CandidateIndex {
    pub fn new(ids: Vec<u64>, rows: Vec<Vec<f32>>, provenance: [u8; 32]) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(Error::contract("one embedding per id required"));
        }
        let d_proj = rows.first().map_or(0, Vec::len);
        let mut seen = HashSet::with_capacity(ids.len());
        let mut embeddings = Vec::with_capacity(ids.len() * d_proj);
        for (id, r) in ids.iter().zip(&rows) {
            if !seen.insert(*id) {
                return Err(Error::contract(format!("duplicate candidate id {id}")));
            }
            if r.len() != d_proj {
                return Err(Error::dim("index row", &[r.len()], &[d_proj]));
            }
            let n = r.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-5 {
                return Err(Error::contract(format!("embedding of {id} has norm {n}")));
            }
            embeddings.extend_from_slice(r);
        }
        Ok(CandidateIndex {
            ids,
            d_proj,
            embeddings,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.d_proj..(i + 1) * self.d_proj]
    }

    pub fn position_map(&self) -> HashMap<u64, usize> {
        self.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect()
    }

    /// Dot products against every candidate, in index order.
    pub fn scores(&self, query: &[f32]) -> Result<Vec<f32>> {
        if query.len() != self.d_proj {
            return Err(Error::dim("index query", &[query.len()], &[self.d_proj]));
        }
        Ok((0..self.len())
            .map(|i| self.row(i).iter().zip(query).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn select_topk(
        &self,
        query_id: u64,
        query: &[f32],
        k: usize,
        exclude: &HashSet<u64>,
    ) -> Result<TopKList> {
        if self.is_empty() {
            return Err(Error::contract("empty candidate index"));
        }
        let s = self.scores(query)?;
        select_topk_scored(query_id, &self.ids, &s, k, exclude)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(27 + self.len() * (8 + 4 * self.d_proj) + 32);
        out.extend_from_slice(EMB_MAGIC);
        out.extend_from_slice(&EMB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.d_proj as u32).to_le_bytes());
        for (i, id) in self.ids.iter().enumerate() {
            out.extend_from_slice(&id.to_le_bytes());
            for v in self.row(i) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.provenance);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::Format {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        let mut r = crate::checkpoint::Reader::new(bytes);
        if r.take(7).map_err(|_| bad("truncated header"))? != EMB_MAGIC {
            return Err(bad("not an embedding index"));
        }
        let version = r.u32().map_err(|_| bad("truncated header"))?;
        if version != EMB_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let m = r.u64().map_err(|_| bad("truncated header"))? as usize;
        let d = r.u32().map_err(|_| bad("truncated header"))? as usize;
        let mut ids = Vec::with_capacity(m);
        let mut rows = Vec::with_capacity(m);
        for _ in 0..m {
            ids.push(r.u64().map_err(|_| bad("truncated record"))?);
            rows.push(r.f32s(d).map_err(|_| bad("truncated record"))?);
        }
        let provenance: [u8; 32] = r
            .take(32)
            .map_err(|_| bad("missing provenance trailer"))?
            .try_into()
            .expect("32 bytes");
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        CandidateIndex::new(ids, rows, provenance)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Percentage of lists that contain their query's ground truth.
pub fn coverage(lists: &[TopKList], ground_truth: &HashMap<u64, u64>) -> Result<f64> {
    if lists.is_empty() {
        return Err(Error::contract("coverage of zero queries"));
    }
    let mut hit = 0usize;
    for l in lists {
        let gt = ground_truth
            .get(&l.query_id)
            .ok_or_else(|| Error::contract(format!("query {} has no ground truth", l.query_id)))?;
        if l.ids.contains(gt) {
            hit += 1;
        }
    }
    Ok(100.0 * hit as f64 / lists.len() as f64)
}
