//! Analytic gradients versus central finite differences for every op,
//! sublayer and both full models (64-bit). Shared by the gradient tests and
//! the acceptance suite.

use std::collections::BTreeMap;
use std::sync::Arc;

use cir2_core::autodiff::{AttnLayout, Graph, Var};
use cir2_core::filtering::{filtering_loss, FilterConfig, FilteringModel};
use cir2_core::gradcheck::{check_leaves, check_owned_params, check_params, GradCheckReport, FD_STEP};
use cir2_core::nn::{padding_mask, AttentionParams, FeedForwardParams, LayerNormParams, Linear, TextBatch};
use cir2_core::params::{truncated_normal, ParamStore};
use cir2_core::rerank::{rerank_loss, AblationVariant, QueryInput, QuerySource, RerankConfig, RerankModel};
use cir2_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-5;

/// Whole-model checks stack many layer norms; a shorter step keeps the
/// truncation error under the tolerance.
const MODEL_FD_STEP: f64 = 1e-5;

/// Worst report per checked component.
#[derive(Default)]
pub struct Tally(pub BTreeMap<&'static str, GradCheckReport>);

impl Tally {
    fn add(&mut self, name: &'static str, r: GradCheckReport) {
        self.0.entry(name).or_default().merge(r);
    }

    /// Components whose worst relative error reaches the tolerance.
    pub fn failures(&self) -> Vec<String> {
        self.0
            .iter()
            .filter(|(_, r)| !(r.max_rel_err < TOL))
            .map(|(n, r)| format!("{n}: max rel err {:e} (abs {:e}) over {} coords", r.max_rel_err, r.max_abs_err, r.coordinates))
            .collect()
    }
}

pub type Family = (&'static str, fn(u64) -> Tally);

pub const FAMILIES: &[Family] = &[
    ("ops", ops),
    ("attention", attention),
    ("sublayers", sublayers),
    ("reshape", reshape),
    ("filtering_model", filtering_model),
    ("rerank_model", rerank_model),
];

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    truncated_normal(rng, shape, 1.0)
}

/// Projects an output onto fixed random weights so every coordinate matters.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let shape = g.value(y).shape().to_vec();
    let w = g.constant(rand_t(&mut rng, &shape));
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

pub fn ops(seeds: u64) -> Tally {
    let mut tally = Tally::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
        let a = rand_t(&mut rng, &[m, k]);
        let b = rand_t(&mut rng, &[k, n]);
        let bt = rand_t(&mut rng, &[n, k]);
        let bias = rand_t(&mut rng, &[n]);
        let r = check_leaves(&[a.clone(), b, bias], FD_STEP, |g, v| {
            let y = g.matmul(v[0], v[1])?;
            let y = g.add_bias(y, v[2])?;
            let y = g.gelu(y);
            Ok(weighted_sum(g, y, seed))
        })
        .unwrap();
        tally.add("matmul+bias+gelu", r);

        let r = check_leaves(&[a.clone(), bt], FD_STEP, |g, v| {
            let y = g.matmul_t(v[0], v[1])?;
            let y = g.softmax(y)?;
            Ok(weighted_sum(g, y, seed))
        })
        .unwrap();
        tally.add("matmul_t+softmax", r);

        let c = rand_t(&mut rng, &[m, k]);
        let r = check_leaves(&[a.clone(), c], FD_STEP, |g, v| {
            let s = g.sub(v[0], v[1])?;
            let p = g.mul(s, v[0])?;
            let q = g.concat_cols(p, v[1])?;
            let t = g.transpose(q)?;
            let t = g.scale(t, 0.7);
            Ok(weighted_sum(g, t, seed))
        })
        .unwrap();
        tally.add("sub/mul/concat/transpose", r);

        let s = Tensor::scalar(rng.random_range(-1.0..1.0));
        let r = check_leaves(&[a.clone(), s], FD_STEP, |g, v| {
            let e = g.exp(v[1]);
            let y = g.mul_scalar(v[0], e)?;
            let y = g.l2_normalize_rows(y)?;
            Ok(weighted_sum(g, y, seed))
        })
        .unwrap();
        tally.add("exp/mul_scalar/l2norm", r);

        let sq = rand_t(&mut rng, &[m, m]);
        let r = check_leaves(&[sq], FD_STEP, |g, v| g.cross_entropy_diag(v[0])).unwrap();
        tally.add("cross_entropy_diag", r);

        let w = rng.random_range(3..7);
        let x = rand_t(&mut rng, &[m, w]);
        let gamma = rand_t(&mut rng, &[w]);
        let beta = rand_t(&mut rng, &[w]);
        let r = check_leaves(&[x, gamma, beta], FD_STEP, |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            Ok(weighted_sum(g, y, seed))
        })
        .unwrap();
        tally.add("layer_norm", r);

        let idx: Vec<usize> = (0..rng.random_range(1..6)).map(|_| rng.random_range(0..m)).collect();
        let r = check_leaves(&[a], FD_STEP, |g, v| {
            let y = g.gather_rows(v[0], Arc::new(idx.clone()))?;
            let y = g.mean(y);
            let z = g.sum(v[0]);
            let t = g.mul(y, z)?;
            Ok(t)
        })
        .unwrap();
        tally.add("gather/mean", r);
    }
    tally
}

pub fn attention(seeds: u64) -> Tally {
    let mut tally = Tally::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let heads = [1usize, 2, 4][rng.random_range(0..3)];
        let d = heads * rng.random_range(1..4);
        let q_len = rng.random_range(1..5);
        let k_len = rng.random_range(1..6);
        let nq = rng.random_range(1..4);
        let nk = rng.random_range(1..3);
        let key_seq: Vec<usize> = (0..nq).map(|_| rng.random_range(0..nk)).collect();
        let lengths: Vec<usize> = (0..nk).map(|_| rng.random_range(1..=k_len)).collect();
        let mask = if rng.random_bool(0.5) {
            Some(padding_mask(&lengths, k_len))
        } else {
            None
        };
        let layout = Arc::new(AttnLayout {
            heads,
            q_len,
            k_len,
            key_seq,
            key_mask: mask,
        });
        let q = rand_t(&mut rng, &[nq * q_len, d]);
        let k = rand_t(&mut rng, &[nk * k_len, d]);
        let v = rand_t(&mut rng, &[nk * k_len, d]);
        let r = check_leaves(&[q, k, v], FD_STEP, |g, vars| {
            let y = g.attention(vars[0], vars[1], vars[2], layout.clone())?;
            Ok(weighted_sum(g, y, seed))
        })
        .unwrap();
        tally.add("attention", r);
    }
    tally
}

pub fn sublayers(seeds: u64) -> Tally {
    let mut tally = Tally::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let heads = [1usize, 2][rng.random_range(0..2)];
        let d = heads * 2;
        let mut store = ParamStore::<f64>::new();
        let sa = AttentionParams::new(&mut store, "sa", d, heads, &mut rng).unwrap();
        let ca = AttentionParams::new(&mut store, "ca", d, heads, &mut rng).unwrap();
        let ff = FeedForwardParams::new(&mut store, "ff", d, 4 * d, &mut rng);
        let ln = LayerNormParams::new(&mut store, "ln", d);
        let head = Linear::new(&mut store, "head", d, 1, &mut rng);
        // larger weights than the training initializer keep gradients well
        // away from the comparison floor
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let shape = store.value(id).shape().to_vec();
            *store.value_mut(id) = truncated_normal(&mut rng, &shape, 0.5);
        }
        let len = rng.random_range(1..5);
        let ctx_len = rng.random_range(1..6);
        let x = rand_t(&mut rng, &[len, d]);
        let ctx = rand_t(&mut rng, &[ctx_len, d]);
        let r = check_params(&mut store, FD_STEP, 4, &mut rng, |g, s| {
            let x = g.constant(x.clone());
            let ctx = g.constant(ctx.clone());
            let a = cir2_core::nn::self_attention_seq(g, s, &sa, x)?;
            let x1 = cir2_core::nn::residual_norm(g, s, &ln, x, a)?;
            let c = cir2_core::nn::cross_attention_seq(g, s, &ca, x1, ctx)?;
            let x2 = g.add(x1, c)?;
            let f = ff.forward(g, s, x2)?;
            let x3 = g.add(x2, f)?;
            let y = head.forward(g, s, x3)?;
            Ok(weighted_sum(g, y, seed))
        })
        .unwrap();
        tally.add("sublayers", r);
    }
    tally
}

/// Replaces every parameter with wider random values.
fn widen(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, sigma: f64) {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = truncated_normal(rng, &shape, sigma);
    }
}

fn random_texts(rng: &mut ChaCha8Rng, n: usize, vocab: usize, max_len: usize) -> Vec<Vec<u32>> {
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
        })
        .collect()
}

pub fn reshape(seeds: u64) -> Tally {
    let mut tally = Tally::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
        let (m, n) = (rng.random_range(1..5), rng.random_range(1..5));
        let a = rand_t(&mut rng, &[m * n, 1]);
        let r = check_leaves(&[a], FD_STEP, |g, v| {
            let y = g.reshape(v[0], vec![m, n])?;
            let y = g.softmax(y)?;
            Ok(weighted_sum(g, y, seed))
        })
        .unwrap();
        tally.add("reshape", r);
    }
    tally
}

pub fn filtering_model(seeds: u64) -> Tally {
    let mut tally = Tally::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + seed);
        let heads = [1usize, 2][rng.random_range(0..2)];
        let cfg = FilterConfig {
            vocab: 7,
            max_len: 5,
            d_model: 2 * heads,
            heads,
            layers: rng.random_range(1..3),
            d_ff: 6,
            d_proj: 3,
        };
        let mut model = FilteringModel::<f64>::new(cfg.clone(), &mut rng).unwrap();
        widen(&mut model.store, &mut rng, 0.4);
        model.set_temperature(rng.random_range(1.0..5.0)).unwrap();
        let b = rng.random_range(2..4);
        let seq = rng.random_range(1..4);
        let texts = random_texts(&mut rng, b, cfg.vocab, cfg.max_len);
        let refs = rand_t(&mut rng, &[b * seq, cfg.d_model]);
        let targets = rand_t(&mut rng, &[b * seq, cfg.d_model]);
        let image_of: Vec<usize> = (0..b).collect();
        let r = check_owned_params(&mut model, |m| &mut m.store, MODEL_FD_STEP, 3, &mut rng, |g, m| {
            let tref: Vec<&[u32]> = texts.iter().map(Vec::as_slice).collect();
            let batch = TextBatch::new(&tref, cfg.max_len)?;
            let ri = g.constant(refs.clone());
            let ti = g.constant(targets.clone());
            let q = m.forward_queries(g, &batch, ri, seq, &image_of)?;
            let t = m.forward_candidates(g, ti, seq)?;
            let lambda = m.temperature_var(g);
            filtering_loss(g, q.embeddings, t, lambda)
        })
        .unwrap();
        tally.add("filtering model", r);
    }
    tally
}

pub fn rerank_model(seeds: u64) -> Tally {
    let mut tally = Tally::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(11000 + seed);
        let variant = AblationVariant::ALL[seed as usize % AblationVariant::ALL.len()];
        let heads = [1usize, 2][rng.random_range(0..2)];
        let cfg = RerankConfig {
            vocab: 7,
            max_len: 5,
            d_model: 2 * heads,
            heads,
            layers: rng.random_range(1..4),
            d_ff: 6,
            variant,
        };
        let mut model = RerankModel::<f64>::new(cfg.clone(), &mut rng).unwrap();
        widen(&mut model.store, &mut rng, 0.4);
        let b = rng.random_range(2..4);
        let cand_len = rng.random_range(1..4);
        let grid_len = rng.random_range(1..4);
        let queries: Vec<QueryInput<f64>> = random_texts(&mut rng, b, cfg.vocab, cfg.max_len)
            .into_iter()
            .map(|tokens| {
                let z_len = match variant.query_source() {
                    QuerySource::None => None,
                    QuerySource::Zt => Some(tokens.len()),
                    QuerySource::ReferenceCls => Some(1),
                    QuerySource::ReferenceGrid => Some(grid_len),
                };
                let z = z_len.map(|l| rand_t(&mut rng, &[l, cfg.d_model]));
                QueryInput { tokens, z }
            })
            .collect();
        let cands = rand_t(&mut rng, &[b * cand_len, cfg.d_model]);
        let r = check_owned_params(&mut model, |m| &mut m.store, MODEL_FD_STEP, 2, &mut rng, |g, m| {
            let qs: Vec<&QueryInput<f64>> = queries.iter().collect();
            let c = g.constant(cands.clone());
            let logits = m.batch_logits(g, &qs, c, cand_len)?;
            rerank_loss(g, logits)
        })
        .unwrap();
        tally.add(variant.name(), r);
    }
    tally
}
