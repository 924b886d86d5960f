//! AdamW with a cosine schedule, and the two contrastive training loops.
//!
//! Batches are drawn from a permutation that depends only on
//! `(seed, epoch)`, so a run resumed from an end-of-epoch checkpoint visits
//! exactly the batches the uninterrupted run would have visited.

use std::f64::consts::PI;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint::{Checkpoint, OptimizerState};
use crate::data::{QueryTriplet, SyntheticCorpus, Vocab};
use crate::error::{Error, Result};
use crate::filtering::{filtering_loss, FilterConfig, FilteringModel};
use crate::nn::TextBatch;
use crate::params::ParamStore;
use crate::rerank::{rerank_loss, QueryInput, RerankConfig, RerankModel};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Filter,
    Rerank,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Stop (and checkpoint) after this epoch of the configured schedule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_after: Option<usize>,
}

impl TrainConfig {
    pub fn filter_default() -> Self {
        TrainConfig {
            stage: Stage::Filter,
            batch_size: 32,
            epochs: 10,
            lr: 1e-4,
            lr_floor: 0.0,
            weight_decay: 0.05,
            seed: 0,
            stop_after: None,
        }
    }

    pub fn rerank_default() -> Self {
        TrainConfig {
            stage: Stage::Rerank,
            batch_size: 16,
            epochs: 4,
            lr: 3e-4,
            lr_floor: 0.0,
            weight_decay: 0.05,
            seed: 0,
            stop_after: None,
        }
    }

    pub fn validate(&self, stage: Stage) -> Result<()> {
        if self.stage != stage {
            return Err(Error::contract(format!(
                "config is for the {:?} stage, not {:?}",
                self.stage, stage
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::contract("contrastive training needs batch size ≥ 2"));
        }
        if self.epochs == 0 {
            return Err(Error::contract("epochs must be positive"));
        }
        if !(self.lr > 0.0) || self.lr_floor < 0.0 || self.lr_floor > self.lr || self.weight_decay < 0.0 {
            return Err(Error::contract("learning rates must be positive with floor ≤ lr"));
        }
        Ok(())
    }

    /// Last epoch this run trains.
    pub fn last_epoch(&self) -> usize {
        self.stop_after.map_or(self.epochs, |e| e.min(self.epochs))
    }

    pub fn steps_per_epoch(&self, examples: usize) -> usize {
        examples / self.batch_size
    }
}

/// `floor + ½(lr0 − floor)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, lr_floor: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::contract(format!(
            "step {step} outside schedule of {total_steps} steps"
        )));
    }
    if total_steps == 0 {
        return Ok(lr0);
    }
    let c = (PI * step as f64 / total_steps as f64).cos();
    Ok(lr_floor + 0.5 * (lr0 - lr_floor) * (1.0 + c))
}

/// Adam moments with decoupled weight decay. Moments are held in `f32`,
/// the checkpoint precision, so a restored optimizer continues bitwise.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new<T: Scalar>(store: &ParamStore<T>, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f32>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from the gradients held in `store`.
    pub fn update<T: Scalar>(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in store.iter_mut().enumerate() {
            let decay = if p.no_decay { 0.0 } else { lr * self.weight_decay };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.value.len() {
                let g = p.grad.data()[j].as_f64();
                let mj = self.beta1 * m[j] as f64 + (1.0 - self.beta1) * g;
                let vj = self.beta2 * v[j] as f64 + (1.0 - self.beta2) * g * g;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let w = p.value.data()[j].as_f64();
                let w = w - decay * w - lr * (mj / c1) / ((vj / c2).sqrt() + self.eps);
                p.value.data_mut()[j] = T::lit(w);
            }
        }
    }

    pub fn state(&self) -> OptimizerState {
        OptimizerState {
            step: self.step,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    pub fn restore(&mut self, s: &OptimizerState) -> Result<()> {
        if s.m.len() != self.m.len() || s.v.len() != self.v.len() {
            return Err(Error::contract("optimizer state does not match the model"));
        }
        for (dst, src) in self.m.iter_mut().zip(&s.m).chain(self.v.iter_mut().zip(&s.v)) {
            if dst.len() != src.len() {
                return Err(Error::contract("optimizer moment shape mismatch"));
            }
            dst.clone_from(src);
        }
        self.step = s.step;
        Ok(())
    }
}

/// Example order for one epoch, a function of `(seed, epoch)` only.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: Stage,
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation coverage@K (filter) or Recall@1 (re-rank) when computed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<f64>,
}

/// Per-epoch hook: receives the model after each epoch and may return a
/// validation figure.
pub type Validator<'a, M> = &'a mut dyn FnMut(&M, usize) -> Result<Option<f64>>;

pub struct TrainOutcome<M> {
    pub model: M,
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Where to start: fresh, or from a checkpoint's parameters and moments.
pub struct Resume<'a> {
    pub checkpoint: &'a Checkpoint,
}

/// Encoded token ids (with `[CLS]`) for every triplet.
pub fn encode_texts(vocab: &Vocab, triplets: &[QueryTriplet]) -> Result<Vec<Vec<u32>>> {
    triplets.iter().map(|t| vocab.encode(&t.tokens)).collect()
}

fn config_echo<M: Serialize>(cfg: &TrainConfig, model: &M) -> String {
    serde_json::json!({ "train": cfg, "model": model }).to_string()
}

#[derive(Deserialize)]
struct ConfigEcho<M> {
    train: TrainConfig,
    model: M,
}

/// Training and model configuration recorded in a checkpoint.
pub fn checkpoint_configs<M: DeserializeOwned>(ckpt: &Checkpoint) -> Result<(TrainConfig, M)> {
    let echo: ConfigEcho<M> = serde_json::from_str(&ckpt.config)
        .map_err(|e| Error::contract(format!("checkpoint config echo: {e}")))?;
    Ok((echo.train, echo.model))
}

fn start_state<T: Scalar>(
    store: &mut ParamStore<T>,
    opt: &mut AdamW,
    resume: Option<Resume<'_>>,
    epochs: usize,
) -> Result<usize> {
    let Some(r) = resume else { return Ok(0) };
    r.checkpoint.restore(store)?;
    if let Some(s) = &r.checkpoint.optimizer {
        opt.restore(s)?;
    }
    let e = r.checkpoint.epoch as usize;
    if e > epochs {
        return Err(Error::contract("checkpoint is past the configured epochs"));
    }
    Ok(e)
}

/// Optimizes the in-batch contrastive filtering loss.
pub fn train_filter(
    cfg: &TrainConfig,
    model_cfg: &FilterConfig,
    corpus: &SyntheticCorpus,
    triplets: &[QueryTriplet],
    resume: Option<Resume<'_>>,
    validator: Option<Validator<'_, FilteringModel<f32>>>,
) -> Result<TrainOutcome<FilteringModel<f32>>> {
    cfg.validate(Stage::Filter)?;
    if triplets.is_empty() {
        return Err(Error::contract("no training triplets"));
    }
    if triplets.len() < cfg.batch_size {
        return Err(Error::contract("fewer triplets than one batch"));
    }
    let vocab = Vocab::new(corpus.config.num_slots, corpus.config.values_per_slot);
    let texts = encode_texts(&vocab, triplets)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = FilteringModel::<f32>::new(model_cfg.clone(), &mut rng)?;
    let mut opt = AdamW::new(&model.store, cfg.weight_decay);
    let first = start_state(&mut model.store, &mut opt, resume, cfg.epochs)?;
    let total = cfg.epochs * cfg.steps_per_epoch(triplets.len());
    let seq = corpus.seq_len();
    let mut validator = validator;
    let mut log = Vec::new();
    for epoch in first..cfg.last_epoch() {
        let order = epoch_order(cfg.seed, epoch, triplets.len());
        let mut loss_sum = 0.0;
        let steps = cfg.steps_per_epoch(triplets.len());
        for s in 0..steps {
            let idx = &order[s * cfg.batch_size..(s + 1) * cfg.batch_size];
            let batch_texts: Vec<&[u32]> = idx.iter().map(|&i| texts[i].as_slice()).collect();
            let refs: Vec<u64> = idx.iter().map(|&i| triplets[i].ref_id).collect();
            let tgts: Vec<u64> = idx.iter().map(|&i| triplets[i].target_id).collect();
            let batch = TextBatch::new(&batch_texts, model.config.max_len)?;
            let mut g = Graph::new();
            let ri = g.constant(corpus.stacked_features::<f32>(&refs)?);
            let ti = g.constant(corpus.stacked_features::<f32>(&tgts)?);
            let image_of: Vec<usize> = (0..idx.len()).collect();
            let q = model.forward_queries(&mut g, &batch, ri, seq, &image_of)?;
            let t = model.forward_candidates(&mut g, ti, seq)?;
            let lambda = model.temperature_var(&mut g);
            let loss = filtering_loss(&mut g, q.embeddings, t, lambda)?;
            let lv = g.value(loss).item().as_f64();
            if !lv.is_finite() {
                return Err(Error::NonFinite("filtering loss"));
            }
            loss_sum += lv;
            g.backward(loss)?;
            model.store.zero_grad();
            g.accumulate_param_grads(&mut model.store);
            let lr = cosine_lr(epoch * steps + s + 1, total, cfg.lr, cfg.lr_floor)?;
            opt.update(&mut model.store, lr);
            model.clamp_temperature();
        }
        let validation = match validator.as_mut() {
            Some(v) => v(&model, epoch + 1)?,
            None => None,
        };
        let entry = EpochLog {
            stage: Stage::Filter,
            epoch: epoch + 1,
            train_loss: loss_sum / steps as f64,
            validation,
        };
        info!("filter epoch {} loss {:.4} val {:?}", entry.epoch, entry.train_loss, entry.validation);
        log.push(entry);
    }
    model.store.zero_grad();
    let checkpoint = Checkpoint::from_store(
        &model.store,
        Some(opt.state()),
        cfg.last_epoch().max(first) as u32,
        config_echo(cfg, model_cfg),
    );
    Ok(TrainOutcome { model, checkpoint, log })
}

/// Optimizes the in-batch re-ranking loss: every query in a batch is scored
/// against every target in the batch. `inputs` is aligned with `triplets`.
pub fn train_rerank(
    cfg: &TrainConfig,
    model_cfg: &RerankConfig,
    corpus: &SyntheticCorpus,
    triplets: &[QueryTriplet],
    inputs: &[QueryInput<f32>],
    resume: Option<Resume<'_>>,
    validator: Option<Validator<'_, RerankModel<f32>>>,
) -> Result<TrainOutcome<RerankModel<f32>>> {
    cfg.validate(Stage::Rerank)?;
    if triplets.is_empty() {
        return Err(Error::contract("no training triplets"));
    }
    if triplets.len() != inputs.len() {
        return Err(Error::contract("one re-ranker input per triplet required"));
    }
    if triplets.len() < cfg.batch_size {
        return Err(Error::contract("fewer triplets than one batch"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_2e2a);
    let mut model = RerankModel::<f32>::new(model_cfg.clone(), &mut rng)?;
    let mut opt = AdamW::new(&model.store, cfg.weight_decay);
    let first = start_state(&mut model.store, &mut opt, resume, cfg.epochs)?;
    let total = cfg.epochs * cfg.steps_per_epoch(triplets.len());
    let seq = corpus.seq_len();
    let mut validator = validator;
    let mut log = Vec::new();
    for epoch in first..cfg.last_epoch() {
        let order = epoch_order(cfg.seed, epoch, triplets.len());
        let steps = cfg.steps_per_epoch(triplets.len());
        let mut loss_sum = 0.0;
        for s in 0..steps {
            let idx = &order[s * cfg.batch_size..(s + 1) * cfg.batch_size];
            let qs: Vec<&QueryInput<f32>> = idx.iter().map(|&i| &inputs[i]).collect();
            let tgts: Vec<u64> = idx.iter().map(|&i| triplets[i].target_id).collect();
            let mut g = Graph::new();
            let cands = g.constant(corpus.stacked_features::<f32>(&tgts)?);
            let logits = model.batch_logits(&mut g, &qs, cands, seq)?;
            let loss = rerank_loss(&mut g, logits)?;
            let lv = g.value(loss).item().as_f64();
            if !lv.is_finite() {
                return Err(Error::NonFinite("re-ranking loss"));
            }
            loss_sum += lv;
            g.backward(loss)?;
            model.store.zero_grad();
            g.accumulate_param_grads(&mut model.store);
            let lr = cosine_lr(epoch * steps + s + 1, total, cfg.lr, cfg.lr_floor)?;
            opt.update(&mut model.store, lr);
        }
        let validation = match validator.as_mut() {
            Some(v) => v(&model, epoch + 1)?,
            None => None,
        };
        let entry = EpochLog {
            stage: Stage::Rerank,
            epoch: epoch + 1,
            train_loss: loss_sum / steps as f64,
            validation,
        };
        info!("rerank epoch {} loss {:.4} val {:?}", entry.epoch, entry.train_loss, entry.validation);
        log.push(entry);
    }
    model.store.zero_grad();
    let checkpoint = Checkpoint::from_store(
        &model.store,
        Some(opt.state()),
        cfg.last_epoch().max(first) as u32,
        config_echo(cfg, model_cfg),
    );
    Ok(TrainOutcome { model, checkpoint, log })
}

/// Mean loss of the first batch of epoch 0 under freshly initialized
/// weights; used to check that initial logits are near uniform.
pub fn initial_filter_loss(
    cfg: &TrainConfig,
    model_cfg: &FilterConfig,
    corpus: &SyntheticCorpus,
    triplets: &[QueryTriplet],
) -> Result<f64> {
    let vocab = Vocab::new(corpus.config.num_slots, corpus.config.values_per_slot);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = FilteringModel::<f32>::new(model_cfg.clone(), &mut rng)?;
    let order = epoch_order(cfg.seed, 0, triplets.len());
    let idx = &order[..cfg.batch_size.min(triplets.len())];
    let texts: Vec<Vec<u32>> = idx.iter().map(|&i| vocab.encode(&triplets[i].tokens)).collect::<Result<_>>()?;
    let tref: Vec<&[u32]> = texts.iter().map(Vec::as_slice).collect();
    let batch = TextBatch::new(&tref, model.config.max_len)?;
    let refs: Vec<u64> = idx.iter().map(|&i| triplets[i].ref_id).collect();
    let tgts: Vec<u64> = idx.iter().map(|&i| triplets[i].target_id).collect();
    let mut g = Graph::new();
    let ri = g.constant(corpus.stacked_features::<f32>(&refs)?);
    let ti = g.constant(corpus.stacked_features::<f32>(&tgts)?);
    let seq = corpus.seq_len();
    let image_of: Vec<usize> = (0..idx.len()).collect();
    let q = model.forward_queries(&mut g, &batch, ri, seq, &image_of)?;
    let t = model.forward_candidates(&mut g, ti, seq)?;
    let lambda = model.temperature_var(&mut g);
    let loss = filtering_loss(&mut g, q.embeddings, t, lambda)?;
    Ok(g.value(loss).item().as_f64())
}

/// Initial re-ranking loss on the first batch of epoch 0.
pub fn initial_rerank_loss(
    cfg: &TrainConfig,
    model_cfg: &RerankConfig,
    corpus: &SyntheticCorpus,
    triplets: &[QueryTriplet],
    inputs: &[QueryInput<f32>],
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_2e2a);
    let model = RerankModel::<f32>::new(model_cfg.clone(), &mut rng)?;
    let order = epoch_order(cfg.seed, 0, triplets.len());
    let idx = &order[..cfg.batch_size.min(triplets.len())];
    let qs: Vec<&QueryInput<f32>> = idx.iter().map(|&i| &inputs[i]).collect();
    let tgts: Vec<u64> = idx.iter().map(|&i| triplets[i].target_id).collect();
    let mut g = Graph::new();
    let cands = g.constant(corpus.stacked_features::<f32>(&tgts)?);
    let logits = model.batch_logits(&mut g, &qs, cands, corpus.seq_len())?;
    let loss = rerank_loss(&mut g, logits)?;
    Ok(g.value(loss).item().as_f64())
}

/// Parameters as a flat vector, for bitwise comparisons.
pub fn flat_params<T: Scalar>(store: &ParamStore<T>) -> Vec<T> {
    store.iter().flat_map(|(_, p)| p.value.data().to_vec()).collect()
}

/// Sets every gradient in `store` to `g`.
pub fn fill_grads<T: Scalar>(store: &mut ParamStore<T>, g: T) {
    for p in store.iter_mut() {
        p.grad = Tensor::full(p.value.shape(), g);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_lr(0, 100, 2e-5, 0.0).unwrap(), 2e-5);
        assert_abs_diff_eq!(cosine_lr(100, 100, 2e-5, 0.0).unwrap(), 0.0, epsilon = 1e-20);
        assert_abs_diff_eq!(cosine_lr(50, 100, 2e-5, 0.0).unwrap(), 1e-5, epsilon = 1e-18);
        assert!(cosine_lr(101, 100, 2e-5, 0.0).is_err());
    }

    #[test]
    fn zero_gradient_step_only_decays() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::full(&[3], 2.0), false);
        store.add("b", Tensor::full(&[2], 1.0), true);
        let mut opt = AdamW::new(&store, 0.05);
        opt.update(&mut store, 0.1);
        let w = store.value(store.id("w").unwrap()).data().to_vec();
        assert!(w.iter().all(|&x| (x - 2.0 * (1.0 - 0.1 * 0.05)).abs() < 1e-15));
        assert_eq!(store.value(store.id("b").unwrap()).data(), &[1.0, 1.0]);
    }

    #[test]
    fn shuffles_depend_on_seed_and_epoch_only() {
        assert_eq!(epoch_order(3, 1, 50), epoch_order(3, 1, 50));
        assert_ne!(epoch_order(3, 1, 50), epoch_order(3, 2, 50));
        assert_ne!(epoch_order(3, 1, 50), epoch_order(4, 1, 50));
    }

    #[test]
    fn config_rules() {
        let mut c = TrainConfig::filter_default();
        assert!(c.validate(Stage::Filter).is_ok());
        assert!(c.validate(Stage::Rerank).is_err());
        c.batch_size = 1;
        assert!(c.validate(Stage::Filter).is_err());
    }

    #[test]
    fn optimizer_state_round_trip_is_exact_in_f32() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::from_f64(&[2, 2], &[0.3, -0.2, 0.1, 0.7]).unwrap(), false);
        let mut opt = AdamW::new(&store, 0.05);
        fill_grads(&mut store, 0.25f32);
        opt.update(&mut store, 1e-3);
        let ck = Checkpoint::from_store(&store, Some(opt.state()), 1, String::new());
        let mut store2 = store.clone();
        let mut opt2 = AdamW::new(&store2, 0.05);
        ck.restore(&mut store2).unwrap();
        opt2.restore(ck.optimizer.as_ref().unwrap()).unwrap();
        fill_grads(&mut store, -0.5f32);
        fill_grads(&mut store2, -0.5f32);
        opt.update(&mut store, 1e-3);
        opt2.update(&mut store2, 1e-3);
        assert_eq!(flat_params(&store), flat_params(&store2));
    }
}
