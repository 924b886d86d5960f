//! Transformer sublayers built on the autodiff tape: affine maps, layer
//! normalization, multi-head self/cross attention and the GELU feed-forward
//! block. Encoders are post-norm: `x <- LN(x + sublayer(x))`.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{AttnLayout, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{truncated_normal, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

/// Affine map `x @ W + b` with `W: d_in × d_out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            truncated_normal(rng, &[d_in, d_out], INIT_STD),
            false,
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[d_out]), true);
        Linear { w, b, d_in, d_out }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    /// Sets weight and bias to zero.
    pub fn zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.value_mut(self.w).fill(T::zero());
        store.value_mut(self.b).fill(T::zero());
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[d], T::one()), true);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[d]), true);
        LayerNormParams { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Query/key/value/output projections of one attention sublayer.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl AttentionParams {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::contract(format!(
                "head count {heads} must divide d_model {d_model}"
            )));
        }
        Ok(AttentionParams {
            q: Linear::new(store, &format!("{name}.q"), d_model, d_model, rng),
            k: Linear::new(store, &format!("{name}.k"), d_model, d_model, rng),
            v: Linear::new(store, &format!("{name}.v"), d_model, d_model, rng),
            o: Linear::new(store, &format!("{name}.o"), d_model, d_model, rng),
            heads,
            d_model,
        })
    }

    fn check_width<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let c = g.value(x).cols();
        if c != self.d_model {
            return Err(Error::dim("attention input width", &[c], &[self.d_model]));
        }
        Ok(())
    }

    /// Key and value projections of a context, reusable across many query
    /// sequences that attend to it.
    pub fn project_kv<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        ctx: Var,
    ) -> Result<(Var, Var)> {
        self.check_width(g, ctx)?;
        let k = self.k.forward(g, store, ctx)?;
        let v = self.v.forward(g, store, ctx)?;
        Ok((k, v))
    }

    /// Attends projected keys/values from query rows `x` and applies the
    /// output projection.
    pub fn attend<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        k: Var,
        v: Var,
        layout: Arc<AttnLayout>,
    ) -> Result<Var> {
        self.check_width(g, x)?;
        let q = self.q.forward(g, store, x)?;
        let a = g.attention(q, k, v, layout)?;
        self.o.forward(g, store, a)
    }

    pub fn self_attention<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        layout: Arc<AttnLayout>,
    ) -> Result<Var> {
        let (k, v) = self.project_kv(g, store, x)?;
        self.attend(g, store, x, k, v, layout)
    }

    pub fn cross_attention<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        ctx: Var,
        layout: Arc<AttnLayout>,
    ) -> Result<Var> {
        let (k, v) = self.project_kv(g, store, ctx)?;
        self.attend(g, store, x, k, v, layout)
    }

    pub fn zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for l in [&self.q, &self.k, &self.v, &self.o] {
            l.zero(store);
        }
    }
}

/// `d_model -> d_ff -> d_model` with GELU in between.
#[derive(Clone, Debug)]
pub struct FeedForwardParams {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForwardParams {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Self {
        FeedForwardParams {
            up: Linear::new(store, &format!("{name}.up"), d_model, d_ff, rng),
            down: Linear::new(store, &format!("{name}.down"), d_ff, d_model, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let c = g.value(x).cols();
        if c != self.up.d_in {
            return Err(Error::dim("feed_forward input width", &[c], &[self.up.d_in]));
        }
        let h = self.up.forward(g, store, x)?;
        let h = g.gelu(h);
        self.down.forward(g, store, h)
    }
}

/// `LN(x + y)`.
pub fn residual_norm<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    norm: &LayerNormParams,
    x: Var,
    y: Var,
) -> Result<Var> {
    let s = g.add(x, y)?;
    norm.forward(g, store, s)
}

/// Key-padding mask for `lengths.len()` sequences padded to `padded_len`.
pub fn padding_mask(lengths: &[usize], padded_len: usize) -> Vec<bool> {
    let mut mask = Vec::with_capacity(lengths.len() * padded_len);
    for &l in lengths {
        mask.extend((0..padded_len).map(|j| j < l));
    }
    mask
}

/// Row indices of position 0 of each of `n` sequences of length `len`.
pub fn cls_rows(n: usize, len: usize) -> Arc<Vec<usize>> {
    Arc::new((0..n).map(|i| i * len).collect())
}

/// Self-attention on a single unpadded sequence.
pub fn self_attention_seq<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &AttentionParams,
    x: Var,
) -> Result<Var> {
    let len = g.value(x).rows();
    let layout = Arc::new(AttnLayout::self_attn(params.heads, 1, len, None));
    params.self_attention(g, store, x, layout)
}

/// Cross-attention of one query sequence over one context sequence.
pub fn cross_attention_seq<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &AttentionParams,
    x: Var,
    ctx: Var,
) -> Result<Var> {
    let layout = Arc::new(AttnLayout {
        heads: params.heads,
        q_len: g.value(x).rows(),
        k_len: g.value(ctx).rows(),
        key_seq: vec![0],
        key_mask: None,
    });
    params.cross_attention(g, store, x, ctx, layout)
}

/// Token sequences padded to a common length, flattened row-major.
#[derive(Clone, Debug)]
pub struct TextBatch {
    pub tokens: Vec<usize>,
    pub lengths: Vec<usize>,
    pub padded_len: usize,
}

impl TextBatch {
    /// Pads every sequence to the longest one. Sequences must be non-empty
    /// and no longer than `max_len`.
    pub fn new(texts: &[&[u32]], max_len: usize) -> Result<Self> {
        let padded_len = texts.iter().map(|t| t.len()).max().unwrap_or(0);
        if texts.iter().any(|t| t.is_empty()) {
            return Err(Error::contract("empty token sequence"));
        }
        if padded_len > max_len {
            return Err(Error::contract(format!(
                "text length {padded_len} exceeds maximum {max_len}"
            )));
        }
        let mut tokens = Vec::with_capacity(texts.len() * padded_len);
        for t in texts {
            tokens.extend(t.iter().map(|&x| x as usize));
            tokens.extend(std::iter::repeat_n(0, padded_len - t.len()));
        }
        Ok(TextBatch {
            tokens,
            lengths: texts.iter().map(|t| t.len()).collect(),
            padded_len,
        })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// Key mask, or `None` when no sequence is padded.
    pub fn mask(&self) -> Option<Vec<bool>> {
        if self.lengths.iter().all(|&l| l == self.padded_len) {
            None
        } else {
            Some(padding_mask(&self.lengths, self.padded_len))
        }
    }

    pub fn self_layout(&self, heads: usize) -> Arc<AttnLayout> {
        Arc::new(AttnLayout::self_attn(heads, self.len(), self.padded_len, self.mask()))
    }
}

/// Token plus learned positional embeddings followed by layer norm.
#[derive(Clone, Debug)]
pub struct TokenEmbedding {
    pub tokens: ParamId,
    pub positions: ParamId,
    pub norm: LayerNormParams,
    pub vocab: usize,
    pub max_len: usize,
}

impl TokenEmbedding {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        vocab: usize,
        max_len: usize,
        d_model: usize,
        rng: &mut R,
    ) -> Self {
        let tokens = store.add(
            format!("{name}.tokens"),
            truncated_normal(rng, &[vocab, d_model], INIT_STD),
            false,
        );
        let positions = store.add(
            format!("{name}.positions"),
            truncated_normal(rng, &[max_len, d_model], INIT_STD),
            false,
        );
        let norm = LayerNormParams::new(store, &format!("{name}.ln"), d_model);
        TokenEmbedding {
            tokens,
            positions,
            norm,
            vocab,
            max_len,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &TextBatch,
    ) -> Result<Var> {
        if let Some(&bad) = batch.tokens.iter().find(|&&t| t >= self.vocab) {
            return Err(Error::contract(format!("token id {bad} outside vocabulary")));
        }
        if batch.padded_len > self.max_len {
            return Err(Error::contract("text longer than positional table"));
        }
        let tok = g.param(store, self.tokens);
        let pos = g.param(store, self.positions);
        let t = g.gather_rows(tok, Arc::new(batch.tokens.clone()))?;
        let pidx: Vec<usize> = (0..batch.len()).flat_map(|_| 0..batch.padded_len).collect();
        let p = g.gather_rows(pos, Arc::new(pidx))?;
        let x = g.add(t, p)?;
        self.norm.forward(g, store, x)
    }
}
