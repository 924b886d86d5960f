//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and
//! leaves gradients on every node that (transitively) depends on a
//! trainable leaf. Parameter gradients are then folded into the owning
//! [`ParamStore`] with [`Graph::accumulate_param_grads`]; the store is never
//! zeroed implicitly.
//!
//! All matrix-valued ops treat their inputs as 2-D `rows × cols`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, softmax_in_place, Scalar, Tensor, View};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Describes how query rows are grouped into sequences and which key
/// sequence each query sequence attends to.
///
/// Queries are `num_query_seqs * q_len` rows and keys/values are
/// `num_key_seqs * k_len` rows; query sequence `s` attends key sequence
/// `key_seq[s]`. `key_mask`, when present, has one flag per key row and
/// `false` marks padding.
#[derive(Clone, Debug)]
pub struct AttnLayout {
    pub heads: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub key_seq: Vec<usize>,
    pub key_mask: Option<Vec<bool>>,
}

impl AttnLayout {
    /// Self-attention over `n` sequences of length `len`.
    pub fn self_attn(heads: usize, n: usize, len: usize, key_mask: Option<Vec<bool>>) -> Self {
        AttnLayout {
            heads,
            q_len: len,
            k_len: len,
            key_seq: (0..n).collect(),
            key_mask,
        }
    }

    pub fn num_query_seqs(&self) -> usize {
        self.key_seq.len()
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    AddBias { x: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MulScalar { x: Var, s: Var },
    Scale { x: Var, c: T },
    Gelu { x: Var },
    Exp { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, layout: Arc<AttnLayout>, probs: Vec<T> },
    GatherRows { x: Var, idx: Arc<Vec<usize>> },
    ConcatCols { a: Var, b: Var },
    L2NormalizeRows { x: Var, norms: Vec<T> },
    Softmax { x: Var },
    CrossEntropyDiag { x: Var, probs: Vec<T> },
    Sum { x: Var },
    Mean { x: Var },
    Transpose { x: Var },
    Reshape { x: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    param_vars: Vec<Option<Var>>,
    store_uid: Option<u64>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-12;

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation
    let c = T::lit(0.797_884_560_802_865_4);
    let a = T::lit(0.044_715);
    let half = T::lit(0.5);
    let x2 = x * x;
    let inner = c * (x + a * x2 * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dinner = c * (T::one() + T::lit(3.0) * a * x2);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * dinner;
    (y, dy)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_vars: Vec::new(),
            store_uid: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// A trainable leaf that is not owned by a parameter store.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A constant input; gradients are not tracked through it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Places a stored parameter on the tape. Repeated requests for the same
    /// parameter return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        match self.store_uid {
            None => self.store_uid = Some(store.uid()),
            Some(uid) => assert_eq!(uid, store.uid(), "one graph may only read one parameter store"),
        }
        if self.param_vars.len() < store.len() {
            self.param_vars.resize(store.len(), None);
        }
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::dim("matmul", sa, sb));
        }
        let bview = if trans_b {
            View::transposed(0, k)
        } else {
            View::row_major(0, n)
        };
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            View::row_major(0, k),
            self.value(b).data(),
            bview,
            T::zero(),
            out.data_mut(),
            View::row_major(0, n),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, rg))
    }

    /// Adds a bias vector to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(b).len() != cols {
            return Err(Error::dim("add_bias", self.shape(x), self.shape(b)));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o = *o + bv;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddBias { x, b }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let vx = self.value(x);
        Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&v| f(v)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub { a, b }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("mul_scalar", self.shape(x), self.shape(s)));
        }
        let c = self.value(s).item();
        let out = self.map(x, |v| v * c);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::MulScalar { x, s }, rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.map(x, |v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale { x, c }, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| gelu_parts(v).0);
        let rg = self.rg(x);
        self.push(out, Op::Gelu { x }, rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| v.exp());
        let rg = self.rg(x);
        self.push(out, Op::Exp { x }, rg)
    }

    /// Row-wise layer normalization followed by the affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let vx = self.value(x);
        let rows = vx.rows();
        let n = T::from_usize(cols).unwrap();
        let eps = T::lit(LN_EPS);
        let mut xhat = Vec::with_capacity(vx.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(vx.len());
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        for row in vx.data().chunks(cols) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention with scale `1/sqrt(d/heads)`.
    /// `q`, `k`, `v` are already projected.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: Arc<AttnLayout>) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 {
            return Err(Error::dim("attention", sq, sk));
        }
        let d = sq[1];
        if sk[1] != d || sv[1] != d {
            return Err(Error::dim("attention", sq, sk));
        }
        if sk[0] != sv[0] {
            return Err(Error::dim("attention", sk, sv));
        }
        let AttnLayout {
            heads,
            q_len,
            k_len,
            ..
        } = *layout;
        if heads == 0 || d % heads != 0 {
            return Err(Error::contract(format!(
                "head count {heads} must divide width {d}"
            )));
        }
        let nq = layout.num_query_seqs();
        if sq[0] != nq * q_len {
            return Err(Error::dim("attention query rows", sq, &[nq, q_len]));
        }
        if k_len == 0 || sk[0] % k_len != 0 {
            return Err(Error::dim("attention key rows", sk, &[k_len]));
        }
        let nk = sk[0] / k_len;
        if layout.key_seq.iter().any(|&s| s >= nk) {
            return Err(Error::contract("attention key sequence index out of range"));
        }
        if let Some(mask) = &layout.key_mask {
            if mask.len() != sk[0] {
                return Err(Error::dim("attention key mask", sk, &[mask.len()]));
            }
        }

        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let block = q_len * k_len;
        let mut probs = vec![T::zero(); nq * heads * block];
        let mut out = Tensor::zeros(&[nq * q_len, d]);
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        for s in 0..nq {
            let ks = layout.key_seq[s];
            for h in 0..heads {
                let p = &mut probs[(s * heads + h) * block..(s * heads + h + 1) * block];
                gemm(
                    q_len,
                    dh,
                    k_len,
                    scale,
                    qd,
                    View::row_major(s * q_len * d + h * dh, d),
                    kd,
                    View::transposed(ks * k_len * d + h * dh, d),
                    T::zero(),
                    p,
                    View::row_major(0, k_len),
                );
                if let Some(mask) = &layout.key_mask {
                    let m = &mask[ks * k_len..(ks + 1) * k_len];
                    for row in p.chunks_mut(k_len) {
                        for (v, &keep) in row.iter_mut().zip(m) {
                            if !keep {
                                *v = T::neg_infinity();
                            }
                        }
                    }
                }
                for row in p.chunks_mut(k_len) {
                    softmax_in_place(row);
                }
                gemm(
                    q_len,
                    k_len,
                    dh,
                    T::one(),
                    p,
                    View::row_major(0, k_len),
                    vd,
                    View::row_major(ks * k_len * d + h * dh, d),
                    T::zero(),
                    out.data_mut(),
                    View::row_major(s * q_len * d + h * dh, d),
                );
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            rg,
        ))
    }

    /// Selects rows by index (with repetition). Used for embedding lookup,
    /// broadcasting and `[CLS]` extraction.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let vx = self.value(x);
        let (rows, cols) = (vx.rows(), vx.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!(
                "gather index {bad} out of range for {rows} rows"
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx.iter() {
            data.extend_from_slice(vx.row(i));
        }
        let out = Tensor::new(vec![idx.len(), cols], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::GatherRows { x, idx }, rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(Error::dim("concat_cols", va.shape(), vb.shape()));
        }
        let (ca, cb) = (va.cols(), vb.cols());
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for i in 0..va.rows() {
            data.extend_from_slice(va.row(i));
            data.extend_from_slice(vb.row(i));
        }
        let out = Tensor::new(vec![va.rows(), ca + cb], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::ConcatCols { a, b }, rg))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let cols = vx.cols();
        let mut norms = Vec::with_capacity(vx.rows());
        let mut data = Vec::with_capacity(vx.len());
        for row in vx.data().chunks(cols) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n == T::zero() {
                return Err(Error::contract("cannot normalize a zero row"));
            }
            norms.push(n);
            data.extend(row.iter().map(|&v| v / n));
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::L2NormalizeRows { x, norms }, rg))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = crate::tensor::softmax(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax { x }, rg))
    }

    /// Mean over rows of `-log softmax(row_i)[i]` for a square logit matrix.
    pub fn cross_entropy_diag(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 2 || s[0] != s[1] || s[0] == 0 {
            return Err(Error::contract(format!(
                "logit matrix must be square and non-empty, got {s:?}"
            )));
        }
        if !vx.is_finite() {
            return Err(Error::NonFinite("logits"));
        }
        let b = s[0];
        let mut probs = vx.data().to_vec();
        let mut total = T::zero();
        for (i, row) in vx.data().chunks(b).enumerate() {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total = total + (lse - row[i]);
            softmax_in_place(&mut probs[i * b..(i + 1) * b]);
        }
        let loss = total / T::from_usize(b).unwrap();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropyDiag { x, probs }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let out = Tensor::scalar(vx.sum() / T::from_usize(vx.len()).unwrap());
        let rg = self.rg(x);
        self.push(out, Op::Mean { x }, rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape().len() != 2 {
            return Err(Error::dim("transpose", vx.shape(), &[]));
        }
        let (r, c) = (vx.shape()[0], vx.shape()[1]);
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = vx.data()[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Transpose { x }, rg))
    }

    /// Same values under a new shape with equal element count.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape { x }, rg))
    }

    /// Reverse pass from a scalar `loss`. Gradients from any earlier call are
    /// discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    /// Adds the gradient of every parameter node into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        if let Some(uid) = self.store_uid {
            assert_eq!(uid, store.uid(), "gradients belong to a different store");
        }
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.accumulate_grad(*id, g);
            }
        }
    }

    fn propagate(&self, i: usize, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let g = gout.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[0], sa[1]);
                let n = if *trans_b { sb[0] } else { sb[1] };
                if self.rg(*a) {
                    let bv = if *trans_b {
                        View::row_major(0, k)
                    } else {
                        View::transposed(0, n)
                    };
                    let bdata = self.value(*b).data();
                    self.with_grad(grads, *a, |ga| {
                        gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            g,
                            View::row_major(0, n),
                            bdata,
                            bv,
                            T::one(),
                            ga,
                            View::row_major(0, k),
                        )
                    });
                }
                if self.rg(*b) {
                    let adata = self.value(*a).data();
                    if *trans_b {
                        // d(B) (n×k) = dCᵀ (n×m) @ A (m×k)
                        self.with_grad(grads, *b, |gb| {
                            gemm(
                                n,
                                m,
                                k,
                                T::one(),
                                g,
                                View::transposed(0, n),
                                adata,
                                View::row_major(0, k),
                                T::one(),
                                gb,
                                View::row_major(0, k),
                            )
                        });
                    } else {
                        self.with_grad(grads, *b, |gb| {
                            gemm(
                                k,
                                m,
                                n,
                                T::one(),
                                adata,
                                View::transposed(0, k),
                                g,
                                View::row_major(0, n),
                                T::one(),
                                gb,
                                View::row_major(0, n),
                            )
                        });
                    }
                }
            }
            Op::AddBias { x, b } => {
                if self.rg(*x) {
                    self.with_grad(grads, *x, |gx| add_into(gx, g));
                }
                if self.rg(*b) {
                    let cols = gout.cols();
                    self.with_grad(grads, *b, |gb| {
                        for row in g.chunks(cols) {
                            add_into(gb, row);
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        self.with_grad(grads, v, |gv| add_into(gv, g));
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.rg(*a) {
                    self.with_grad(grads, *a, |ga| add_into(ga, g));
                }
                if self.rg(*b) {
                    self.with_grad(grads, *b, |gb| {
                        for (o, &v) in gb.iter_mut().zip(g) {
                            *o = *o - v;
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    self.with_grad(grads, *a, |ga| {
                        for ((o, &gv), &bv) in ga.iter_mut().zip(g).zip(vb) {
                            *o = *o + gv * bv;
                        }
                    });
                }
                if self.rg(*b) {
                    self.with_grad(grads, *b, |gb| {
                        for ((o, &gv), &av) in gb.iter_mut().zip(g).zip(va) {
                            *o = *o + gv * av;
                        }
                    });
                }
            }
            Op::MulScalar { x, s } => {
                let c = self.value(*s).item();
                if self.rg(*x) {
                    self.with_grad(grads, *x, |gx| {
                        for (o, &gv) in gx.iter_mut().zip(g) {
                            *o = *o + gv * c;
                        }
                    });
                }
                if self.rg(*s) {
                    let dot: T = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&a, &b)| a * b)
                        .sum();
                    self.with_grad(grads, *s, |gs| gs[0] = gs[0] + dot);
                }
            }
            Op::Scale { x, c } => {
                self.with_grad(grads, *x, |gx| {
                    for (o, &gv) in gx.iter_mut().zip(g) {
                        *o = *o + gv * *c;
                    }
                });
            }
            Op::Gelu { x } => {
                let vx = self.value(*x).data();
                self.with_grad(grads, *x, |gx| {
                    for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(vx) {
                        *o = *o + gv * gelu_parts(xv).1;
                    }
                });
            }
            Op::Exp { x } => {
                let y = node.value.data();
                self.with_grad(grads, *x, |gx| {
                    for ((o, &gv), &yv) in gx.iter_mut().zip(g).zip(y) {
                        *o = *o + gv * yv;
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = gout.cols();
                let gam = self.value(*gamma).data();
                if self.rg(*x) {
                    let n = T::from_usize(cols).unwrap();
                    self.with_grad(grads, *x, |gx| {
                        for (r, ((grow, hrow), orow)) in g
                            .chunks(cols)
                            .zip(xhat.chunks(cols))
                            .zip(gx.chunks_mut(cols))
                            .enumerate()
                        {
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            for j in 0..cols {
                                let dh = grow[j] * gam[j];
                                m1 = m1 + dh;
                                m2 = m2 + dh * hrow[j];
                            }
                            m1 = m1 / n;
                            m2 = m2 / n;
                            for j in 0..cols {
                                let dh = grow[j] * gam[j];
                                orow[j] = orow[j] + rstd[r] * (dh - m1 - hrow[j] * m2);
                            }
                        }
                    });
                }
                if self.rg(*gamma) {
                    self.with_grad(grads, *gamma, |gg| {
                        for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                            for j in 0..cols {
                                gg[j] = gg[j] + grow[j] * hrow[j];
                            }
                        }
                    });
                }
                if self.rg(*beta) {
                    self.with_grad(grads, *beta, |gb| {
                        for grow in g.chunks(cols) {
                            add_into(gb, grow);
                        }
                    });
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => self.attention_backward(g, *q, *k, *v, layout, probs, grads),
            Op::GatherRows { x, idx } => {
                let cols = gout.cols();
                self.with_grad(grads, *x, |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * cols..(i + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::ConcatCols { a, b } => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let w = ca + cb;
                if self.rg(*a) {
                    self.with_grad(grads, *a, |ga| {
                        for (grow, orow) in g.chunks(w).zip(ga.chunks_mut(ca)) {
                            add_into(orow, &grow[..ca]);
                        }
                    });
                }
                if self.rg(*b) {
                    self.with_grad(grads, *b, |gb| {
                        for (grow, orow) in g.chunks(w).zip(gb.chunks_mut(cb)) {
                            add_into(orow, &grow[ca..]);
                        }
                    });
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let cols = gout.cols();
                let y = node.value.data();
                self.with_grad(grads, *x, |gx| {
                    for (r, ((grow, yrow), orow)) in g
                        .chunks(cols)
                        .zip(y.chunks(cols))
                        .zip(gx.chunks_mut(cols))
                        .enumerate()
                    {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            orow[j] = orow[j] + (grow[j] - yrow[j] * dot) / norms[r];
                        }
                    }
                });
            }
            Op::Softmax { x } => {
                let cols = gout.cols();
                let y = node.value.data();
                self.with_grad(grads, *x, |gx| {
                    for ((grow, yrow), orow) in
                        g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols))
                    {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            orow[j] = orow[j] + yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropyDiag { x, probs } => {
                let b = self.shape(*x)[0];
                let scale = g[0] / T::from_usize(b).unwrap();
                self.with_grad(grads, *x, |gx| {
                    for i in 0..b {
                        for j in 0..b {
                            let t = if i == j { T::one() } else { T::zero() };
                            gx[i * b + j] = gx[i * b + j] + scale * (probs[i * b + j] - t);
                        }
                    }
                });
            }
            Op::Sum { x } => {
                let gv = g[0];
                self.with_grad(grads, *x, |gx| gx.iter_mut().for_each(|o| *o = *o + gv));
            }
            Op::Mean { x } => {
                let n = T::from_usize(self.value(*x).len()).unwrap();
                let gv = g[0] / n;
                self.with_grad(grads, *x, |gx| gx.iter_mut().for_each(|o| *o = *o + gv));
            }
            Op::Transpose { x } => {
                let s = self.shape(*x);
                let (r, c) = (s[0], s[1]);
                self.with_grad(grads, *x, |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] = gx[i * c + j] + g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape { x } => {
                self.with_grad(grads, *x, |gx| add_into(gx, g));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        q: Var,
        k: Var,
        v: Var,
        layout: &AttnLayout,
        probs: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let d = self.shape(q)[1];
        let (heads, q_len, k_len) = (layout.heads, layout.q_len, layout.k_len);
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let block = q_len * k_len;
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let (want_q, want_k, want_v) = (self.rg(q), self.rg(k), self.rg(v));
        let mut dq = if want_q { vec![T::zero(); qd.len()] } else { Vec::new() };
        let mut dk = if want_k { vec![T::zero(); kd.len()] } else { Vec::new() };
        let mut dv = if want_v { vec![T::zero(); vd.len()] } else { Vec::new() };
        let mut ds = vec![T::zero(); block];
        for (s, &ks) in layout.key_seq.iter().enumerate() {
            let qo = s * q_len * d;
            let ko = ks * k_len * d;
            for h in 0..heads {
                let p = &probs[(s * heads + h) * block..(s * heads + h + 1) * block];
                if want_v {
                    gemm(
                        k_len,
                        q_len,
                        dh,
                        T::one(),
                        p,
                        View::transposed(0, k_len),
                        g,
                        View::row_major(qo + h * dh, d),
                        T::one(),
                        &mut dv,
                        View::row_major(ko + h * dh, d),
                    );
                }
                if !(want_q || want_k) {
                    continue;
                }
                gemm(
                    q_len,
                    dh,
                    k_len,
                    T::one(),
                    g,
                    View::row_major(qo + h * dh, d),
                    vd,
                    View::transposed(ko + h * dh, d),
                    T::zero(),
                    &mut ds,
                    View::row_major(0, k_len),
                );
                for (drow, prow) in ds.chunks_mut(k_len).zip(p.chunks(k_len)) {
                    let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                    for (dv_, &pv) in drow.iter_mut().zip(prow) {
                        *dv_ = pv * (*dv_ - dot);
                    }
                }
                if want_q {
                    gemm(
                        q_len,
                        k_len,
                        dh,
                        scale,
                        &ds,
                        View::row_major(0, k_len),
                        kd,
                        View::row_major(ko + h * dh, d),
                        T::one(),
                        &mut dq,
                        View::row_major(qo + h * dh, d),
                    );
                }
                if want_k {
                    gemm(
                        k_len,
                        q_len,
                        dh,
                        scale,
                        &ds,
                        View::transposed(0, k_len),
                        qd,
                        View::row_major(qo + h * dh, d),
                        T::one(),
                        &mut dk,
                        View::row_major(ko + h * dh, d),
                    );
                }
            }
        }
        if want_q {
            self.with_grad(grads, q, |gq| add_into(gq, &dq));
        }
        if want_k {
            self.with_grad(grads, k, |gk| add_into(gk, &dk));
        }
        if want_v {
            self.with_grad(grads, v, |gv| add_into(gv, &dv));
        }
    }

    fn with_grad(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().expect("just filled").data_mut());
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_rows(&[vec![0.3, -1.2, 2.0, 0.7]]));
        let s = g.softmax(x).unwrap();
        let l = g.sum(s);
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_does_not_accumulate() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 4.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]));
        let w = g.leaf(Tensor::from_rows(&[vec![1.0], vec![1.0]]));
        let y = g.matmul(c, w).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn cross_entropy_uniform_is_log_b() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[4, 4], 0.3));
        let l = g.cross_entropy_diag(x).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
        let rect = g.leaf(Tensor::zeros(&[2, 3]));
        assert!(g.cross_entropy_diag(rect).is_err());
    }
}
