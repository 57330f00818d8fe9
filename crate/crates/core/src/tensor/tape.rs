//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its forward value plus whatever
//! it needs for the backward rule. Nodes only reference earlier nodes, so the
//! tape order is a topological order and [`Tape::backward`] visits each op
//! once by walking it in reverse.
//!
//! A tape built with [`Tape::no_grad`] records values only; it is what the
//! inference paths use.

use super::kernels::{dot, matmul_nn_acc, matmul_nt, matmul_tn_acc};
use super::{softmax_into, Float, Tensor};
use crate::error::{contract_err, dim_err, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'a, S> {
    Owned(Tensor<S>),
    Borrowed(&'a Tensor<S>),
}

impl<S> std::ops::Deref for Value<'_, S> {
    type Target = Tensor<S>;

    fn deref(&self) -> &Tensor<S> {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

/// Batch layout of a causal attention call.
///
/// Queries are `batch * q_len` rows, keys and values `batch * kv_len` rows.
/// Query `i` of a sequence sits at absolute position `kv_len - q_len + i` and
/// attends to keys `0..=kv_len - q_len + i` of the same sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub heads: usize,
    pub batch: usize,
    pub q_len: usize,
    pub kv_len: usize,
}

enum Op<S> {
    Leaf,
    Const,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: S },
    Silu { a: Var },
    Exp { a: Var },
    Log { a: Var },
    Relu { a: Var },
    Softmax { a: Var, inv_t: S },
    LayerNorm { x: Var, gain: Var, bias: Option<Var>, xhat: Vec<S>, rstd: Vec<S> },
    RmsNorm { x: Var, gain: Var, rstd: Vec<S> },
    Rope { x: Var, heads: usize, positions: Vec<usize>, base: f64 },
    Attention { q: Var, k: Var, v: Var, shape: AttentionShape, probs: Vec<S> },
    Embedding { table: Var, ids: Vec<usize> },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    GatherRows { x: Var, idx: Vec<Option<usize>> },
    Sum { a: Var },
    Mean { a: Var },
    KlDiv { logits: Var, target: Vec<S>, weights: Vec<S>, probs: Vec<S>, norm: S },
}

struct Node<'a, S> {
    value: Value<'a, S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Computation tape. `'a` is the lifetime of borrowed leaf tensors (model
/// weights are registered by reference rather than copied).
pub struct Tape<'a, S: Float = f32> {
    nodes: Vec<Node<'a, S>>,
    grads: Vec<Option<Tensor<S>>>,
    grad_enabled: bool,
}

impl<S: Float> Default for Tape<'_, S> {
    fn default() -> Self {
        Self::new()
    }
}

fn rope_angle(pos: usize, pair: usize, head_dim: usize, base: f64) -> (f64, f64) {
    let theta = pos as f64 * base.powf(-2.0 * pair as f64 / head_dim as f64);
    (theta.cos(), theta.sin())
}

#[inline]
fn sigmoid<S: Float>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

impl<'a, S: Float> Tape<'a, S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values but never gradients.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push_leaf(Value::Owned(value), requires_grad)
    }

    /// Registers a borrowed tensor as a leaf without copying it.
    pub fn leaf_ref(&mut self, value: &'a Tensor<S>, requires_grad: bool) -> Var {
        self.push_leaf(Value::Borrowed(value), requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push_leaf(Value::Owned(value), false)
    }

    fn push_leaf(&mut self, value: Value<'a, S>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: if requires_grad { Op::Leaf } else { Op::Const },
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Const };
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn any_rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.rg(v))
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn check_broadcast(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb || (sb.len() <= sa.len() && sa.ends_with(sb) && !sb.is_empty()) {
            Ok(())
        } else {
            Err(dim_err!("{what}: shapes {:?} and {:?} do not broadcast", sa, sb))
        }
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        self.check_broadcast(a, b, what)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let nb = tb.numel();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[i % nb]))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// Matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).as_matrix()?;
        let (k2, n) = self.value(b).as_matrix()?;
        if k != k2 {
            return Err(dim_err!("matmul inner dims {} vs {}", k, k2));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_nn_acc(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let rg = self.any_rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// `x · wᵀ` where `w` is `[out × in]` and `x` is `[.., in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, k) = self.value(w).as_matrix()?;
        let tx = self.value(x);
        if tx.last_dim() != k {
            return Err(dim_err!(
                "linear: input width {} vs weight {:?}",
                tx.last_dim(),
                self.value(w).shape()
            ));
        }
        let m = tx.rows();
        let mut out = vec![S::zero(); m * n];
        matmul_nt(m, k, n, tx.data(), self.value(w).data(), &mut out);
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().expect("non-scalar") = n;
        let rg = self.any_rg(&[x, w]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, m, k, n }, rg))
    }

    /// Elementwise `a + b`; `b` may broadcast over trailing dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.any_rg(&[a, b]);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.any_rg(&[a, b]);
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.any_rg(&[a, b]);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale { a, c }, rg)
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(t, Op::Silu { a }, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.exp());
        let rg = self.rg(a);
        self.push(t, Op::Exp { a }, rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.ln());
        let rg = self.rg(a);
        self.push(t, Op::Log { a }, rg)
    }

    /// `max(x, 0)`.
    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > S::zero() { x } else { S::zero() });
        let rg = self.rg(a);
        self.push(t, Op::Relu { a }, rg)
    }

    /// Row softmax of `a / temperature`; a zero temperature yields a constant
    /// one-hot at each row's argmax.
    pub fn softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        if temperature < 0.0 || temperature.is_nan() {
            return Err(crate::error::Error::Domain(format!(
                "temperature must be >= 0, got {temperature}"
            )));
        }
        let ta = self.value(a);
        let d = ta.last_dim();
        if d == 0 {
            return Err(dim_err!("softmax over an empty axis"));
        }
        let mut out = vec![S::zero(); ta.numel()];
        if temperature == 0.0 {
            for (r, o) in out.chunks_mut(d).enumerate() {
                o[super::argmax(ta.row(r))] = S::one();
            }
            let t = Tensor::new(ta.shape().to_vec(), out)?;
            return Ok(self.constant(t));
        }
        let inv_t = S::of(1.0 / temperature);
        for (r, o) in out.chunks_mut(d).enumerate() {
            softmax_into(ta.row(r), inv_t, o);
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Softmax { a, inv_t }, rg))
    }

    /// Per-row layer norm with `eps` inside the square root, followed by the
    /// affine `gain` / optional `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Option<Var>, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        if self.value(gain).shape() != [d] || bias.is_some_and(|b| self.value(b).shape() != [d]) {
            return Err(dim_err!("layer_norm parameters must have shape [{d}]"));
        }
        let rows = tx.rows();
        let (g, b) = (self.value(gain).data(), bias.map(|b| self.value(b).data()));
        let mut xhat = vec![S::zero(); tx.numel()];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); tx.numel()];
        let dn = S::of(d as f64);
        for r in 0..rows {
            let row = tx.row(r);
            let mean = if row.iter().all(|&v| v == row[0]) {
                row[0]
            } else {
                row.iter().copied().sum::<S>() / dn
            };
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let denom = var + S::of(eps);
            let rs = if denom > S::zero() { S::one() / denom.sqrt() } else { S::zero() };
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b.map_or(S::zero(), |b| b[c]);
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let mut inputs = vec![x, gain];
        inputs.extend(bias);
        let rg = self.any_rg(&inputs);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// `x · rsqrt(mean(x²) + eps) ⊙ gain` per row.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        if self.value(gain).shape() != [d] {
            return Err(dim_err!("rms_norm gain must have shape [{d}]"));
        }
        let g = self.value(gain).data();
        let rows = tx.rows();
        let dn = S::of(d as f64);
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); tx.numel()];
        for r in 0..rows {
            let row = tx.row(r);
            let ms = row.iter().map(|&v| v * v).sum::<S>() / dn;
            let rs = S::one() / (ms + S::of(eps)).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                out[r * d + c] = row[c] * rs * g[c];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.any_rg(&[x, gain]);
        Ok(self.push(t, Op::RmsNorm { x, gain, rstd }, rg))
    }

    /// Rotary position embedding over interleaved pairs of each head.
    /// `positions[r]` is the absolute position of row `r`.
    pub fn rope(&mut self, x: Var, heads: usize, positions: &[usize], base: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        if heads == 0 || !d.is_multiple_of(heads) || !(d / heads).is_multiple_of(2) {
            return Err(dim_err!("rope: width {d} not split into even heads of {heads}"));
        }
        if positions.len() != tx.rows() {
            return Err(dim_err!("rope: {} positions for {} rows", positions.len(), tx.rows()));
        }
        let hd = d / heads;
        let mut out = tx.data().to_vec();
        for (r, &pos) in positions.iter().enumerate() {
            for p in 0..hd / 2 {
                let (c, s) = rope_angle(pos, p, hd, base);
                let (c, s) = (S::of(c), S::of(s));
                for h in 0..heads {
                    let i = r * d + h * hd + 2 * p;
                    let (x0, x1) = (out[i], out[i + 1]);
                    out[i] = x0 * c - x1 * s;
                    out[i + 1] = x0 * s + x1 * c;
                }
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(
            t,
            Op::Rope {
                x,
                heads,
                positions: positions.to_vec(),
                base,
            },
            rg,
        ))
    }

    /// Multi-head causal attention, scaled by `1/sqrt(head_dim)`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, shape: AttentionShape) -> Result<Var> {
        let AttentionShape { heads, batch, q_len, kv_len } = shape;
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.last_dim();
        if heads == 0 || d % heads != 0 || tk.last_dim() != d || tv.last_dim() != d {
            return Err(dim_err!("attention widths q={} k={} v={} heads={heads}", d, tk.last_dim(), tv.last_dim()));
        }
        if q_len > kv_len || tq.rows() != batch * q_len || tk.rows() != batch * kv_len || tv.rows() != batch * kv_len {
            return Err(dim_err!("attention rows do not match {:?}", shape));
        }
        let hd = d / heads;
        let scale = S::of(1.0 / (hd as f64).sqrt());
        let off = kv_len - q_len;
        let rg = [q, k, v].iter().any(|&x| self.nodes[x.0].requires_grad);
        let mut probs = if rg { vec![S::zero(); batch * heads * q_len * kv_len] } else { Vec::new() };
        let mut out = vec![S::zero(); tq.numel()];
        let mut scores = vec![S::zero(); kv_len];
        let mut p = vec![S::zero(); kv_len];
        for b in 0..batch {
            for h in 0..heads {
                let cols = h * hd..(h + 1) * hd;
                for i in 0..q_len {
                    let qrow = &tq.row(b * q_len + i)[cols.clone()];
                    let limit = off + i + 1;
                    for j in 0..limit {
                        scores[j] = dot(qrow, &tk.row(b * kv_len + j)[cols.clone()]) * scale;
                    }
                    softmax_into(&scores[..limit], S::one(), &mut p[..limit]);
                    let orow = &mut out[(b * q_len + i) * d + h * hd..(b * q_len + i) * d + (h + 1) * hd];
                    for j in 0..limit {
                        let vrow = &tv.row(b * kv_len + j)[cols.clone()];
                        let pj = p[j];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o = *o + pj * vv;
                        }
                    }
                    if rg {
                        let base = ((b * heads + h) * q_len + i) * kv_len;
                        probs[base..base + limit].copy_from_slice(&p[..limit]);
                    }
                }
            }
        }
        let t = Tensor::new(tq.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Attention { q, k, v, shape, probs }, rg))
    }

    /// Gathers rows of `table` for each token id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (vocab, d) = tt.as_matrix()?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(crate::error::Error::Domain(format!("token id {id} >= vocab {vocab}")));
            }
            out.extend_from_slice(tt.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(t, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    /// Concatenates 2-D tensors with equal row counts along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| dim_err!("concat of nothing"))?;
        if parts.iter().any(|&p| self.value(p).rows() != rows || self.value(p).shape().len() != 2) {
            return Err(dim_err!("concat_cols: row counts differ"));
        }
        let width: usize = parts.iter().map(|&p| self.value(p).last_dim()).sum();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new(vec![rows, width], out)?;
        let rg = self.any_rg(parts);
        Ok(self.push(t, Op::ConcatCols { parts: parts.to_vec() }, rg))
    }

    /// Stacks 2-D tensors with equal widths.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let width = parts
            .first()
            .map(|&p| self.value(p).last_dim())
            .ok_or_else(|| dim_err!("concat of nothing"))?;
        if parts.iter().any(|&p| self.value(p).last_dim() != width || self.value(p).shape().len() != 2) {
            return Err(dim_err!("concat_rows: widths differ"));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let rows = out.len() / width.max(1);
        let t = Tensor::new(vec![rows, width], out)?;
        let rg = self.any_rg(parts);
        Ok(self.push(t, Op::ConcatRows { parts: parts.to_vec() }, rg))
    }

    /// Selects rows of a 2-D tensor; `None` produces a zero row.
    pub fn gather_rows(&mut self, x: Var, idx: &[Option<usize>]) -> Result<Var> {
        let tx = self.value(x);
        let (rows, d) = tx.as_matrix()?;
        let mut out = vec![S::zero(); idx.len() * d];
        for (o, i) in out.chunks_mut(d.max(1)).zip(idx) {
            if let Some(i) = *i {
                if i >= rows {
                    return Err(dim_err!("gather row {i} of {rows}"));
                }
                o.copy_from_slice(tx.row(i));
            }
        }
        let t = Tensor::new(vec![idx.len(), d], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::GatherRows { x, idx: idx.to_vec() }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let s = ta.data().iter().copied().sum::<S>() / S::of(ta.numel().max(1) as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean { a }, rg)
    }

    /// Weighted mean over rows of `KL(target_r ‖ softmax(logits_r))`.
    ///
    /// `target` rows are probability vectors (constants); `0 · log 0` counts
    /// as zero. Rows with zero weight do not contribute.
    pub fn kl_div(&mut self, logits: Var, target: &Tensor<S>, weights: &[S]) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, vocab) = tl.as_matrix()?;
        if target.shape() != tl.shape() || weights.len() != rows {
            return Err(dim_err!(
                "kl_div: logits {:?}, target {:?}, {} weights",
                tl.shape(),
                target.shape(),
                weights.len()
            ));
        }
        let wsum: S = weights.iter().copied().sum();
        let norm = if wsum > S::zero() { S::one() / wsum } else { S::zero() };
        let mut probs = vec![S::zero(); rows * vocab];
        let mut total = S::zero();
        for r in 0..rows {
            let z = tl.row(r);
            let q = &mut probs[r * vocab..(r + 1) * vocab];
            softmax_into(z, S::one(), q);
            if weights[r] == S::zero() {
                continue;
            }
            let max = z.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
            let mut kl = S::zero();
            for (&p, &zv) in target.row(r).iter().zip(z) {
                if p > S::zero() {
                    kl = kl + p * (p.ln() - (zv - lse));
                }
            }
            total = total + weights[r] * kl;
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total * norm),
            Op::KlDiv {
                logits,
                target: target.data().to_vec(),
                weights: weights.to_vec(),
                probs,
                norm,
            },
            rg,
        ))
    }

    /// Populates gradients of every trainable leaf reachable from `loss`.
    /// Gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        if !self.grad_enabled {
            return Err(contract_err!("backward on a no-grad tape"));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let Tape { nodes, grads, .. } = self;
        let mut adj: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![S::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            backprop(nodes, &mut adj, &node.op, &node.value, &g, &mut grads[idx])?;
        }
        Ok(())
    }
}

fn slot<'b, S: Float>(adj: &'b mut [Option<Vec<S>>], nodes: &[Node<'_, S>], v: Var) -> Option<&'b mut Vec<S>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(adj[v.0].get_or_insert_with(|| vec![S::zero(); n]))
}

fn val<'n, S: Float>(nodes: &'n [Node<'_, S>], v: Var) -> &'n Tensor<S> {
    &nodes[v.0].value
}

/// Adds `g` into `dst`, summing over leading rows when `dst` is a broadcast operand.
fn acc_broadcast<S: Float>(dst: &mut [S], g: &[S], f: impl Fn(usize, S) -> S) {
    let n = dst.len();
    for (i, &gi) in g.iter().enumerate() {
        dst[i % n] = dst[i % n] + f(i, gi);
    }
}

fn backprop<S: Float>(
    nodes: &[Node<'_, S>],
    adj: &mut [Option<Vec<S>>],
    op: &Op<S>,
    out: &Tensor<S>,
    g: &[S],
    leaf_grad: &mut Option<Tensor<S>>,
) -> Result<()> {
    match op {
        Op::Const => {}
        Op::Leaf => match leaf_grad {
            Some(t) => {
                for (a, &b) in t.data_mut().iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
            None => *leaf_grad = Some(Tensor::new(out.shape().to_vec(), g.to_vec())?),
        },
        &Op::MatMul { a, b, m, k, n } => {
            if nodes[a.0].requires_grad {
                let mut tmp = vec![S::zero(); m * k];
                matmul_nt(m, n, k, g, val(nodes, b).data(), &mut tmp);
                let da = slot(adj, nodes, a).expect("rg");
                for (x, y) in da.iter_mut().zip(tmp) {
                    *x = *x + y;
                }
            }
            if let Some(db) = slot(adj, nodes, b) {
                matmul_tn_acc(m, k, n, val(nodes, a).data(), g, db);
            }
        }
        &Op::Linear { x, w, m, k, n } => {
            if let Some(dx) = slot(adj, nodes, x) {
                matmul_nn_acc(m, n, k, g, val(nodes, w).data(), dx);
            }
            if let Some(dw) = slot(adj, nodes, w) {
                matmul_tn_acc(m, n, k, g, val(nodes, x).data(), dw);
            }
        }
        &Op::Add { a, b } => {
            if let Some(da) = slot(adj, nodes, a) {
                acc_broadcast(da, g, |_, gi| gi);
            }
            if let Some(db) = slot(adj, nodes, b) {
                acc_broadcast(db, g, |_, gi| gi);
            }
        }
        &Op::Sub { a, b } => {
            if let Some(da) = slot(adj, nodes, a) {
                acc_broadcast(da, g, |_, gi| gi);
            }
            if let Some(db) = slot(adj, nodes, b) {
                acc_broadcast(db, g, |_, gi| -gi);
            }
        }
        &Op::Mul { a, b } => {
            let (ta, tb) = (val(nodes, a).data(), val(nodes, b).data());
            let nb = tb.len();
            if let Some(da) = slot(adj, nodes, a) {
                acc_broadcast(da, g, |i, gi| gi * tb[i % nb]);
            }
            if let Some(db) = slot(adj, nodes, b) {
                acc_broadcast(db, g, |i, gi| gi * ta[i]);
            }
        }
        &Op::Scale { a, c } => {
            if let Some(da) = slot(adj, nodes, a) {
                acc_broadcast(da, g, |_, gi| gi * c);
            }
        }
        &Op::Silu { a } => {
            let ta = val(nodes, a).data();
            if let Some(da) = slot(adj, nodes, a) {
                acc_broadcast(da, g, |i, gi| {
                    let s = sigmoid(ta[i]);
                    gi * s * (S::one() + ta[i] * (S::one() - s))
                });
            }
        }
        &Op::Exp { a } => {
            if let Some(da) = slot(adj, nodes, a) {
                acc_broadcast(da, g, |i, gi| gi * out.data()[i]);
            }
        }
        &Op::Log { a } => {
            let ta = val(nodes, a).data();
            if let Some(da) = slot(adj, nodes, a) {
                acc_broadcast(da, g, |i, gi| gi / ta[i]);
            }
        }
        &Op::Relu { a } => {
            let ta = val(nodes, a).data();
            if let Some(da) = slot(adj, nodes, a) {
                acc_broadcast(da, g, |i, gi| if ta[i] > S::zero() { gi } else { S::zero() });
            }
        }
        &Op::Softmax { a, inv_t } => {
            if let Some(da) = slot(adj, nodes, a) {
                let d = out.last_dim();
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = &g[r * d..(r + 1) * d];
                    let s: S = y.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for c in 0..d {
                        da[r * d + c] = da[r * d + c] + inv_t * y[c] * (gr[c] - s);
                    }
                }
            }
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let d = out.last_dim();
            let rows = out.rows();
            let gv = val(nodes, *gain).data();
            if let Some(dg) = slot(adj, nodes, *gain) {
                for r in 0..rows {
                    for c in 0..d {
                        dg[c] = dg[c] + g[r * d + c] * xhat[r * d + c];
                    }
                }
            }
            if let Some(b) = bias {
                if let Some(db) = slot(adj, nodes, *b) {
                    acc_broadcast(db, g, |_, gi| gi);
                }
            }
            if let Some(dx) = slot(adj, nodes, *x) {
                let dn = S::of(d as f64);
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut m1 = S::zero();
                    let mut m2 = S::zero();
                    for c in 0..d {
                        let dyg = gr[c] * gv[c];
                        m1 = m1 + dyg;
                        m2 = m2 + dyg * xh[c];
                    }
                    m1 = m1 / dn;
                    m2 = m2 / dn;
                    for c in 0..d {
                        let dyg = gr[c] * gv[c];
                        dx[r * d + c] = dx[r * d + c] + rstd[r] * (dyg - m1 - xh[c] * m2);
                    }
                }
            }
        }
        Op::RmsNorm { x, gain, rstd } => {
            let d = out.last_dim();
            let rows = out.rows();
            let tx = val(nodes, *x).data();
            let gv = val(nodes, *gain).data();
            if let Some(dg) = slot(adj, nodes, *gain) {
                for r in 0..rows {
                    for c in 0..d {
                        dg[c] = dg[c] + g[r * d + c] * tx[r * d + c] * rstd[r];
                    }
                }
            }
            if let Some(dx) = slot(adj, nodes, *x) {
                let dn = S::of(d as f64);
                for r in 0..rows {
                    let mut m = S::zero();
                    for c in 0..d {
                        m = m + g[r * d + c] * gv[c] * tx[r * d + c] * rstd[r];
                    }
                    m = m / dn;
                    for c in 0..d {
                        let xh = tx[r * d + c] * rstd[r];
                        dx[r * d + c] = dx[r * d + c] + rstd[r] * (g[r * d + c] * gv[c] - xh * m);
                    }
                }
            }
        }
        Op::Rope { x, heads, positions, base } => {
            if let Some(dx) = slot(adj, nodes, *x) {
                let d = out.last_dim();
                let hd = d / heads;
                for (r, &pos) in positions.iter().enumerate() {
                    for p in 0..hd / 2 {
                        let (c, s) = rope_angle(pos, p, hd, *base);
                        let (c, s) = (S::of(c), S::of(s));
                        for h in 0..*heads {
                            let i = r * d + h * hd + 2 * p;
                            let (g0, g1) = (g[i], g[i + 1]);
                            dx[i] = dx[i] + g0 * c + g1 * s;
                            dx[i + 1] = dx[i + 1] - g0 * s + g1 * c;
                        }
                    }
                }
            }
        }
        Op::Attention { q, k, v, shape, probs } => {
            let AttentionShape { heads, batch, q_len, kv_len } = *shape;
            let d = out.last_dim();
            let hd = d / heads;
            let scale = S::of(1.0 / (hd as f64).sqrt());
            let off = kv_len - q_len;
            let (tq, tk, tv) = (val(nodes, *q), val(nodes, *k), val(nodes, *v));
            let mut dq = vec![S::zero(); tq.numel()];
            let mut dk = vec![S::zero(); tk.numel()];
            let mut dv = vec![S::zero(); tv.numel()];
            let mut ds = vec![S::zero(); kv_len];
            for b in 0..batch {
                for h in 0..heads {
                    let cols = h * hd..(h + 1) * hd;
                    for i in 0..q_len {
                        let qi = b * q_len + i;
                        let go = &g[qi * d + h * hd..qi * d + (h + 1) * hd];
                        let base = ((b * heads + h) * q_len + i) * kv_len;
                        let limit = off + i + 1;
                        let p = &probs[base..base + limit];
                        let mut t = S::zero();
                        for j in 0..limit {
                            let kj = b * kv_len + j;
                            let dp = dot(go, &tv.row(kj)[cols.clone()]);
                            ds[j] = dp;
                            t = t + p[j] * dp;
                            let dvr = &mut dv[kj * d + h * hd..kj * d + (h + 1) * hd];
                            for (x, &y) in dvr.iter_mut().zip(go) {
                                *x = *x + p[j] * y;
                            }
                        }
                        let qrow = &tq.row(qi)[cols.clone()];
                        for j in 0..limit {
                            let kj = b * kv_len + j;
                            let dsj = p[j] * (ds[j] - t) * scale;
                            let krow = &tk.row(kj)[cols.clone()];
                            let dqr = &mut dq[qi * d + h * hd..qi * d + (h + 1) * hd];
                            for (x, &y) in dqr.iter_mut().zip(krow) {
                                *x = *x + dsj * y;
                            }
                            let dkr = &mut dk[kj * d + h * hd..kj * d + (h + 1) * hd];
                            for (x, &y) in dkr.iter_mut().zip(qrow) {
                                *x = *x + dsj * y;
                            }
                        }
                    }
                }
            }
            for (var, local) in [(*q, dq), (*k, dk), (*v, dv)] {
                if let Some(dst) = slot(adj, nodes, var) {
                    for (x, y) in dst.iter_mut().zip(local) {
                        *x = *x + y;
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            if let Some(dt) = slot(adj, nodes, *table) {
                let d = out.last_dim();
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[id * d + c] = dt[id * d + c] + g[r * d + c];
                    }
                }
            }
        }
        Op::ConcatCols { parts } => {
            let width = out.last_dim();
            let mut start = 0;
            for &p in parts {
                let w = val(nodes, p).last_dim();
                if let Some(dp) = slot(adj, nodes, p) {
                    for r in 0..out.rows() {
                        for c in 0..w {
                            dp[r * w + c] = dp[r * w + c] + g[r * width + start + c];
                        }
                    }
                }
                start += w;
            }
        }
        Op::ConcatRows { parts } => {
            let mut start = 0;
            for &p in parts {
                let n = val(nodes, p).numel();
                if let Some(dp) = slot(adj, nodes, p) {
                    for (x, &y) in dp.iter_mut().zip(&g[start..start + n]) {
                        *x = *x + y;
                    }
                }
                start += n;
            }
        }
        Op::GatherRows { x, idx } => {
            if let Some(dx) = slot(adj, nodes, *x) {
                let d = out.last_dim();
                for (r, i) in idx.iter().enumerate() {
                    if let Some(i) = *i {
                        for c in 0..d {
                            dx[i * d + c] = dx[i * d + c] + g[r * d + c];
                        }
                    }
                }
            }
        }
        &Op::Sum { a } => {
            if let Some(da) = slot(adj, nodes, a) {
                for x in da.iter_mut() {
                    *x = *x + g[0];
                }
            }
        }
        &Op::Mean { a } => {
            if let Some(da) = slot(adj, nodes, a) {
                let inv = g[0] / S::of(da.len().max(1) as f64);
                for x in da.iter_mut() {
                    *x = *x + inv;
                }
            }
        }
        Op::KlDiv { logits, target, weights, probs, norm } => {
            if let Some(dz) = slot(adj, nodes, *logits) {
                let vocab = val(nodes, *logits).last_dim();
                for (r, &w) in weights.iter().enumerate() {
                    if w == S::zero() {
                        continue;
                    }
                    let coef = g[0] * w * *norm;
                    let p = &target[r * vocab..(r + 1) * vocab];
                    let q = &probs[r * vocab..(r + 1) * vocab];
                    let psum: S = p.iter().copied().sum();
                    for c in 0..vocab {
                        dz[r * vocab + c] = dz[r * vocab + c] + coef * (q[c] * psum - p[c]);
                    }
                }
            }
        }
    }
    Ok(())
}
