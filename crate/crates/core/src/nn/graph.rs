//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass; the
//! values are computed eagerly. [`Graph::backward`] walks the tape in reverse
//! and returns exact gradients for every node that depends on a parameter or
//! leaf input.

use std::collections::HashMap;

use rand::Rng;

use crate::nn::tensor::gemm;
use crate::nn::{NnError, ParamId, ParamStore, Tensor};
use crate::scalar::Scalar;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Block-diagonal layout of a batched attention call: each segment
/// `(start, len)` is an independent sequence and only attends to itself.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayout {
    pub segments: Vec<(usize, usize)>,
    /// Per-row key validity; invalid keys receive an additive `-inf`.
    pub key_valid: Option<Vec<bool>>,
    pub heads: usize,
}

impl AttentionLayout {
    pub fn new(segments: Vec<(usize, usize)>, heads: usize) -> Self {
        Self {
            segments,
            key_valid: None,
            heads,
        }
    }

    pub fn with_key_mask(mut self, key_valid: Vec<bool>) -> Self {
        self.key_valid = Some(key_valid);
        self
    }
}

enum Op<T> {
    Leaf,
    Param,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    DivScalar(usize, usize),
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(usize),
    Relu(usize),
    Tanh(usize),
    Softmax(usize),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        layout: AttentionLayout,
        probs: Vec<T>,
    },
    L2Normalize {
        x: usize,
        norms: Vec<T>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(usize),
    Mean(usize),
    RowMax {
        x: usize,
        argmax: Vec<Option<usize>>,
    },
    ConcatRows(Vec<usize>),
    GatherRows {
        x: usize,
        idx: Vec<usize>,
    },
    Dropout {
        x: usize,
        mask: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Forward tape. Parameters are pulled in through [`Graph::param`] and their
/// gradients are pushed back with [`Graph::accumulate_param_grads`].
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    training: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t)
        + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x);
    (y, dy)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            training: false,
        }
    }

    /// A tape whose dropout calls are active.
    pub fn training() -> Self {
        Self {
            training: true,
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> NnError {
        NnError::ShapeMismatch {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    fn require_2d(&self, op: &'static str, v: Var) -> Result<(usize, usize), NnError> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(NnError::ShapeMismatch {
                op,
                left: s.to_vec(),
                right: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    /// Input that takes no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is tracked (used by operator-level checks).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Brings a parameter onto the tape; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param, p.trainable);
        self.params.insert(id, v);
        v
    }

    /// Adds the gradient of every parameter node into the store's buffers.
    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) {
        let mut pairs: Vec<_> = self.params.iter().collect();
        pairs.sort_by_key(|(id, _)| **id);
        for (&id, &v) in pairs {
            if let Some(g) = grads.get(v) {
                store.accumulate_grad(id, g);
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (m, k) = self.require_2d("matmul", a)?;
        let (k2, n) = self.require_2d("matmul", b)?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            T::zero(),
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a.0, b.0), ng))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (m, k) = self.require_2d("matmul_nt", a)?;
        let (n, k2) = self.require_2d("matmul_nt", b)?;
        if k != k2 {
            return Err(self.mismatch("matmul_nt", a, b));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            &mut out,
            T::zero(),
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a.0, b.0), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NnError> {
        let (r, c) = self.require_2d("transpose", a)?;
        let x = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a.0), ng))
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>, NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(name, a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let t = self.zip_op("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a.0, b.0), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let t = self.zip_op("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a.0, b.0), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let t = self.zip_op("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a.0, b.0), ng))
    }

    /// Adds a `[cols]` vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NnError> {
        let w = self.value(x).row_len();
        if self.value(bias).len() != w {
            return Err(self.mismatch("add_bias", x, bias));
        }
        let b = self.value(bias).data().to_vec();
        let mut t = self.value(x).clone();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += b[i % w];
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(t, Op::AddBias(x.0, bias.0), ng))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(t, Op::Scale(x.0, c), ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v + c);
        let ng = self.ng(x);
        self.push(t, Op::AddScalar(x.0), ng)
    }

    /// Divides every entry of `x` by the single value held in `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var, NnError> {
        if self.value(s).len() != 1 {
            return Err(self.mismatch("div_scalar", x, s));
        }
        let d = self.value(s).item();
        let t = self.value(x).map(|v| v / d);
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(t, Op::DivScalar(x.0, s.0), ng))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NnError> {
        let (vocab, d) = self.require_2d("embedding", table)?;
        let tab = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(NnError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(tab.row(id));
        }
        let ng = self.ng(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NnError> {
        let eps = T::lit(1e-12);
        let w = self.value(x).row_len();
        if self.value(gamma).len() != w || self.value(beta).len() != w {
            return Err(self.mismatch("layer_norm", x, gamma));
        }
        let rows = self.value(x).rows();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let xs = self.value(x);
        let mut xhat = Vec::with_capacity(rows * w);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * w);
        let n = T::lit(w as f64);
        for i in 0..rows {
            let row = xs.row(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let shape = xs.shape().to_vec();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| gelu_parts(v).0);
        let ng = self.ng(x);
        self.push(t, Op::Gelu(x.0), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.ng(x);
        self.push(t, Op::Relu(x.0), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.tanh());
        let ng = self.ng(x);
        self.push(t, Op::Tanh(x.0), ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        for i in 0..t.rows() {
            softmax_in_place(t.row_mut(i));
        }
        let ng = self.ng(x);
        self.push(t, Op::Softmax(x.0), ng)
    }

    /// Multi-head scaled dot-product attention over `[rows, d]` projections,
    /// evaluated independently inside each segment of `layout`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
    ) -> Result<Var, NnError> {
        let (rows, d) = self.require_2d("attention", q)?;
        if self.shape(k) != self.shape(q) {
            return Err(self.mismatch("attention", q, k));
        }
        if self.shape(v) != self.shape(q) {
            return Err(self.mismatch("attention", q, v));
        }
        let heads = layout.heads;
        if heads == 0 || d % heads != 0 {
            return Err(NnError::InvalidArgument(format!(
                "attention: width {d} not divisible by {heads} heads"
            )));
        }
        if let Some(kv) = &layout.key_valid {
            if kv.len() != rows {
                return Err(NnError::InvalidArgument(
                    "attention: key mask length".into(),
                ));
            }
        }
        for &(s, l) in &layout.segments {
            if s + l > rows {
                return Err(NnError::InvalidArgument(
                    "attention: segment out of range".into(),
                ));
            }
        }
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let qs = self.value(q).data();
        let ks = self.value(k).data();
        let vs = self.value(v).data();
        let mut out = vec![T::zero(); rows * d];
        let total: usize = layout.segments.iter().map(|&(_, l)| l * l).sum::<usize>() * heads;
        let mut probs = Vec::with_capacity(total);
        let mut scores = Vec::new();
        for &(start, len) in &layout.segments {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..len {
                    scores.clear();
                    let qi = &qs[(start + i) * d + off..(start + i) * d + off + dh];
                    for j in 0..len {
                        let valid = layout.key_valid.as_ref().is_none_or(|m| m[start + j]);
                        if valid {
                            let kj = &ks[(start + j) * d + off..(start + j) * d + off + dh];
                            let dot = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>();
                            scores.push(dot * scale);
                        } else {
                            scores.push(T::neg_infinity());
                        }
                    }
                    if scores.iter().all(|s| *s == T::neg_infinity()) {
                        scores.iter_mut().for_each(|s| *s = T::zero());
                    } else {
                        softmax_in_place(&mut scores);
                    }
                    let orow = &mut out[(start + i) * d + off..(start + i) * d + off + dh];
                    for (j, &p) in scores.iter().enumerate() {
                        if p != T::zero() {
                            let vj = &vs[(start + j) * d + off..(start + j) * d + off + dh];
                            for (o, &vv) in orow.iter_mut().zip(vj) {
                                *o += p * vv;
                            }
                        }
                    }
                    probs.extend_from_slice(&scores);
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            Tensor::new(vec![rows, d], out)?,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                layout,
                probs,
            },
            ng,
        ))
    }

    /// Row-wise L2 normalization. Zero rows map to zero rows.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        let mut norms = Vec::with_capacity(t.rows());
        for i in 0..t.rows() {
            let row = t.row_mut(i);
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms.push(n);
            if n > T::zero() {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        let ng = self.ng(x);
        self.push(t, Op::L2Normalize { x: x.0, norms }, ng)
    }

    /// Mean cross entropy of `[n, classes]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NnError> {
        let (n, c) = self.require_2d("cross_entropy", logits)?;
        if targets.len() != n || n == 0 {
            return Err(NnError::InvalidArgument(format!(
                "cross_entropy: {n} rows but {} targets",
                targets.len()
            )));
        }
        let x = self.value(logits);
        let mut probs = Vec::with_capacity(n * c);
        let mut loss = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(NnError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    bound: c,
                });
            }
            let row = x.row(i);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z = row.iter().map(|&v| (v - m).exp()).sum::<T>();
            let lz = z.ln();
            loss += -(row[t] - m - lz);
            probs.extend(row.iter().map(|&v| (v - m).exp() / z));
        }
        loss /= T::lit(n as f64);
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x.0), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::lit(t.len() as f64);
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x.0), ng)
    }

    /// Maximum of each row over the columns allowed by `col_valid`. Rows with
    /// no allowed column yield zero.
    pub fn row_max(&mut self, x: Var, col_valid: Option<&[bool]>) -> Result<Var, NnError> {
        let (r, c) = self.require_2d("row_max", x)?;
        if let Some(m) = col_valid {
            if m.len() != c {
                return Err(NnError::InvalidArgument(
                    "row_max: column mask length".into(),
                ));
            }
        }
        let t = self.value(x);
        let mut out = Vec::with_capacity(r);
        let mut argmax = Vec::with_capacity(r);
        for i in 0..r {
            let row = t.row(i);
            let mut best: Option<usize> = None;
            for (j, &v) in row.iter().enumerate() {
                if col_valid.is_none_or(|m| m[j]) && best.is_none_or(|b| v > row[b]) {
                    best = Some(j);
                }
            }
            out.push(best.map_or(T::zero(), |b| row[b]));
            argmax.push(best);
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![r], out)?,
            Op::RowMax { x: x.0, argmax },
            ng,
        ))
    }

    /// Stacks inputs along the leading axis; trailing sizes must agree.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var, NnError> {
        let first = *xs
            .first()
            .ok_or_else(|| NnError::InvalidArgument("concat_rows: no inputs".into()))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            if self.shape(x)[1..] != tail[..] {
                return Err(self.mismatch("concat_rows", first, x));
            }
            rows += self.shape(x)[0];
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let ng = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::ConcatRows(xs.iter().map(|v| v.0).collect()),
            ng,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, NnError> {
        let t = self.value(x);
        let rows = t.rows();
        let mut data = Vec::with_capacity(idx.len() * t.row_len());
        for &i in idx {
            if i >= rows {
                return Err(NnError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: rows,
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::GatherRows {
                x: x.0,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Inverted dropout; identity unless the tape is in training mode.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if !self.training || rate <= 0.0 {
            return x;
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mut t = self.value(x).clone();
        for (v, m) in t.data_mut().iter_mut().zip(&mask) {
            *v *= *m;
        }
        let ng = self.ng(x);
        self.push(t, Op::Dropout { x: x.0, mask }, ng)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NnError> {
        if self.value(loss).len() != 1 {
            return Err(NnError::InvalidArgument(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[i] = Some(gy);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
                    let n = nodes[*b].value.shape()[1];
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        gemm(
                            m,
                            n,
                            k,
                            &gy,
                            false,
                            nodes[*b].value.data(),
                            true,
                            ga,
                            T::one(),
                        );
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        gemm(
                            k,
                            m,
                            n,
                            nodes[*a].value.data(),
                            true,
                            &gy,
                            false,
                            gb,
                            T::one(),
                        );
                    }
                }
                Op::MatMulNt(a, b) => {
                    let (m, k) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
                    let n = nodes[*b].value.shape()[0];
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        gemm(
                            m,
                            n,
                            k,
                            &gy,
                            false,
                            nodes[*b].value.data(),
                            false,
                            ga,
                            T::one(),
                        );
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        gemm(
                            n,
                            m,
                            k,
                            &gy,
                            true,
                            nodes[*a].value.data(),
                            false,
                            gb,
                            T::one(),
                        );
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for i in 0..r {
                            for j in 0..c {
                                ga[i * c + j] += gy[j * r + i];
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for x in [*a, *b] {
                        if let Some(gx) = slot(&mut grads, nodes, x) {
                            add_into(gx, &gy);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        add_into(ga, &gy);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        gb.iter_mut().zip(&gy).for_each(|(g, &d)| *g -= d);
                    }
                }
                Op::Mul(a, b) => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        let bv = nodes[*b].value.data();
                        for ((g, &d), &y) in ga.iter_mut().zip(&gy).zip(bv) {
                            *g += d * y;
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        let av = nodes[*a].value.data();
                        for ((g, &d), &y) in gb.iter_mut().zip(&gy).zip(av) {
                            *g += d * y;
                        }
                    }
                }
                Op::AddBias(x, b) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        add_into(gx, &gy);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        let w = gb.len();
                        for (i, &d) in gy.iter().enumerate() {
                            gb[i % w] += d;
                        }
                    }
                }
                Op::Scale(x, c) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        gx.iter_mut().zip(&gy).for_each(|(g, &d)| *g += d * *c);
                    }
                }
                Op::AddScalar(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        add_into(gx, &gy);
                    }
                }
                Op::DivScalar(x, s) => {
                    let d = nodes[*s].value.item();
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        gx.iter_mut().zip(&gy).for_each(|(g, &dy)| *g += dy / d);
                    }
                    if let Some(gs) = slot(&mut grads, nodes, *s) {
                        let xv = nodes[*x].value.data();
                        let acc = gy.iter().zip(xv).map(|(&dy, &xx)| dy * xx).sum::<T>();
                        gs[0] -= acc / (d * d);
                    }
                }
                Op::Embedding { table, ids } => {
                    if let Some(gt) = slot(&mut grads, nodes, *table) {
                        let d = nodes[*table].value.shape()[1];
                        for (r, &id) in ids.iter().enumerate() {
                            add_into(&mut gt[id * d..(id + 1) * d], &gy[r * d..(r + 1) * d]);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let w = nodes[*gamma].value.len();
                    let g = nodes[*gamma].value.data();
                    if let Some(gg) = slot(&mut grads, nodes, *gamma) {
                        for (i, &d) in gy.iter().enumerate() {
                            gg[i % w] += d * xhat[i];
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *beta) {
                        for (i, &d) in gy.iter().enumerate() {
                            gb[i % w] += d;
                        }
                    }
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        let n = T::lit(w as f64);
                        for (r, &rs) in rstd.iter().enumerate() {
                            let base = r * w;
                            let mut sum_d = T::zero();
                            let mut sum_dx = T::zero();
                            for j in 0..w {
                                let dh = gy[base + j] * g[j];
                                sum_d += dh;
                                sum_dx += dh * xhat[base + j];
                            }
                            for j in 0..w {
                                let dh = gy[base + j] * g[j];
                                gx[base + j] += rs / n * (n * dh - sum_d - xhat[base + j] * sum_dx);
                            }
                        }
                    }
                }
                Op::Gelu(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        let xv = nodes[*x].value.data();
                        for ((g, &d), &v) in gx.iter_mut().zip(&gy).zip(xv) {
                            *g += d * gelu_parts(v).1;
                        }
                    }
                }
                Op::Relu(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        let xv = nodes[*x].value.data();
                        for ((g, &d), &v) in gx.iter_mut().zip(&gy).zip(xv) {
                            if v > T::zero() {
                                *g += d;
                            }
                        }
                    }
                }
                Op::Tanh(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        let yv = node.value.data();
                        for ((g, &d), &y) in gx.iter_mut().zip(&gy).zip(yv) {
                            *g += d * (T::one() - y * y);
                        }
                    }
                }
                Op::Softmax(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        let y = &node.value;
                        let w = y.row_len();
                        for r in 0..y.rows() {
                            let yr = y.row(r);
                            let dr = &gy[r * w..(r + 1) * w];
                            let dot = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum::<T>();
                            for j in 0..w {
                                gx[r * w + j] += yr[j] * (dr[j] - dot);
                            }
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    layout,
                    probs,
                } => {
                    let (gq, gk, gv) = attention_backward(
                        nodes[*q].value.data(),
                        nodes[*k].value.data(),
                        nodes[*v].value.data(),
                        nodes[*q].value.shape()[1],
                        layout,
                        probs,
                        &gy,
                    );
                    for (x, gx) in [(*q, gq), (*k, gk), (*v, gv)] {
                        if let Some(slot) = slot(&mut grads, nodes, x) {
                            add_into(slot, &gx);
                        }
                    }
                }
                Op::L2Normalize { x, norms } => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        let y = &node.value;
                        let w = y.row_len();
                        for (r, &n) in norms.iter().enumerate() {
                            if n <= T::zero() {
                                continue;
                            }
                            let yr = y.row(r);
                            let dr = &gy[r * w..(r + 1) * w];
                            let dot = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum::<T>();
                            for j in 0..w {
                                gx[r * w + j] += (dr[j] - yr[j] * dot) / n;
                            }
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    if let Some(gl) = slot(&mut grads, nodes, *logits) {
                        let n = targets.len();
                        let c = probs.len() / n;
                        let s = gy[0] / T::lit(n as f64);
                        for (r, &t) in targets.iter().enumerate() {
                            for j in 0..c {
                                let mut p = probs[r * c + j];
                                if j == t {
                                    p -= T::one();
                                }
                                gl[r * c + j] += s * p;
                            }
                        }
                    }
                }
                Op::Sum(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        gx.iter_mut().for_each(|g| *g += gy[0]);
                    }
                }
                Op::Mean(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        let s = gy[0] / T::lit(gx.len() as f64);
                        gx.iter_mut().for_each(|g| *g += s);
                    }
                }
                Op::RowMax { x, argmax } => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        let c = nodes[*x].value.shape()[1];
                        for (r, am) in argmax.iter().enumerate() {
                            if let Some(j) = am {
                                gx[r * c + j] += gy[r];
                            }
                        }
                    }
                }
                Op::ConcatRows(xs) => {
                    let mut off = 0;
                    for &x in xs {
                        let len = nodes[x].value.len();
                        if let Some(gx) = slot(&mut grads, nodes, x) {
                            add_into(gx, &gy[off..off + len]);
                        }
                        off += len;
                    }
                }
                Op::GatherRows { x, idx } => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        let w = nodes[*x].value.row_len();
                        for (r, &i) in idx.iter().enumerate() {
                            add_into(&mut gx[i * w..(i + 1) * w], &gy[r * w..(r + 1) * w]);
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for ((g, &d), &m) in gx.iter_mut().zip(&gy).zip(mask) {
                            *g += d * m;
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn slot<'a, T: Scalar>(
    grads: &'a mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    idx: usize,
) -> Option<&'a mut Vec<T>> {
    if !nodes[idx].needs_grad {
        return None;
    }
    let len = nodes[idx].value.len();
    Some(grads[idx].get_or_insert_with(|| vec![T::zero(); len]))
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

/// Numerically stable in-place softmax. Entries equal to `-inf` become zero.
pub(crate) fn softmax_in_place<T: Scalar>(xs: &mut [T]) {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    xs.iter_mut().for_each(|x| *x /= z);
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    d: usize,
    layout: &AttentionLayout,
    probs: &[T],
    gy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let heads = layout.heads;
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut gq = vec![T::zero(); q.len()];
    let mut gk = vec![T::zero(); k.len()];
    let mut gv = vec![T::zero(); v.len()];
    let mut p_off = 0;
    let mut dp = Vec::new();
    for &(start, len) in &layout.segments {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..len {
                let p = &probs[p_off + i * len..p_off + (i + 1) * len];
                let gi = &gy[(start + i) * d + off..(start + i) * d + off + dh];
                dp.clear();
                for j in 0..len {
                    let vj = &v[(start + j) * d + off..(start + j) * d + off + dh];
                    dp.push(gi.iter().zip(vj).map(|(&a, &b)| a * b).sum::<T>());
                    if p[j] != T::zero() {
                        let gvj = &mut gv[(start + j) * d + off..(start + j) * d + off + dh];
                        for (g, &o) in gvj.iter_mut().zip(gi) {
                            *g += p[j] * o;
                        }
                    }
                }
                let dot = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum::<T>();
                for j in 0..len {
                    if p[j] == T::zero() {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - dot) * scale;
                    let qi_base = (start + i) * d + off;
                    let kj_base = (start + j) * d + off;
                    for c in 0..dh {
                        gq[qi_base + c] += ds * k[kj_base + c];
                        gk[kj_base + c] += ds * q[qi_base + c];
                    }
                }
            }
            p_off += len * len;
        }
    }
    (gq, gk, gv)
}
