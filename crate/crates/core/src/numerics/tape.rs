//! Reverse-accumulation tape over whole tensors.
//!
//! A [`Graph`] borrows a [`ParamSet`] for the duration of one forward/backward
//! pass and records every differentiable operation in execution order.
//! [`Graph::backward`] replays the record in reverse and returns one gradient
//! tensor per parameter; parameters that never reached the loss get zeros.

use super::kernels;
use super::{gelu, gelu_grad, Real, Tensor};
use crate::error::{Error, Result};

/// Named, ordered parameter storage.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter and returns its index. Names must be unique.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        let name = name.into();
        assert!(self.index_of(&name).is_none(), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn set(&mut self, i: usize, tensor: Tensor<T>) {
        assert_eq!(self.tensors[i].shape(), tensor.shape());
        self.tensors[i] = tensor;
    }

    pub fn data_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.tensors[i].data
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value<T> {
    Owned(Tensor<T>),
    Param(usize),
}

enum Op<T> {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<(usize, usize)>,
        probs: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    LogSoftmax(Var),
    PickMean {
        x: Var,
        targets: Vec<Option<usize>>,
        count: usize,
    },
    Fused {
        inputs: Vec<Var>,
        grads: Vec<Tensor<T>>,
    },
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T = f32> {
    grads: Vec<Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        Self {
            grads: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn get(&self, param: usize) -> &Tensor<T> {
        &self.grads[param]
    }

    pub fn all(&self) -> &[Tensor<T>] {
        &self.grads
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: T) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }
}

/// Recording of one differentiable computation over a borrowed [`ParamSet`].
pub struct Graph<'p, T: Real = f32> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(i) => self.params.tensor(*i),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a parameter of the borrowed set as a differentiable leaf.
    pub fn param(&mut self, index: usize) -> Var {
        assert!(index < self.params.len(), "parameter index out of range");
        self.nodes.push(Node {
            value: Value::Param(index),
            op: Op::Param(index),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant; it never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// Adds a bias vector to every row of `x`, the only broadcast supported.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.value(x).dims2()?;
        let b = self.value(bias);
        if b.len() != n {
            return Err(Error::Shape(format!("bias of length {} for {n} columns", b.len())));
        }
        let mut out = self.value(x).clone();
        kernels::add_bias(&mut out.data, b.data());
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddBias(x, bias), ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        for (o, &v) in out.data.iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        for (o, &v) in out.data.iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(out, Op::Sum(x), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let ng = self.needs(x);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(Error::Shape("layer norm parameter width".into()));
        }
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let out = kernels::layer_norm(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
            Some((&mut xhat, &mut rstd)),
        );
        let shape = self.value(x).shape().to_vec();
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Selects rows of a `[vocab × dim]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(table).dims2()?;
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Input(format!("row index {id} >= {rows}")));
            }
            out.extend_from_slice(&t[id * cols..(id + 1) * cols]);
        }
        let ng = self.needs(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), cols], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[rows × dim]`; each `(start, len)` segment is an
    /// independent sequence. Keys with `key_valid[row] == false` receive zero
    /// weight; a query with no valid key outputs zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[(usize, usize)],
        key_valid: &[bool],
    ) -> Result<Var> {
        let (rows, dim) = self.value(q).dims2()?;
        if self.value(k).shape() != self.value(q).shape() || self.value(v).shape() != self.value(q).shape() {
            return Err(Error::Shape("attention q/k/v shapes differ".into()));
        }
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Shape(format!("{dim} not divisible by {heads} heads")));
        }
        if key_valid.len() != rows {
            return Err(Error::Shape("key mask length".into()));
        }
        check_segments(segments, rows)?;
        let mut probs = Vec::new();
        let out = kernels::attention(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            dim,
            heads,
            segments,
            key_valid,
            Some(&mut probs),
        );
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            Tensor::new(vec![rows, dim], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Multiplies by a fixed mask (already scaled by the keep probability).
    pub fn dropout(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::Shape("dropout mask length".into()));
        }
        let mut out = self.value(x).clone();
        for (o, &m) in out.data.iter_mut().zip(&mask) {
            *o *= m;
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::Dropout { x, mask }, ng))
    }

    /// Row-wise log-softmax of a matrix.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let axis = t.shape().len().saturating_sub(1);
        let out = super::log_softmax(t, axis)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::LogSoftmax(x), ng))
    }

    /// `-mean_r x[r, targets[r]]` over rows with a target.
    pub fn pick_mean_neg(&mut self, x: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if targets.len() != rows {
            return Err(Error::Shape("target length".into()));
        }
        let xs = self.value(x).data();
        let mut s = T::zero();
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= cols {
                    return Err(Error::Input(format!("target {t} >= {cols}")));
                }
                s += xs[r * cols + t];
                count += 1;
            }
        }
        let val = if count == 0 {
            T::zero()
        } else {
            -s / T::of(count as f64)
        };
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::scalar(val),
            Op::PickMean {
                x,
                targets: targets.to_vec(),
                count,
            },
            ng,
        ))
    }

    /// Records a scalar computed outside the tape together with its analytic
    /// gradients with respect to `inputs`.
    pub fn fused_scalar(&mut self, value: T, inputs: Vec<Var>, grads: Vec<Tensor<T>>) -> Result<Var> {
        if inputs.len() != grads.len() {
            return Err(Error::Contract("fused op needs one gradient per input".into()));
        }
        for (v, g) in inputs.iter().zip(&grads) {
            if self.value(*v).shape() != g.shape() {
                return Err(Error::Shape("fused gradient shape".into()));
            }
        }
        let ng = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(Tensor::scalar(value), Op::Fused { inputs, grads }, ng))
    }

    /// Replays the tape backward from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::zeros_like(self.params);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let mut contrib: Vec<(Var, Vec<T>)> = Vec::new();
            let val = |v: Var| self.value(v);
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => {
                    for (o, v) in out.grads[*p].data.iter_mut().zip(&g) {
                        *o += *v;
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = val(*a).dims2()?;
                    let (_, n) = val(*b).dims2()?;
                    if self.needs(*a) {
                        let mut da = vec![T::zero(); m * k];
                        kernels::matmul_nt(&g, val(*b).data(), &mut da, m, n, k);
                        contrib.push((*a, da));
                    }
                    if self.needs(*b) {
                        let mut db = vec![T::zero(); k * n];
                        kernels::matmul_tn(val(*a).data(), &g, &mut db, m, k, n);
                        contrib.push((*b, db));
                    }
                }
                Op::AddBias(x, b) => {
                    if self.needs(*b) {
                        let n = val(*b).len();
                        let mut db = vec![T::zero(); n];
                        for row in g.chunks_exact(n) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        contrib.push((*b, db));
                    }
                    contrib.push((*x, g));
                }
                Op::Add(a, b) => {
                    contrib.push((*a, g.clone()));
                    contrib.push((*b, g));
                }
                Op::Mul(a, b) => {
                    let da = g.iter().zip(val(*b).data()).map(|(&u, &w)| u * w).collect();
                    let db = g.iter().zip(val(*a).data()).map(|(&u, &w)| u * w).collect();
                    contrib.push((*a, da));
                    contrib.push((*b, db));
                }
                Op::Scale(x, c) => {
                    contrib.push((*x, g.iter().map(|&u| u * *c).collect()));
                }
                Op::Sum(x) => {
                    contrib.push((*x, vec![g[0]; val(*x).len()]));
                }
                Op::Gelu(x) => {
                    let dx = g
                        .iter()
                        .zip(val(*x).data())
                        .map(|(&u, &xv)| u * gelu_grad(xv))
                        .collect();
                    contrib.push((*x, dx));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let cols = val(*gamma).len();
                    let gm = val(*gamma).data();
                    let n = T::of(cols as f64);
                    let mut dg = vec![T::zero(); cols];
                    let mut dbeta = vec![T::zero(); cols];
                    let mut dx = vec![T::zero(); g.len()];
                    let mut dh = vec![T::zero(); cols];
                    for (r, gr) in g.chunks_exact(cols).enumerate() {
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..cols {
                            dg[j] += gr[j] * hr[j];
                            dbeta[j] += gr[j];
                            dh[j] = gr[j] * gm[j];
                            s1 += dh[j];
                            s2 += dh[j] * hr[j];
                        }
                        let f = rstd[r] / n;
                        for j in 0..cols {
                            dx[r * cols + j] = f * (n * dh[j] - s1 - hr[j] * s2);
                        }
                    }
                    contrib.push((*x, dx));
                    contrib.push((*gamma, dg));
                    contrib.push((*beta, dbeta));
                }
                Op::Gather { table, ids } => {
                    let (_, cols) = val(*table).dims2()?;
                    let mut dt = vec![T::zero(); val(*table).len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..cols {
                            dt[id * cols + j] += g[r * cols + j];
                        }
                    }
                    contrib.push((*table, dt));
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    segments,
                    probs,
                } => {
                    let (dq, dk, dv) = attention_backward(val(*q), val(*k), val(*v), *heads, segments, probs, &g);
                    contrib.push((*q, dq));
                    contrib.push((*k, dk));
                    contrib.push((*v, dv));
                }
                Op::Dropout { x, mask } => {
                    contrib.push((*x, g.iter().zip(mask).map(|(&u, &m)| u * m).collect()));
                }
                Op::LogSoftmax(x) => {
                    let y = node_value(node, self.params);
                    let cols = *y.shape().last().unwrap_or(&1);
                    let mut dx = vec![T::zero(); g.len()];
                    for ((dr, gr), yr) in dx
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(y.data().chunks_exact(cols))
                    {
                        let s: T = gr.iter().copied().sum();
                        for j in 0..cols {
                            dr[j] = gr[j] - yr[j].exp() * s;
                        }
                    }
                    contrib.push((*x, dx));
                }
                Op::PickMean { x, targets, count } => {
                    let (_, cols) = val(*x).dims2()?;
                    let mut dx = vec![T::zero(); val(*x).len()];
                    if *count > 0 {
                        let w = -g[0] / T::of(*count as f64);
                        for (r, t) in targets.iter().enumerate() {
                            if let Some(t) = t {
                                dx[r * cols + t] = w;
                            }
                        }
                    }
                    contrib.push((*x, dx));
                }
                Op::Fused { inputs, grads: gs } => {
                    for (v, gt) in inputs.iter().zip(gs) {
                        contrib.push((*v, gt.data().iter().map(|&d| d * g[0]).collect()));
                    }
                }
            }
            for (v, d) in contrib {
                if !self.needs(v) {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&d) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(d),
                }
            }
        }
        Ok(out)
    }
}

fn node_value<'a, T: Real>(node: &'a Node<T>, params: &'a ParamSet<T>) -> &'a Tensor<T> {
    match &node.value {
        Value::Owned(t) => t,
        Value::Param(i) => params.tensor(*i),
    }
}

fn check_segments(segments: &[(usize, usize)], rows: usize) -> Result<()> {
    let mut next = 0;
    for &(start, len) in segments {
        if start < next || start + len > rows {
            return Err(Error::Shape(format!(
                "segment ({start}, {len}) invalid for {rows} rows"
            )));
        }
        next = start + len;
    }
    Ok(())
}

kernels::kernel! {
fn attention_backward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    segments: &[(usize, usize)],
    probs: &[T],
    g: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dim = q.shape()[1];
    let dh = dim / heads;
    let (qs, ks, vs) = (q.data(), k.data(), v.data());
    let inv = T::one() / T::of(dh as f64).sqrt();
    let mut dq = vec![T::zero(); qs.len()];
    let mut dk = vec![T::zero(); ks.len()];
    let mut dv = vec![T::zero(); vs.len()];
    let mut dp = Vec::new();
    let mut off = 0;
    for &(start, len) in segments {
        dp.resize(len, T::zero());
        for h in 0..heads {
            let c0 = h * dh;
            let seg = |r: usize| (start + r) * dim + c0..(start + r) * dim + c0 + dh;
            for i in 0..len {
                let p = &probs[off + i * len..off + (i + 1) * len];
                let gi = &g[seg(i)];
                let mut dot_pg = T::zero();
                for j in 0..len {
                    if p[j] == T::zero() {
                        dp[j] = T::zero();
                        continue;
                    }
                    let vj = &vs[seg(j)];
                    dp[j] = kernels::dot(gi, vj);
                    dot_pg += p[j] * dp[j];
                    for (d, &gv) in dv[seg(j)].iter_mut().zip(gi) {
                        *d += p[j] * gv;
                    }
                }
                for j in 0..len {
                    if p[j] == T::zero() {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - dot_pg) * inv;
                    let qr = seg(i);
                    let kr = seg(j);
                    for c in 0..dh {
                        dq[qr.start + c] += ds * ks[kr.start + c];
                        dk[kr.start + c] += ds * qs[qr.start + c];
                    }
                }
            }
            off += len * len;
        }
    }
    (dq, dk, dv)
}
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params_with(t: Tensor<f64>) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.push("w", t);
        p
    }

    #[test]
    fn sum_has_unit_gradient() {
        let p = params_with(Tensor::from_f64(vec![2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap());
        let mut g = Graph::new(&p);
        let w = g.param(0);
        let s = g.sum(w);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(0).data(), &[1.0; 6]);
    }

    #[test]
    fn half_squared_norm_gradient_is_weight() {
        let w0 = Tensor::from_f64(vec![4], &[1.5, -2.0, 0.25, 3.0]).unwrap();
        let p = params_with(w0.clone());
        let mut g = Graph::new(&p);
        let w = g.param(0);
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq);
        let l = g.scale(s, 0.5);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(0), &w0);
    }

    #[test]
    fn unused_parameters_get_zero_gradient() {
        let mut p = ParamSet::<f64>::new();
        p.push("a", Tensor::full(&[3], 2.0));
        p.push("b", Tensor::full(&[2, 2], 7.0));
        let mut g = Graph::new(&p);
        let a = g.param(0);
        let s = g.sum(a);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(1), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let p = params_with(Tensor::full(&[3], 1.0));
        let mut g = Graph::new(&p);
        let w = g.param(0);
        let y = g.scale(w, 2.0);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_do_not_need_gradient() {
        let p = params_with(Tensor::full(&[2], 1.0));
        let mut g = Graph::new(&p);
        let c = g.constant(Tensor::full(&[2], 3.0));
        let w = g.param(0);
        let y = g.mul(c, w).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(0).data(), &[3.0, 3.0]);
    }
}
