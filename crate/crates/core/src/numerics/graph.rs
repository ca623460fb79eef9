//! Tape-based reverse-mode differentiation over [`Tensor`]s.

use std::collections::HashMap;
use std::rc::Rc;

use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{shape_err, Error, Result};

const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Shape of a batched scaled dot-product attention call.
///
/// Queries are `batch * q_len` rows, keys and values `batch * kv_len` rows.
/// The optional mask is `q_len * kv_len`, shared by every batch entry and
/// head; `true` permits attention.
#[derive(Clone, Debug)]
pub struct AttnSpec {
    pub batch: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub heads: usize,
    pub mask: Option<Rc<Vec<bool>>>,
}

impl AttnSpec {
    pub fn full(batch: usize, q_len: usize, kv_len: usize, heads: usize) -> Self {
        Self {
            batch,
            q_len,
            kv_len,
            heads,
            mask: None,
        }
    }

    /// Lower-triangular mask where query `i` sees keys `0..=i + offset`.
    pub fn causal(batch: usize, q_len: usize, kv_len: usize, heads: usize) -> Self {
        let offset = kv_len - q_len;
        let mask = (0..q_len)
            .flat_map(|i| (0..kv_len).map(move |j| j <= i + offset))
            .collect();
        Self {
            batch,
            q_len,
            kv_len,
            heads,
            mask: Some(Rc::new(mask)),
        }
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Self {
        self.mask = Some(Rc::new(mask));
        self
    }

    fn allowed(&self, i: usize, j: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[i * self.kv_len + j])
    }
}

enum Op<R> {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, R),
    Offset(Var),
    ScalarMul(Var, Var),
    Tanh(Var),
    Softplus(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<R>,
        inv_std: Vec<R>,
    },
    Embedding {
        table: Var,
        idx: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttnSpec,
        probs: Vec<R>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<R>,
    },
    Sum(Var),
    Mean(Var),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Concat(Vec<Var>),
    Reshape(Var),
    GaussianKl {
        mu_q: Var,
        sigma_q: Var,
        mu_p: Var,
        sigma_p: Var,
    },
}

struct Node<R> {
    value: Option<Tensor<R>>,
    op: Op<R>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<R> {
    nodes: Vec<Option<Tensor<R>>>,
    params: Vec<(usize, Tensor<R>)>,
}

impl<R: Real> Grads<R> {
    pub fn of(&self, v: Var) -> Option<&Tensor<R>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    /// `(parameter index, gradient)` for every parameter reached by the loss.
    pub fn params(&self) -> &[(usize, Tensor<R>)] {
        &self.params
    }

    pub fn accumulate_into(&self, store: &mut ParamStore<R>) -> Result<()> {
        for (idx, g) in &self.params {
            store.accumulate(*idx, g)?;
        }
        Ok(())
    }
}

/// A differentiable computation recorded against a [`ParamStore`].
pub struct Graph<'p, R: Real> {
    store: &'p ParamStore<R>,
    nodes: Vec<Node<R>>,
    param_vars: HashMap<usize, Var>,
    frozen: Vec<String>,
}

fn dims2<R: Real>(t: &Tensor<R>) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<'p, R: Real> Graph<'p, R> {
    pub fn new(store: &'p ParamStore<R>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            frozen: Vec::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore<R> {
        self.store
    }

    /// Parameters whose names start with `prefix` are read as constants.
    pub fn freeze_prefix(&mut self, prefix: impl Into<String>) {
        self.frozen.push(prefix.into());
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(i)) => self.store.value(*i),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn scalar(&self, v: Var) -> R {
        self.value(v).data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<R>) -> Var {
        self.push(t, Op::Constant, &[])
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let idx = self
            .store
            .lookup(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))?;
        if let Some(v) = self.param_vars.get(&idx) {
            return Ok(*v);
        }
        let requires_grad = !self.frozen.iter().any(|p| name.starts_with(p.as_str()));
        self.nodes.push(Node {
            value: None,
            op: Op::Param(idx),
            requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(idx, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2(ta);
        let (k2, n) = dims2(tb);
        if k != k2 || tb.shape().len() != 2 {
            return shape_err("matmul", ta.shape(), tb.shape());
        }
        let mut out = vec![R::zero(); m * n];
        R::gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, R::zero());
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(R, R) -> R) -> Result<Tensor<R>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err(op, ta.shape(), tb.shape());
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    fn map(&self, a: Var, f: impl Fn(R) -> R) -> Tensor<R> {
        let ta = self.value(a);
        Tensor::new(ta.shape(), ta.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// `x[m, n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tx.cols();
        if tb.len() != n {
            return shape_err("add_row", tx.shape(), tb.shape());
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (a, &b) in row.iter_mut().zip(tb.data()) {
                *a = *a + b;
            }
        }
        let t = Tensor::new(tx.shape(), data)?;
        Ok(self.push(t, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: R) -> Var {
        let t = self.map(x, |v| v * c);
        self.push(t, Op::Scale(x, c), &[x])
    }

    pub fn offset(&mut self, x: Var, c: R) -> Var {
        let t = self.map(x, |v| v + c);
        self.push(t, Op::Offset(x), &[x])
    }

    /// `s * x` where `s` holds a single element.
    pub fn scalar_mul(&mut self, s: Var, x: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.len() != 1 {
            return shape_err("scalar_mul", ts.shape(), &[1]);
        }
        let c = ts.data()[0];
        let t = self.map(x, |v| v * c);
        Ok(self.push(t, Op::ScalarMul(s, x), &[s, x]))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v.tanh());
        self.push(t, Op::Tanh(x), &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let t = self.map(x, softplus);
        self.push(t, Op::Softplus(x), &[x])
    }

    /// Row-wise normalization followed by the affine map `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = dims2(tx);
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return shape_err("layer_norm", tx.shape(), self.value(gamma).shape());
        }
        let eps = R::lit(LN_EPS);
        let nf = R::lit(n as f64);
        let mut xhat = vec![R::zero(); m * n];
        let mut inv_std = vec![R::zero(); m];
        for r in 0..m {
            let row = tx.row(r);
            let mean = row.iter().fold(R::zero(), |a, &b| a + b) / nf;
            let var = row.iter().fold(R::zero(), |a, &b| a + (b - mean) * (b - mean)) / nf;
            let inv = (var + eps).sqrt().recip();
            inv_std[r] = inv;
            for c in 0..n {
                xhat[r * n + c] = (row[c] - mean) * inv;
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out = xhat
            .chunks(n)
            .flat_map(|row| row.iter().enumerate().map(|(c, &v)| v * g[c] + b[c]))
            .collect();
        let t = Tensor::new(tx.shape(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Row lookup `table[idx[i]]`.
    pub fn embedding(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = dims2(tt);
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(Error::Domain(format!("embedding index {bad} out of range {v}")));
        }
        let data = idx.iter().flat_map(|&i| tt.row(i).iter().copied()).collect();
        let t = Tensor::new(&[idx.len(), d], data)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                idx: idx.to_vec(),
            },
            &[table],
        ))
    }

    /// Batched multi-head scaled dot-product attention.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        if tq.rows() != spec.batch * spec.q_len
            || tk.rows() != spec.batch * spec.kv_len
            || tk.shape() != tv.shape()
            || tk.cols() != d
            || spec.heads == 0
            || d % spec.heads != 0
        {
            return shape_err("attention", tq.shape(), tk.shape());
        }
        if let Some(m) = &spec.mask {
            if m.len() != spec.q_len * spec.kv_len {
                return shape_err("attention mask", &[m.len()], &[spec.q_len, spec.kv_len]);
            }
        }
        let (b, lq, lk, h) = (spec.batch, spec.q_len, spec.kv_len, spec.heads);
        let dh = d / h;
        let scale = R::lit(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut probs = vec![R::zero(); b * h * lq * lk];
        let mut out = vec![R::zero(); b * lq * d];
        let mut scores = vec![R::zero(); lk];
        for bi in 0..b {
            for hi in 0..h {
                let off = hi * dh;
                for i in 0..lq {
                    let qrow = &qd[(bi * lq + i) * d + off..][..dh];
                    let mut max = R::neg_infinity();
                    for j in 0..lk {
                        if spec.allowed(i, j) {
                            let krow = &kd[(bi * lk + j) * d + off..][..dh];
                            let s = dot(qrow, krow) * scale;
                            scores[j] = s;
                            if s > max {
                                max = s;
                            }
                        }
                    }
                    if max == R::neg_infinity() {
                        continue;
                    }
                    let p = &mut probs[((bi * h + hi) * lq + i) * lk..][..lk];
                    let mut z = R::zero();
                    for j in 0..lk {
                        if spec.allowed(i, j) {
                            let e = (scores[j] - max).exp();
                            p[j] = e;
                            z = z + e;
                        }
                    }
                    let orow = &mut out[(bi * lq + i) * d + off..][..dh];
                    for j in 0..lk {
                        if p[j] != R::zero() {
                            p[j] = p[j] / z;
                            let vrow = &vd[(bi * lk + j) * d + off..][..dh];
                            for (o, &vv) in orow.iter_mut().zip(vrow) {
                                *o = *o + p[j] * vv;
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(&[b * lq, d], out)?;
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
            &[q, k, v],
        ))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let t = row_softmax(self.value(x));
        self.push(t, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let n = tx.cols();
        let data = tx
            .data()
            .chunks(n)
            .flat_map(|row| {
                let lse = log_sum_exp(row);
                row.iter().map(move |&v| v - lse)
            })
            .collect();
        let t = Tensor::new(tx.shape(), data).expect("same shape");
        self.push(t, Op::LogSoftmax(x), &[x])
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (m, n) = dims2(tl);
        if targets.len() != m {
            return shape_err("cross_entropy", tl.shape(), &[targets.len()]);
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Domain(format!("class index {bad} out of range {n}")));
        }
        let probs = row_softmax(tl).into_data();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = tl.row(r);
            loss += (log_sum_exp(row) - row[t]).as_f64();
        }
        let t = Tensor::scalar(R::lit(loss / m.max(1) as f64));
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(R::zero(), |a, &b| a + b);
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let s = tx.data().iter().fold(R::zero(), |a, &b| a + b) / R::lit(tx.len().max(1) as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Output row `i` is input row `idx[i]`; rows may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = dims2(tx);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Domain(format!("row index {bad} out of range {m}")));
        }
        let data = idx.iter().flat_map(|&i| tx.row(i).iter().copied()).collect();
        let t = Tensor::new(&[idx.len(), n], data)?;
        Ok(self.push(
            t,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != n {
                return shape_err("concat_rows", self.value(parts[0]).shape(), t.shape());
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let t = Tensor::new(&[rows, n], data)?;
        Ok(self.push(t, Op::Concat(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Diagonal Gaussian KL(q || p): summed over the last dimension and
    /// averaged over rows.
    pub fn gaussian_kl(&mut self, mu_q: Var, sigma_q: Var, mu_p: Var, sigma_p: Var) -> Result<Var> {
        let kl = super::gaussian::gaussian_kl(
            self.value(mu_q),
            self.value(sigma_q),
            self.value(mu_p),
            self.value(sigma_p),
        )?;
        Ok(self.push(
            Tensor::scalar(kl),
            Op::GaussianKl {
                mu_q,
                sigma_q,
                mu_p,
                sigma_p,
            },
            &[mu_q, sigma_q, mu_p, sigma_p],
        ))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<R>> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return shape_err("backward", lt.shape(), &[1]);
        }
        let mut grads: Vec<Option<Tensor<R>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), R::one()));
        let mut params = Vec::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Param(idx) = node.op {
                params.push((idx, g.clone()));
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        params.sort_by_key(|(i, _)| *i);
        Ok(Grads {
            nodes: grads,
            params,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn acc(&self, grads: &mut [Option<Tensor<R>>], v: Var, g: Tensor<R>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<R>) -> Tensor<R> {
        Tensor::new(self.value(v).shape(), data).expect("gradient shape")
    }

    fn backprop_node(&self, i: usize, g: &Tensor<R>, grads: &mut [Option<Tensor<R>>]) -> Result<()> {
        let out = self.nodes[i].value.as_ref().expect("op node has value");
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = dims2(ta);
                let n = tb.cols();
                if self.wants(*a) {
                    let mut ga = vec![R::zero(); m * k];
                    R::gemm(m, n, k, gd, false, tb.data(), true, &mut ga, R::zero());
                    self.acc(grads, *a, self.like(*a, ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![R::zero(); k * n];
                    R::gemm(k, m, n, ta.data(), true, gd, false, &mut gb, R::zero());
                    self.acc(grads, *b, self.like(*b, gb));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::AddRow(x, bias) => {
                self.acc(grads, *x, g.clone());
                if self.wants(*bias) {
                    let n = g.cols();
                    let mut gb = vec![R::zero(); n];
                    for row in gd.chunks(n) {
                        for (a, &b) in gb.iter_mut().zip(row) {
                            *a = *a + b;
                        }
                    }
                    self.acc(grads, *bias, self.like(*bias, gb));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = gd.iter().zip(tb.data()).map(|(&g, &y)| g * y).collect();
                    self.acc(grads, *a, self.like(*a, d));
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(ta.data()).map(|(&g, &x)| g * x).collect();
                    self.acc(grads, *b, self.like(*b, d));
                }
            }
            Op::Scale(x, c) => {
                let d = gd.iter().map(|&g| g * *c).collect();
                self.acc(grads, *x, self.like(*x, d));
            }
            Op::Offset(x) => self.acc(grads, *x, g.clone()),
            Op::ScalarMul(s, x) => {
                let tx = self.value(*x);
                let c = self.value(*s).data()[0];
                if self.wants(*s) {
                    let gs = gd.iter().zip(tx.data()).fold(R::zero(), |a, (&g, &v)| a + g * v);
                    self.acc(grads, *s, self.like(*s, vec![gs]));
                }
                if self.wants(*x) {
                    let d = gd.iter().map(|&g| g * c).collect();
                    self.acc(grads, *x, self.like(*x, d));
                }
            }
            Op::Tanh(x) => {
                let d = gd
                    .iter()
                    .zip(out.data())
                    .map(|(&g, &y)| g * (R::one() - y * y))
                    .collect();
                self.acc(grads, *x, self.like(*x, d));
            }
            Op::Softplus(x) => {
                let d = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &v)| g * sigmoid(v))
                    .collect();
                self.acc(grads, *x, self.like(*x, d));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = g.cols();
                let m = g.rows();
                let gam = self.value(*gamma).data();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut gg = vec![R::zero(); n];
                    let mut gb = vec![R::zero(); n];
                    for r in 0..m {
                        for c in 0..n {
                            let gv = gd[r * n + c];
                            gg[c] = gg[c] + gv * xhat[r * n + c];
                            gb[c] = gb[c] + gv;
                        }
                    }
                    self.acc(grads, *gamma, self.like(*gamma, gg));
                    self.acc(grads, *beta, self.like(*beta, gb));
                }
                if self.wants(*x) {
                    let nf = R::lit(n as f64);
                    let mut gx = vec![R::zero(); m * n];
                    for r in 0..m {
                        let mut s1 = R::zero();
                        let mut s2 = R::zero();
                        for c in 0..n {
                            let gh = gd[r * n + c] * gam[c];
                            s1 = s1 + gh;
                            s2 = s2 + gh * xhat[r * n + c];
                        }
                        for c in 0..n {
                            let gh = gd[r * n + c] * gam[c];
                            gx[r * n + c] =
                                inv_std[r] / nf * (nf * gh - s1 - xhat[r * n + c] * s2);
                        }
                    }
                    self.acc(grads, *x, self.like(*x, gx));
                }
            }
            Op::Embedding { table, idx } => {
                if self.wants(*table) {
                    let tt = self.value(*table);
                    let d = tt.cols();
                    let mut gt = vec![R::zero(); tt.len()];
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..d {
                            gt[i * d + c] = gt[i * d + c] + gd[r * d + c];
                        }
                    }
                    self.acc(grads, *table, self.like(*table, gt));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => self.attention_backward(*q, *k, *v, spec, probs, gd, grads),
            Op::Softmax(x) => {
                let n = g.cols();
                let mut gx = vec![R::zero(); gd.len()];
                for ((grow, yrow), xrow) in gd.chunks(n).zip(out.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let s = dot(grow, yrow);
                    for c in 0..n {
                        xrow[c] = yrow[c] * (grow[c] - s);
                    }
                }
                self.acc(grads, *x, self.like(*x, gx));
            }
            Op::LogSoftmax(x) => {
                let n = g.cols();
                let mut gx = vec![R::zero(); gd.len()];
                for ((grow, yrow), xrow) in gd.chunks(n).zip(out.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let s = grow.iter().fold(R::zero(), |a, &b| a + b);
                    for c in 0..n {
                        xrow[c] = grow[c] - yrow[c].exp() * s;
                    }
                }
                self.acc(grads, *x, self.like(*x, gx));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = self.value(*logits).cols();
                let m = targets.len();
                let scale = gd[0] / R::lit(m.max(1) as f64);
                let mut gl: Vec<R> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * n + t] = gl[r * n + t] - scale;
                }
                self.acc(grads, *logits, self.like(*logits, gl));
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.acc(grads, *x, self.like(*x, vec![gd[0]; n]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let v = gd[0] / R::lit(n.max(1) as f64);
                self.acc(grads, *x, self.like(*x, vec![v; n]));
            }
            Op::Gather { x, idx } => {
                if self.wants(*x) {
                    let tx = self.value(*x);
                    let n = tx.cols();
                    let mut gx = vec![R::zero(); tx.len()];
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..n {
                            gx[i * n + c] = gx[i * n + c] + gd[r * n + c];
                        }
                    }
                    self.acc(grads, *x, self.like(*x, gx));
                }
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.wants(p) {
                        self.acc(grads, p, self.like(p, gd[start..start + len].to_vec()));
                    }
                    start += len;
                }
            }
            Op::Reshape(x) => self.acc(grads, *x, self.like(*x, gd.to_vec())),
            Op::GaussianKl {
                mu_q,
                sigma_q,
                mu_p,
                sigma_p,
            } => {
                let (mq, sq, mp, sp) = (
                    self.value(*mu_q).data(),
                    self.value(*sigma_q).data(),
                    self.value(*mu_p).data(),
                    self.value(*sigma_p).data(),
                );
                let rows = self.value(*mu_q).rows();
                let w = gd[0] / R::lit(rows.max(1) as f64);
                let n = mq.len();
                let (mut gmq, mut gsq, mut gmp, mut gsp) =
                    (vec![R::zero(); n], vec![R::zero(); n], vec![R::zero(); n], vec![R::zero(); n]);
                for i in 0..n {
                    let diff = mq[i] - mp[i];
                    let sp2 = sp[i] * sp[i];
                    gmq[i] = w * diff / sp2;
                    gmp[i] = -w * diff / sp2;
                    gsq[i] = w * (sq[i] / sp2 - sq[i].recip());
                    gsp[i] = w * (sp[i].recip() - (sq[i] * sq[i] + diff * diff) / (sp2 * sp[i]));
                }
                self.acc(grads, *mu_q, self.like(*mu_q, gmq));
                self.acc(grads, *sigma_q, self.like(*sigma_q, gsq));
                self.acc(grads, *mu_p, self.like(*mu_p, gmp));
                self.acc(grads, *sigma_p, self.like(*sigma_p, gsp));
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttnSpec,
        probs: &[R],
        gd: &[R],
        grads: &mut [Option<Tensor<R>>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        let (b, lq, lk, h) = (spec.batch, spec.q_len, spec.kv_len, spec.heads);
        let dh = d / h;
        let scale = R::lit(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut gq = vec![R::zero(); qd.len()];
        let mut gk = vec![R::zero(); kd.len()];
        let mut gv = vec![R::zero(); vd.len()];
        let mut dp = vec![R::zero(); lk];
        for bi in 0..b {
            for hi in 0..h {
                let off = hi * dh;
                for i in 0..lq {
                    let p = &probs[((bi * h + hi) * lq + i) * lk..][..lk];
                    let go = &gd[(bi * lq + i) * d + off..][..dh];
                    let mut s = R::zero();
                    for j in 0..lk {
                        if p[j] == R::zero() {
                            dp[j] = R::zero();
                            continue;
                        }
                        let vrow = &vd[(bi * lk + j) * d + off..][..dh];
                        dp[j] = dot(go, vrow);
                        s = s + p[j] * dp[j];
                        let gvrow = &mut gv[(bi * lk + j) * d + off..][..dh];
                        for (a, &gg) in gvrow.iter_mut().zip(go) {
                            *a = *a + p[j] * gg;
                        }
                    }
                    let qrow = &qd[(bi * lq + i) * d + off..][..dh];
                    for j in 0..lk {
                        if p[j] == R::zero() {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - s) * scale;
                        let krow = &kd[(bi * lk + j) * d + off..][..dh];
                        let gqrow = &mut gq[(bi * lq + i) * d + off..][..dh];
                        for (a, &kk) in gqrow.iter_mut().zip(krow) {
                            *a = *a + ds * kk;
                        }
                        let gkrow = &mut gk[(bi * lk + j) * d + off..][..dh];
                        for (a, &qq) in gkrow.iter_mut().zip(qrow) {
                            *a = *a + ds * qq;
                        }
                    }
                }
            }
        }
        self.acc(grads, q, self.like(q, gq));
        self.acc(grads, k, self.like(k, gk));
        self.acc(grads, v, self.like(v, gv));
    }
}

fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    a.iter().zip(b).fold(R::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn softplus<R: Real>(x: R) -> R {
    x.max(R::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        (R::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

pub(crate) fn log_sum_exp<R: Real>(row: &[R]) -> R {
    let max = row.iter().fold(R::neg_infinity(), |a, &b| a.max(b));
    if !max.is_finite() {
        return max;
    }
    max + row.iter().fold(R::zero(), |a, &b| a + (b - max).exp()).ln()
}

/// Row-wise softmax over the trailing dimensions.
pub fn row_softmax<R: Real>(t: &Tensor<R>) -> Tensor<R> {
    let n = t.cols();
    let data = t
        .data()
        .chunks(n)
        .flat_map(|row| {
            let max = row.iter().fold(R::neg_infinity(), |a, &b| a.max(b));
            let e: Vec<R> = row.iter().map(|&v| (v - max).exp()).collect();
            let z = e.iter().fold(R::zero(), |a, &b| a + b);
            e.into_iter().map(move |v| v / z)
        })
        .collect();
    Tensor::new(t.shape(), data).expect("same shape")
}
