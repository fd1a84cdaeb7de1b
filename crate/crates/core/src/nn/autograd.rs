//! Reverse-mode automatic differentiation over a per-step tensor graph.
//!
//! A [`Graph`] records every operation of one forward pass together with the
//! intermediates its backward rule needs. [`Graph::backward`] walks the
//! recording in reverse and adds parameter gradients into the
//! [`ParamStore`]. Graphs are cheap and meant to be rebuilt for every
//! training example.

use std::collections::HashMap;

use crate::error::{contract, dim_err, Error, Result};
use crate::masks::AttentionMask;

use super::ops::{
    add_bias_in_place, attention_cached, bucket_sums, layer_norm_cached, log_softmax, relative_bucket, softmax_rows,
    RelativeTables, LAYER_NORM_EPS,
};
use super::tensor::{gemm_into, matmul, MatRef, Tensor};

/// Handle to a trainable tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors with a gradient buffer of identical shape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.names.push(name.into());
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Simultaneous mutable access to a value and its gradient.
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Tensor, &Tensor) {
        (&mut self.values[id.0], &self.grads[id.0])
    }
}

/// Node handle local to one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

struct RelVars {
    keys: Var,
    values: Var,
    window: usize,
}

enum Op {
    Param(ParamId),
    Constant,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Scale(Var, f64),
    Sum(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        bias: Var,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    SoftmaxRows(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        rel: Option<RelVars>,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: Vec<usize>,
        count: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.len() != xv.cols() {
            return dim_err(format!("bias of {} for width {}", bv.len(), xv.cols()));
        }
        let mut out = xv.clone();
        add_bias_in_place(&mut out, bv);
        Ok(self.push(out, Op::AddBias(x, b)))
    }

    /// `x·w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return dim_err(format!("{:?} * {:?}", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    /// Sum of all entries as a `1×1` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (out, cache) = layer_norm_cached(self.value(x), self.value(gain), self.value(bias), LAYER_NORM_EPS)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: cache.xhat,
                inv_std: cache.inv_std,
            },
        ))
    }

    /// Rows `ids` of `table`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = self.value(table).gather_rows(ids)?;
        Ok(self.push(
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        self.push(out, Op::SoftmaxRows(x))
    }

    /// Multi-head attention; see [`super::ops::multi_head_attention`].
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        rel: Option<(Var, Var, usize)>,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let tables = rel.map(|(rk, rv, window)| RelativeTables {
            keys: self.value(rk),
            values: self.value(rv),
            window,
        });
        let (out, cache) = attention_cached(self.value(q), self.value(k), self.value(v), heads, tables, mask)?;
        let rel = rel.map(|(keys, values, window)| RelVars { keys, values, window });
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                rel,
                probs: cache.probs,
            },
        ))
    }

    /// Mean token cross-entropy over rows whose target is not in `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if targets.len() != lv.rows() {
            return dim_err(format!("{} targets for {} rows", targets.len(), lv.rows()));
        }
        let mut total = 0.0;
        let mut count = 0;
        for (i, &t) in targets.iter().enumerate() {
            if ignore.contains(&t) {
                continue;
            }
            if t >= lv.cols() {
                return contract(format!("target {t} outside vocabulary of {}", lv.cols()));
            }
            total -= log_softmax(lv.row(i))[t];
            count += 1;
        }
        if count == 0 {
            return contract("cross entropy over an empty set of positions");
        }
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore: ignore.to_vec(),
                count,
            },
        ))
    }

    /// Back-propagates from the scalar `loss` and adds parameter gradients
    /// into `store`. A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.consumed {
            return Err(Error::State("backward already ran on this graph".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::State("backward before any forward computation".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::State("backward needs a scalar loss".into()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g, &mut grads, store)?;
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>], store: &mut ParamStore) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Param(id) => store.grads[id.0].add_assign(g)?,
            Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                gemm_into(
                    MatRef::of(g),
                    MatRef::of(bv).t(),
                    grad_slot(grads, *a, av).data_mut(),
                    true,
                )?;
                gemm_into(
                    MatRef::of(av).t(),
                    MatRef::of(g),
                    grad_slot(grads, *b, bv).data_mut(),
                    true,
                )?;
            }
            Op::AddBias(x, b) => {
                grad_slot(grads, *x, self.value(*x)).add_assign(g)?;
                let gb = grad_slot(grads, *b, self.value(*b));
                let c = g.cols();
                for row in g.data().chunks(c) {
                    for (o, &r) in gb.data_mut().iter_mut().zip(row) {
                        *o += r;
                    }
                }
            }
            Op::Add(a, b) => {
                grad_slot(grads, *a, self.value(*a)).add_assign(g)?;
                grad_slot(grads, *b, self.value(*b)).add_assign(g)?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                zip_acc(grad_slot(grads, *a, av), g, bv);
                zip_acc(grad_slot(grads, *b, bv), g, av);
            }
            Op::Relu(x) => {
                let gx = grad_slot(grads, *x, self.value(*x));
                for ((o, &gi), &y) in gx.data_mut().iter_mut().zip(g.data()).zip(node.value.data()) {
                    if y > 0.0 {
                        *o += gi;
                    }
                }
            }
            Op::Scale(x, c) => {
                let gx = grad_slot(grads, *x, self.value(*x));
                for (o, &gi) in gx.data_mut().iter_mut().zip(g.data()) {
                    *o += c * gi;
                }
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                let gx = grad_slot(grads, *x, self.value(*x));
                for o in gx.data_mut() {
                    *o += s;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = xhat.cols();
                let gv = self.value(*gain).clone();
                {
                    let gg = grad_slot(grads, *gain, &gv);
                    for (grow, hrow) in g.data().chunks(d).zip(xhat.data().chunks(d)) {
                        for ((o, &gi), &h) in gg.data_mut().iter_mut().zip(grow).zip(hrow) {
                            *o += gi * h;
                        }
                    }
                }
                {
                    let gb = grad_slot(grads, *bias, self.value(*bias));
                    for grow in g.data().chunks(d) {
                        for (o, &gi) in gb.data_mut().iter_mut().zip(grow) {
                            *o += gi;
                        }
                    }
                }
                let gx = grad_slot(grads, *x, self.value(*x));
                let nf = d as f64;
                for (r, ((grow, hrow), xrow)) in g
                    .data()
                    .chunks(d)
                    .zip(xhat.data().chunks(d))
                    .zip(gx.data_mut().chunks_mut(d))
                    .enumerate()
                {
                    let dh: Vec<f64> = grow.iter().zip(gv.data()).map(|(a, b)| a * b).collect();
                    let sum_dh: f64 = dh.iter().sum();
                    let sum_dh_h: f64 = dh.iter().zip(hrow).map(|(a, b)| a * b).sum();
                    let s = inv_std[r] / nf;
                    for ((o, &dhj), &hj) in xrow.iter_mut().zip(&dh).zip(hrow) {
                        *o += s * (nf * dhj - sum_dh - hj * sum_dh_h);
                    }
                }
            }
            Op::Embed { table, ids } => {
                let gt = grad_slot(grads, *table, self.value(*table));
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &gi) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += gi;
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let c = y.cols();
                let gx = grad_slot(grads, *x, self.value(*x));
                for ((o, yr), gr) in gx
                    .data_mut()
                    .chunks_mut(c)
                    .zip(y.data().chunks(c))
                    .zip(g.data().chunks(c))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((oj, &yj), &gj) in o.iter_mut().zip(yr).zip(gr) {
                        *oj += yj * (gj - dot);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                rel,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, rel.as_ref(), probs, g, grads)?,
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                count,
            } => {
                let lv = self.value(*logits);
                let scale = g.data()[0] / *count as f64;
                let gl = grad_slot(grads, *logits, lv);
                for (r, &t) in targets.iter().enumerate() {
                    if ignore.contains(&t) {
                        continue;
                    }
                    let lp = log_softmax(lv.row(r));
                    for (j, (o, l)) in gl.row_mut(r).iter_mut().zip(lp).enumerate() {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        *o += scale * (l.exp() - onehot);
                    }
                }
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
        heads: usize,
        rel: Option<&RelVars>,
        probs: &[f64],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, m, d) = (qv.rows(), kv.rows(), qv.cols());
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Tensor::zeros(&[n, d]);
        let mut dk = Tensor::zeros(&[m, d]);
        let mut dv = Tensor::zeros(&[m, d]);
        let nb = rel.map_or(0, |r| 2 * r.window + 1);
        let mut drk = Tensor::zeros(&[nb.max(1), dh]);
        let mut drv = Tensor::zeros(&[nb.max(1), dh]);

        let cols = |t: &Tensor, h: usize, rows: usize| -> Vec<f64> {
            let mut out = Vec::with_capacity(rows * dh);
            for r in 0..rows {
                out.extend_from_slice(&t.row(r)[h * dh..(h + 1) * dh]);
            }
            out
        };
        let mut dp = vec![0.0; n * m];
        let mut tmp_nd = vec![0.0; n * dh];
        let mut tmp_md = vec![0.0; m * dh];
        for h in 0..heads {
            let p = &probs[h * n * m..(h + 1) * n * m];
            let pm = MatRef::strided(p, n, m, m as isize, 1);
            let gh = cols(g, h, n);
            let qh = cols(qv, h, n);
            let kh = cols(kv, h, m);
            let vh = cols(vv, h, m);
            let ghm = MatRef::strided(&gh, n, dh, dh as isize, 1);
            let qhm = MatRef::strided(&qh, n, dh, dh as isize, 1);
            let khm = MatRef::strided(&kh, m, dh, dh as isize, 1);
            let vhm = MatRef::strided(&vh, m, dh, dh as isize, 1);

            // values
            gemm_into(pm.t(), ghm, &mut tmp_md, false)?;
            scatter_cols(&mut dv, h, dh, &tmp_md);
            gemm_into(ghm, vhm.t(), &mut dp, false)?;
            if let Some(r) = rel {
                let rv = self.value(r.values);
                let pb = bucket_sums(p, n, m, r.window);
                gemm_into(
                    MatRef::strided(&pb, n, nb, nb as isize, 1).t(),
                    ghm,
                    drv.data_mut(),
                    true,
                )?;
                let mut dpb = vec![0.0; n * nb];
                gemm_into(ghm, MatRef::of(rv).t(), &mut dpb, false)?;
                for i in 0..n {
                    for j in 0..m {
                        dp[i * m + j] += dpb[i * nb + relative_bucket(i, j, r.window)];
                    }
                }
            }
            // softmax, then the 1/sqrt(d) scaling
            for i in 0..n {
                let prow = &p[i * m..(i + 1) * m];
                let drow = &mut dp[i * m..(i + 1) * m];
                let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                for (dj, &pj) in drow.iter_mut().zip(prow) {
                    *dj = pj * (*dj - dot) * scale;
                }
            }
            let dsm = MatRef::strided(&dp, n, m, m as isize, 1);
            gemm_into(dsm, khm, &mut tmp_nd, false)?;
            if let Some(r) = rel {
                let rk = self.value(r.keys);
                let dsb = bucket_sums(&dp, n, m, r.window);
                let dsbm = MatRef::strided(&dsb, n, nb, nb as isize, 1);
                gemm_into(dsbm, MatRef::of(rk), &mut tmp_nd, true)?;
                gemm_into(dsbm.t(), qhm, drk.data_mut(), true)?;
            }
            scatter_cols(&mut dq, h, dh, &tmp_nd);
            gemm_into(dsm.t(), qhm, &mut tmp_md, false)?;
            scatter_cols(&mut dk, h, dh, &tmp_md);
        }
        grad_slot(grads, q, qv).add_assign(&dq)?;
        grad_slot(grads, k, kv).add_assign(&dk)?;
        grad_slot(grads, v, vv).add_assign(&dv)?;
        if let Some(r) = rel {
            grad_slot(grads, r.keys, self.value(r.keys)).add_assign(&drk)?;
            grad_slot(grads, r.values, self.value(r.values)).add_assign(&drv)?;
        }
        Ok(())
    }
}

fn grad_slot<'g>(grads: &'g mut [Option<Tensor>], v: Var, like: &Tensor) -> &'g mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(like.shape()))
}

fn zip_acc(out: &mut Tensor, g: &Tensor, other: &Tensor) {
    for ((o, &gi), &b) in out.data_mut().iter_mut().zip(g.data()).zip(other.data()) {
        *o += gi * b;
    }
}

fn scatter_cols(dst: &mut Tensor, head: usize, dh: usize, src: &[f64]) {
    for (r, chunk) in src.chunks(dh).enumerate() {
        dst.row_mut(r)[head * dh..(head + 1) * dh].copy_from_slice(chunk);
    }
}
