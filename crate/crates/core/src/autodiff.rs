//! Tape-based reverse-mode differentiation over a closed set of tensor ops.
//!
//! A [`Graph`] records every op applied during one forward pass. Parameters
//! enter as leaves (one leaf per parameter per graph); constants enter as
//! leaves without a gradient path. [`Graph::backward`] walks the tape in
//! reverse and [`Gradients::accumulate_into`] adds leaf gradients onto the
//! parameter store, so gradients accumulate until the caller zeroes them.

use std::collections::HashMap;
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::rc::Rc;

use statrs::function::erf::erf;

use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{kernels, Tensor};

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Boolean attention mask over `[rows, cols]`; `true` means attend.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(shape_err!("mask of {} entries cannot cover [{rows},{cols}]", allowed.len()));
        }
        Ok(Self { rows, cols, allowed })
    }

    pub fn causal(t: usize) -> Self {
        let allowed = (0..t * t).map(|i| i % t <= i / t).collect();
        Self { rows: t, cols: t, allowed }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allowed = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Self { rows, cols, allowed }
    }

    pub fn allows(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }

    fn row(&self, r: usize) -> &[bool] {
        &self.allowed[r * self.cols..(r + 1) * self.cols]
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Tanh(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Reshape(Var),
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// One recorded forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    leaf_params: Vec<(Var, ParamId)>,
    inference: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), leaf_params: Vec::new(), inference: false }
    }

    /// A graph in which nothing requires a gradient, whatever the store says.
    pub fn inference() -> Self {
        Self { inference: true, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf for a stored parameter; repeated calls return the same leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let needs = p.requires_grad && !self.inference;
        let v = self.push(p.value.clone(), Op::Leaf, needs);
        self.params.insert(id, v);
        self.leaf_params.push((v, id));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip(a, b, |p, q| p + q);
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip(a, b, |p, q| p * q);
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    fn row_broadcast(&self, x: Var, row: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (xv, rv) = (self.value(x), self.value(row));
        let c = xv.last_dim();
        if rv.len() != c {
            return Err(shape_err!("{what}: row of {} cannot broadcast over {:?}", rv.len(), xv.shape()));
        }
        let r = rv.data();
        let data = xv.data().iter().enumerate().map(|(i, &v)| f(v, r[i % c])).collect();
        Ok(Tensor::new(xv.shape().to_vec(), data).expect("shape preserved"))
    }

    /// `x + row`, broadcasting `row` over the leading axes of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(x, row, "add_row", |p, q| p + q)?;
        let ng = self.any_grad(&[x, row]);
        Ok(self.push(out, Op::AddRow(x, row), ng))
    }

    /// `x * row` channel-wise, broadcasting over the leading axes of `x`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(x, row, "mul_row", |p, q| p * q)?;
        let ng = self.any_grad(&[x, row]);
        Ok(self.push(out, Op::MulRow(x, row), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let ng = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, s), ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        self.softmax_impl(x, None).expect("unmasked softmax cannot fail")
    }

    /// Softmax over the last axis restricted to allowed entries. Masked
    /// entries are exactly 0; a row with nothing allowed is all zeros.
    pub fn masked_softmax(&mut self, x: Var, mask: &Rc<AttnMask>) -> Result<Var> {
        self.softmax_impl(x, Some(mask))
    }

    fn softmax_impl(&mut self, x: Var, mask: Option<&Rc<AttnMask>>) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        let rows = xv.rows();
        if let Some(m) = mask {
            if m.rows != rows || m.cols != c {
                return Err(shape_err!(
                    "mask [{},{}] does not match scores {:?}",
                    m.rows,
                    m.cols,
                    xv.shape()
                ));
            }
        }
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let allowed = mask.map(|m| m.row(r));
            let ok = |j: usize| allowed.map_or(true, |a| a[j]);
            let max = (0..c).filter(|&j| ok(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let o = &mut out[r * c..(r + 1) * c];
            let mut sum = 0.0;
            for j in 0..c {
                if ok(j) {
                    o[j] = (row[j] - max).exp();
                    sum += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= sum;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(t, Op::Softmax(x), ng))
    }

    /// Layer normalization over the last axis with eps = 1e-5.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(shape_err!("layernorm affine width differs from {d}"));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYERNORM_EPS).sqrt();
            rstd[r] = rs;
            for (h, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *h = (v - mean) * rs;
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let out: Vec<f64> = xhat.iter().enumerate().map(|(i, h)| h * g[i % d] + b[i % d]).collect();
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.any_grad(&[x, gain, bias]);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd }, ng))
    }

    /// GELU with the exact Gaussian CDF.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * normal_cdf(v));
        let ng = self.any_grad(&[x]);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let ng = self.any_grad(&[x]);
        self.push(out, Op::Tanh(x), ng)
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, d) = tv.dims2()?;
        if ids.is_empty() {
            return Err(shape_err!("embedding lookup of zero ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index(format!("token id {id} outside vocabulary of {vocab}")));
            }
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let ng = self.any_grad(&[table]);
        Ok(self.push(t, Op::Embedding { table, ids: ids.to_vec() }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose2()?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(t, Op::Transpose(x), ng))
    }

    /// Columns `start..start+width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if width == 0 || start + width > c {
            return Err(shape_err!("column slice {start}+{width} outside {c} columns"));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&xv.row(i)[start..start + width]);
        }
        let t = Tensor::new(vec![r, width], out)?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(t, Op::SliceCols { x, start }, ng))
    }

    /// Rows `start..start+count` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if count == 0 || start + count > r {
            return Err(shape_err!("row slice {start}+{count} outside {r} rows"));
        }
        let data = self.value(x).data()[start * c..(start + count) * c].to_vec();
        let t = Tensor::new(vec![count, c], data)?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(t, Op::SliceRows { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let (r, _) = self.value(first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return Err(shape_err!("concat_cols row counts differ: {pr} vs {r}"));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::new(vec![r, total], out)?;
        let ng = self.any_grad(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let (_, c) = self.value(first).dims2()?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pc != c {
                return Err(shape_err!("concat_rows column counts differ: {pc} vs {c}"));
            }
            rows += pr;
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![rows, c], out)?;
        let ng = self.any_grad(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Mean next-token cross-entropy over rows of `[t, vocab]` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.weighted_cross_entropy(logits, targets, &vec![1.0; targets.len()])
    }

    /// Cross-entropy where row `i` carries weight `weights[i]`; the result is
    /// the weighted mean. Rows of weight 0 do not contribute.
    pub fn weighted_cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        let (t, vocab) = lv.dims2()?;
        if targets.len() != t || weights.len() != t {
            return Err(shape_err!("{} targets / {} weights for {t} rows", targets.len(), weights.len()));
        }
        if let Some(&bad) = targets.iter().find(|&&id| id >= vocab) {
            return Err(Error::Index(format!("target id {bad} outside vocabulary of {vocab}")));
        }
        let total_w: f64 = weights.iter().sum();
        if total_w <= 0.0 {
            return Err(Error::Argument("cross-entropy with no weighted positions".into()));
        }
        let mut probs = vec![0.0; t * vocab];
        let mut loss = 0.0;
        for r in 0..t {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            let mut sum = 0.0;
            for (pv, &x) in p.iter_mut().zip(row) {
                *pv = (x - max).exp();
                sum += *pv;
            }
            for pv in p.iter_mut() {
                *pv /= sum;
            }
            if weights[r] != 0.0 {
                let log_p = row[targets[r]] - max - sum.ln();
                loss -= weights[r] * log_p;
            }
        }
        let value = Tensor::scalar(loss / total_w);
        let ng = self.any_grad(&[logits]);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs };
        Ok(self.push(value, op, ng))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        lv.check_finite("loss")?;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || grads[i].is_none() {
                continue;
            }
            let g = grads[i].take().expect("checked above");
            self.backprop(node, &g, &mut grads);
        }
        let mut leaves = Vec::with_capacity(self.leaf_params.len());
        for &(v, id) in &self.leaf_params {
            if let Some(g) = grads[v.0].take() {
                let t = Tensor::new(self.value(v).shape().to_vec(), g)?;
                t.check_finite(&format!("gradient of parameter #{}", id.0))?;
                leaves.push((id, t));
            }
        }
        Ok(Gradients { leaves })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("matrix");
                let n = self.value(*b).last_dim();
                if wants(*a) {
                    kernels::matmul_nt_acc(g, val(*b), slot(grads, *a, m * k), m, k, n);
                }
                if wants(*b) {
                    kernels::matmul_tn_acc(val(*a), g, slot(grads, *b, k * n), m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        axpy(slot(grads, v, g.len()), g, 1.0);
                    }
                }
            }
            Op::AddRow(x, row) => {
                if wants(*x) {
                    axpy(slot(grads, *x, g.len()), g, 1.0);
                }
                if wants(*row) {
                    let c = val(*row).len();
                    let dr = slot(grads, *row, c);
                    for chunk in g.chunks(c) {
                        axpy(dr, chunk, 1.0);
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = val(*b);
                    for ((d, &gi), &bi) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                }
                if wants(*b) {
                    let av = val(*a);
                    for ((d, &gi), &ai) in slot(grads, *b, g.len()).iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                }
            }
            Op::MulRow(x, row) => {
                let rv = val(*row);
                let c = rv.len();
                if wants(*x) {
                    let dx = slot(grads, *x, g.len());
                    for (i, (d, &gi)) in dx.iter_mut().zip(g).enumerate() {
                        *d += gi * rv[i % c];
                    }
                }
                if wants(*row) {
                    let xv = val(*x);
                    let dr = slot(grads, *row, c);
                    for (i, (&gi, &xi)) in g.iter().zip(xv).enumerate() {
                        dr[i % c] += gi * xi;
                    }
                }
            }
            Op::Scale(x, s) => {
                if wants(*x) {
                    axpy(slot(grads, *x, g.len()), g, *s);
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.last_dim();
                let dx = slot(grads, *x, g.len());
                for ((yr, gr), dr) in y.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                    let s = kernels::dot(yr, gr);
                    for ((d, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *d += yi * (gi - s);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = node.value.last_dim();
                let gv = val(*gain);
                if wants(*gain) {
                    let dg = slot(grads, *gain, d);
                    for (i, (&gi, &h)) in g.iter().zip(xhat).enumerate() {
                        dg[i % d] += gi * h;
                    }
                }
                if wants(*bias) {
                    let db = slot(grads, *bias, d);
                    for chunk in g.chunks(d) {
                        axpy(db, chunk, 1.0);
                    }
                }
                if wants(*x) {
                    let dx = slot(grads, *x, g.len());
                    let mut dxhat = vec![0.0; d];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dh = kernels::dot(&dxhat, hr) / d as f64;
                        for j in 0..d {
                            dx[r * d + j] += rs * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                for ((d, &gi), &xi) in slot(grads, *x, g.len()).iter_mut().zip(g).zip(xv) {
                    *d += gi * (normal_cdf(xi) + xi * normal_pdf(xi));
                }
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                for ((d, &gi), &yi) in slot(grads, *x, g.len()).iter_mut().zip(g).zip(y) {
                    *d += gi * (1.0 - yi * yi);
                }
            }
            Op::Embedding { table, ids } => {
                let (vocab, d) = self.value(*table).dims2().expect("matrix");
                let dt = slot(grads, *table, vocab * d);
                for (r, &id) in ids.iter().enumerate() {
                    axpy(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d], 1.0);
                }
            }
            Op::Reshape(x) => {
                axpy(slot(grads, *x, g.len()), g, 1.0);
            }
            Op::Transpose(x) => {
                let (r, c) = node.value.dims2().expect("matrix");
                let dx = slot(grads, *x, g.len());
                // node is [r, c]; input is [c, r]
                for i in 0..r {
                    for j in 0..c {
                        dx[j * r + i] += g[i * c + j];
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (r, w) = node.value.dims2().expect("matrix");
                let c = self.value(*x).last_dim();
                let dx = slot(grads, *x, r * c);
                for i in 0..r {
                    axpy(&mut dx[i * c + start..i * c + start + w], &g[i * w..(i + 1) * w], 1.0);
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.value.last_dim();
                let total = self.value(*x).len();
                let dx = slot(grads, *x, total);
                axpy(&mut dx[start * c..start * c + g.len()], g, 1.0);
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.value.dims2().expect("matrix");
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if wants(p) {
                        let dp = slot(grads, p, r * w);
                        for i in 0..r {
                            axpy(&mut dp[i * w..(i + 1) * w], &g[i * total + offset..i * total + offset + w], 1.0);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if wants(p) {
                        axpy(slot(grads, p, n), &g[offset..offset + n], 1.0);
                    }
                    offset += n;
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                for d in slot(grads, *x, n).iter_mut() {
                    *d += g[0];
                }
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let vocab = self.value(*logits).last_dim();
                let total_w: f64 = weights.iter().sum();
                let dl = slot(grads, *logits, probs.len());
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let coef = g[0] * w / total_w;
                    let row = &mut dl[r * vocab..(r + 1) * vocab];
                    axpy(row, &probs[r * vocab..(r + 1) * vocab], coef);
                    row[t] -= coef;
                }
            }
        }
    }
}

/// Leaf gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.leaves.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }

    /// Adds `scale * grad` onto each parameter's gradient slot.
    pub fn accumulate_into(&self, store: &mut ParamStore, scale: f64) {
        for (id, g) in &self.leaves {
            let p = store.get_mut(*id);
            axpy(p.grad.data_mut(), g.data(), scale);
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x * FRAC_1_SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}
