//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation as it is evaluated. Parameters are
//! bound lazily from a [`ParamStore`]; binding the same [`ParamId`] twice
//! yields the same node, so shared weights accumulate one gradient.

use std::collections::HashMap;

use super::ops::{self, gelu, gelu_grad};
use super::param::{ParamId, ParamStore};
use super::tensor::{matmul, matmul_at, matmul_bt, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Map { x: Var, deriv: Vec<f64> },
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    GatherRows { table: Var, ids: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    CrossEntropy {
        logits: Var,
        labels: Vec<Option<usize>>,
        probs: Tensor,
        count: usize,
    },
    SoftCrossEntropy {
        logits: Var,
        target: Tensor,
        temperature: f64,
        probs: Tensor,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    non_finite: Option<&'static str>,
}

/// Gradients of a scalar with respect to every node that needed one.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Var {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(name);
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Errors if any recorded value contains NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some(op) => Err(Error::NonFinite(op.to_string())),
            None => Ok(()),
        }
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// Differentiable leaf not tied to a parameter store.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true, "variable")
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true, "param");
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.rows(), "matmul {:?} x {:?}", av.shape(), bv.shape());
        let out = matmul(av, bv);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul(a, b), ng, "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "matmul_bt {:?} x {:?}ᵀ", av.shape(), bv.shape());
        let out = matmul_bt(av, bv);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMulBt(a, b), ng, "matmul_bt")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add shape mismatch");
        out.add_in_place(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng, "add")
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let mut out = self.value(a).clone();
        let bias = self.value(row);
        assert_eq!(bias.numel(), out.cols(), "add_row width mismatch");
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bias.data()) {
                *o += b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(out, Op::AddRow(a, row), ng, "add_row")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), ng, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_in_place(c);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, c), ng, "scale")
    }

    /// Elementwise `f` with caller-supplied derivative `df`.
    pub fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let deriv = xv.data().iter().map(|&v| df(v)).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let ng = self.needs(x);
        self.push(out, Op::Map { x, deriv }, ng, "map")
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, gelu, gelu_grad)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, |v| 1.0 - v.tanh().powi(2))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = ops::softmax_rows(self.value(x));
        let ng = self.needs(x);
        self.push(out, Op::SoftmaxRows(x), ng, "softmax")
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (xhat, inv_std) = ops::normalize_rows(self.value(x), eps);
        let mut out = xhat.clone();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        assert_eq!(g.len(), out.cols(), "layer_norm gain width");
        for r in 0..out.rows() {
            for ((o, gv), bv) in out.row_mut(r).iter_mut().zip(g).zip(b) {
                *o = *o * gv + bv;
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        self.push(out, op, ng, "layer_norm")
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let cols = tv.cols();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            assert!(id < tv.rows(), "gather id {id} out of {} rows", tv.rows());
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::from_parts(vec![ids.len(), cols], data);
        let ng = self.needs(table);
        let op = Op::GatherRows {
            table,
            ids: ids.to_vec(),
        };
        self.push(out, op, ng, "gather_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols(), "slice_cols out of range");
        let mut data = Vec::with_capacity(xv.rows() * len);
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let out = Tensor::from_parts(vec![xv.rows(), len], data);
        let ng = self.needs(x);
        self.push(out, Op::SliceCols { x, start }, ng, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
                data.extend_from_slice(pv.row(r));
            }
        }
        let out = Tensor::from_parts(vec![rows, total], data);
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let out = Tensor::from_parts(vec![rows, cols], data);
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng, "concat_rows")
    }

    /// Mean cross-entropy over rows with a label.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        let loss = ops::cross_entropy(lv, labels)?;
        let probs = ops::softmax_rows(lv);
        let count = labels.iter().filter(|l| l.is_some()).count();
        let ng = self.needs(logits);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
            count,
        };
        Ok(self.push(Tensor::scalar(loss), op, ng, "cross_entropy"))
    }

    /// Mean over rows of `−Σ tᵢ log softmax(z/T)ᵢ`, scaled by `T²`.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: &Tensor, temperature: f64) -> Result<Var> {
        let lv = self.value(logits);
        let loss = super::soft_cross_entropy_value(target, lv, temperature)?;
        let mut scaled = lv.clone();
        scaled.scale_in_place(1.0 / temperature);
        let probs = ops::softmax_rows(&scaled);
        let ng = self.needs(logits);
        let op = Op::SoftCrossEntropy {
            logits,
            target: target.clone(),
            temperature,
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, ng, "soft_cross_entropy"))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng, "sum")
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        self.check_finite()?;
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    /// Runs [`Graph::backward`] and adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        for (&pid, &var) in &self.params {
            if let Some(g) = grads.of(var) {
                store.get_mut(pid).grad.add_in_place(g);
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_in_place(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, matmul_bt(g, self.value(*b)));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, matmul_at(self.value(*a), g));
                }
            }
            Op::MatMulBt(a, b) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                if self.needs(*a) {
                    self.accumulate(grads, *a, matmul(g, self.value(*b)));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, matmul_at(g, self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*row) {
                    let mut gb = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        gb.iter_mut().zip(g.row(r)).for_each(|(s, v)| *s += v);
                    }
                    let shape = self.value(*row).shape().to_vec();
                    self.accumulate(grads, *row, Tensor::from_parts(shape, gb));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
                }
                if self.needs(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::from_parts(g.shape().to_vec(), d));
                }
            }
            Op::Scale(a, c) => {
                let mut d = g.clone();
                d.scale_in_place(*c);
                self.accumulate(grads, *a, d);
            }
            Op::Map { x, deriv } => {
                let d = g.data().iter().zip(deriv).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::SoftmaxRows(x) => {
                let y = &self.nodes[i].value;
                let mut d = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                let cols = xhat.cols();
                if self.needs(*gain) || self.needs(*bias) {
                    let mut dg = vec![0.0; cols];
                    let mut db = vec![0.0; cols];
                    for r in 0..g.rows() {
                        for ((k, &gr), &xh) in g.row(r).iter().enumerate().zip(xhat.row(r)) {
                            dg[k] += gr * xh;
                            db[k] += gr;
                        }
                    }
                    let gshape = self.value(*gain).shape().to_vec();
                    let bshape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *gain, Tensor::from_parts(gshape, dg));
                    self.accumulate(grads, *bias, Tensor::from_parts(bshape, db));
                }
                if self.needs(*x) {
                    let n = cols as f64;
                    let mut dx = Tensor::zeros(g.shape());
                    for r in 0..g.rows() {
                        let dxhat: Vec<f64> = g.row(r).iter().zip(gv).map(|(a, b)| a * b).collect();
                        let xr = xhat.row(r);
                        let mean_d = dxhat.iter().sum::<f64>() / n;
                        let mean_dx: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((o, &d), &xh) in dx.row_mut(r).iter_mut().zip(&dxhat).zip(xr) {
                            *o = inv_std[r] * (d - mean_d - xh * mean_dx);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::GatherRows { table, ids } => {
                let mut d = Tensor::zeros(self.value(*table).shape());
                for (r, &id) in ids.iter().enumerate() {
                    d.row_mut(id).iter_mut().zip(g.row(r)).for_each(|(o, v)| *o += v);
                }
                self.accumulate(grads, *table, d);
            }
            Op::SliceCols { x, start } => {
                let mut d = Tensor::zeros(self.value(*x).shape());
                let len = g.cols();
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..start + len].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let mut data = Vec::with_capacity(g.rows() * w);
                        for r in 0..g.rows() {
                            data.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::from_parts(vec![g.rows(), w], data));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.numel();
                    if self.needs(p) {
                        let data = g.data()[offset..offset + n].to_vec();
                        self.accumulate(grads, p, Tensor::from_parts(pv.shape().to_vec(), data));
                    }
                    offset += n;
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                count,
            } => {
                let scale = g.item() / *count as f64;
                let mut d = Tensor::zeros(probs.shape());
                for (r, label) in labels.iter().enumerate() {
                    let Some(label) = *label else { continue };
                    for (o, &p) in d.row_mut(r).iter_mut().zip(probs.row(r)) {
                        *o = p * scale;
                    }
                    d.row_mut(r)[label] -= scale;
                }
                self.accumulate(grads, *logits, d);
            }
            Op::SoftCrossEntropy {
                logits,
                target,
                temperature,
                probs,
            } => {
                let scale = g.item() * temperature / probs.rows() as f64;
                let data = probs
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(s, t)| (s - t) * scale)
                    .collect();
                self.accumulate(grads, *logits, Tensor::from_parts(probs.shape().to_vec(), data));
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape();
                self.accumulate(grads, *x, Tensor::filled(shape, g.item()));
            }
        }
    }
}
