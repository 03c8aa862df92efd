//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every op appends a node holding its forward value and the references it needs for
//! the backward sweep. Nodes are appended in evaluation order, so the tape is already
//! topologically sorted and [`Tape::backward`] is a single reverse pass.
//!
//! Parameters are read straight from a borrowed [`ParameterStore`] and never copied.

use std::sync::Arc;

use super::params::{ParamGrads, ParamId, ParameterStore};
use super::tensor::{gemm, Tensor};
use crate::error::{ItapError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: Vec<f64>,
    },
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    SquaredError {
        pred: Var,
        target: Tensor,
        weights: Vec<f64>,
    },
    Sum(Var),
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    StopGradient,
    StraightThrough(Var),
    Reshape(Var),
}

/// Batch layout for multi-head causal attention over `[batch * seq, width]` rows.
#[derive(Debug, Clone)]
pub struct AttnShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    /// Optional per-row key validity. Invalid keys are never attended to, except by
    /// their own query.
    pub valid: Option<Arc<Vec<bool>>>,
}

impl AttnShape {
    pub fn new(batch: usize, seq: usize, heads: usize) -> Self {
        AttnShape {
            batch,
            seq,
            heads,
            valid: None,
        }
    }

    pub fn with_valid(mut self, valid: Vec<bool>) -> Self {
        self.valid = Some(Arc::new(valid));
        self
    }

    fn key_allowed(&self, b: usize, i: usize, j: usize) -> bool {
        j == i
            || self
                .valid
                .as_ref()
                .map_or(true, |v| v[b * self.seq + j])
    }
}

#[derive(Debug)]
enum Value {
    Owned(Tensor),
    Param(ParamId),
}

#[derive(Debug)]
struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation.
pub struct Tape<'a> {
    store: Option<&'a ParameterStore>,
    nodes: Vec<Node>,
}

/// Gradients from one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: ParamGrads,
}

impl Gradients {
    /// Gradient with respect to a tape input (zeros if it did not influence the loss).
    pub fn wrt(&self, tape: &Tape<'_>, var: Var) -> Tensor {
        let value = tape.value(var);
        match &self.nodes[var.0] {
            Some(g) => Tensor::new(value.shape().to_vec(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(value.shape()),
        }
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            store: None,
            nodes: Vec::new(),
        }
    }

    pub fn with_store(store: &'a ParameterStore) -> Self {
        Tape {
            store: Some(store),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        match &self.nodes[var.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.expect("parameter without store").value(*id),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Differentiable input whose gradient can be read with [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        assert!(self.store.is_some(), "tape has no parameter store");
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).as_matrix("matmul")?;
        let (k2, m) = self.value(b).as_matrix("matmul")?;
        if k != k2 {
            return Err(ItapError::shape(
                "matmul",
                format!("{:?} x {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(ItapError::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, data).expect("shape"), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Add a length-`m` bias to every row of an `n×m` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let m = self.value(x).cols();
        if self.value(bias).numel() != m {
            return Err(ItapError::shape(
                "add_bias",
                format!("{:?} + {:?}", self.value(x).shape(), self.value(bias).shape()),
            ));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(m)
            .flat_map(|row| row.iter().zip(b).map(|(v, c)| v + c))
            .collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, data).expect("shape"), Op::Scale(x, c), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
            .collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, data).expect("shape"), Op::Gelu(x), rg)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let m = self.value(x).cols();
        if self.value(gamma).numel() != m || self.value(beta).numel() != m {
            return Err(ItapError::shape("layer_norm", "affine width mismatch"));
        }
        let xt = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xt.numel() / m;
        let mut out = vec![0.0; xt.numel()];
        let mut xhat = vec![0.0; xt.numel()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xt.data()[r * m..(r + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..m {
                let h = (row[j] - mean) * rs;
                xhat[r * m + j] = h;
                out[r * m + j] = g[j] * h + b[j];
            }
        }
        let shape = xt.shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
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

    /// Multi-head causal scaled dot-product attention. `q`, `k`, `v` are
    /// `[batch * seq, width]` with heads laid out contiguously along the width.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, shape: AttnShape) -> Result<Var> {
        let (rows, width) = self.value(q).as_matrix("attention")?;
        for other in [k, v] {
            if self.value(other).shape() != [rows, width] {
                return Err(ItapError::shape("attention", "q/k/v shapes differ"));
            }
        }
        if rows != shape.batch * shape.seq || shape.heads == 0 || width % shape.heads != 0 {
            return Err(ItapError::shape(
                "attention",
                format!(
                    "{rows} rows, width {width} for batch {} seq {} heads {}",
                    shape.batch, shape.seq, shape.heads
                ),
            ));
        }
        if let Some(valid) = &shape.valid {
            if valid.len() != rows {
                return Err(ItapError::shape("attention", "validity mask length"));
            }
        }
        let (t, h) = (shape.seq, shape.heads);
        let dh = width / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut out = vec![0.0; rows * width];
        let mut probs = vec![0.0; shape.batch * h * t * t];
        let mut scores = vec![0.0; t];
        for b in 0..shape.batch {
            for head in 0..h {
                let off = head * dh;
                for i in 0..t {
                    let qi = &qd[(b * t + i) * width + off..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        if shape.key_allowed(b, i, j) {
                            let kj = &kd[(b * t + j) * width + off..][..dh];
                            let s = dot(qi, kj) * scale;
                            scores[j] = s;
                            max = max.max(s);
                        }
                    }
                    let p = &mut probs[((b * h + head) * t + i) * t..][..t];
                    let mut total = 0.0;
                    for j in 0..=i {
                        if shape.key_allowed(b, i, j) {
                            p[j] = (scores[j] - max).exp();
                            total += p[j];
                        }
                    }
                    let o = &mut out[(b * t + i) * width + off..][..dh];
                    for j in 0..=i {
                        if p[j] != 0.0 {
                            p[j] /= total;
                            let vj = &vd[(b * t + j) * width + off..][..dh];
                            for (oo, vv) in o.iter_mut().zip(vj) {
                                *oo += p[j] * vv;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::new(vec![rows, width], out)?,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.cols();
        let mut data = Vec::with_capacity(t.numel());
        for row in t.data().chunks(m) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let s: f64 = e.iter().sum();
            data.extend(e.into_iter().map(|v| v / s));
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, data).expect("shape"), Op::SoftmaxRows(x), rg)
    }

    /// `Σ_i w_i · (−log softmax(logits_i)[target_i])` as a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        let k = t.cols();
        let n = t.rows();
        if targets.len() != n || weights.len() != n {
            return Err(ItapError::LengthMismatch {
                expected: n,
                actual: targets.len().min(weights.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= k) {
            return Err(ItapError::IndexOutOfRange { index: bad, size: k });
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = 0.0;
        for (i, row) in t.data().chunks(k).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let s: f64 = e.iter().sum();
            if weights[i] != 0.0 {
                loss += weights[i] * (s.ln() + max - row[targets[i]]);
            }
            probs.extend(e.into_iter().map(|v| v / s));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `Σ_i w_i ‖pred_i − target_i‖²` over rows, with a constant target.
    pub fn squared_error(&mut self, pred: Var, target: &Tensor, weights: &[f64]) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(ItapError::shape(
                "squared_error",
                format!("{:?} vs {:?}", p.shape(), target.shape()),
            ));
        }
        let m = p.cols();
        if weights.len() != p.rows() {
            return Err(ItapError::LengthMismatch {
                expected: p.rows(),
                actual: weights.len(),
            });
        }
        let loss: f64 = p
            .data()
            .chunks(m)
            .zip(target.data().chunks(m))
            .zip(weights)
            .map(|((a, b), w)| w * a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
            .sum();
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SquaredError {
                pred,
                target: target.clone(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Row lookup: `out[i] = table[indices[i]]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, m) = t.as_matrix("gather")?;
        let mut data = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            if i >= rows {
                return Err(ItapError::IndexOutOfRange { index: i, size: rows });
            }
            data.extend_from_slice(t.row(i));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![indices.len(), m], data)?,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (n, m) = t.as_matrix("slice_cols")?;
        if start + len > m {
            return Err(ItapError::shape("slice_cols", format!("{start}+{len} > {m}")));
        }
        let data = t
            .data()
            .chunks(m)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, len], data)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| ItapError::invalid("concat of nothing"))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).as_matrix("concat_cols")?;
            if r != n {
                return Err(ItapError::shape("concat_cols", "row counts differ"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![n, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Same value, no gradient flow.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.push(t, Op::StopGradient, false)
    }

    /// Forward value is `quantized`; the backward pass treats the op as identity in `z`.
    pub fn straight_through(&mut self, z: Var, quantized: Tensor) -> Result<Var> {
        if self.value(z).shape() != quantized.shape() {
            return Err(ItapError::shape(
                "straight_through",
                format!("{:?} vs {:?}", self.value(z).shape(), quantized.shape()),
            ));
        }
        let rg = self.rg(z);
        Ok(self.push(quantized, Op::StraightThrough(z), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(ItapError::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let n_params = self.store.map_or(0, ParameterStore::len);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut params = ParamGrads::empty(n_params);
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads, &mut params);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn propagate(
        &self,
        idx: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        params: &mut ParamGrads,
    ) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, contribution: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.value(v).numel()]);
            contribution(slot);
        };
        match &node.op {
            Op::Constant | Op::Input | Op::StopGradient => {}
            Op::Param(id) => params.accumulate(*id, g, self.value(Var(idx)).shape()),
            Op::MatMul(a, b) => {
                let (n, k) = dims(self.value(*a));
                let m = self.value(*b).cols();
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|s| gemm(n, m, k, g, false, bd, true, s, 1.0));
                acc(*b, &|s| gemm(k, n, m, ad, true, g, false, s, 1.0));
            }
            Op::Add(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * bd[i];
                    }
                });
                acc(*b, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * ad[i];
                    }
                });
            }
            Op::AddBias(x, bias) => {
                acc(*x, &|s| add_into(s, g));
                let m = self.value(*x).cols();
                acc(*bias, &|s| {
                    for row in g.chunks(m) {
                        add_into(s, row);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &|s| s.iter_mut().zip(g).for_each(|(a, b)| *a += c * b)),
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                acc(*x, &|s| {
                    for i in 0..s.len() {
                        let v = xd[i];
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        s[i] += g[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du);
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
                let m = self.value(*x).cols();
                let gd = self.value(*gamma).data();
                acc(*gamma, &|s| {
                    for (gr, hr) in g.chunks(m).zip(xhat.chunks(m)) {
                        for j in 0..m {
                            s[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc(*beta, &|s| {
                    for gr in g.chunks(m) {
                        add_into(s, gr);
                    }
                });
                acc(*x, &|s| {
                    let mf = m as f64;
                    for (r, (gr, hr)) in g.chunks(m).zip(xhat.chunks(m)).enumerate() {
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for j in 0..m {
                            let d = gr[j] * gd[j];
                            sum_d += d;
                            sum_dh += d * hr[j];
                        }
                        let out = &mut s[r * m..(r + 1) * m];
                        for j in 0..m {
                            let d = gr[j] * gd[j];
                            out[j] += rstd[r] / mf * (mf * d - sum_d - hr[j] * sum_dh);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            } => self.attention_backward(*q, *k, *v, shape, probs, g, grads),
            Op::SoftmaxRows(x) => {
                let y = self.value(Var(idx));
                let m = y.cols();
                acc(*x, &|s| {
                    for (r, (yr, gr)) in y.data().chunks(m).zip(g.chunks(m)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            s[r * m + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let k = self.value(*logits).cols();
                acc(*logits, &|s| {
                    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let row = &mut s[i * k..(i + 1) * k];
                        for j in 0..k {
                            let y = if j == t { 1.0 } else { 0.0 };
                            row[j] += g[0] * w * (probs[i * k + j] - y);
                        }
                    }
                });
            }
            Op::SquaredError {
                pred,
                target,
                weights,
            } => {
                let p = self.value(*pred);
                let m = p.cols();
                acc(*pred, &|s| {
                    for (i, &w) in weights.iter().enumerate() {
                        for j in i * m..(i + 1) * m {
                            s[j] += g[0] * 2.0 * w * (p.data()[j] - target.data()[j]);
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &|s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::Gather { table, indices } => {
                let m = self.value(*table).cols();
                acc(*table, &|s| {
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut s[i * m..(i + 1) * m], &g[r * m..(r + 1) * m]);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let m = self.value(*x).cols();
                let len = self.value(Var(idx)).cols();
                acc(*x, &|s| {
                    for (r, gr) in g.chunks(len).enumerate() {
                        add_into(&mut s[r * m + start..r * m + start + len], gr);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = self.value(Var(idx)).cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, &|s| {
                        for (r, sr) in s.chunks_mut(w).enumerate() {
                            add_into(sr, &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::StraightThrough(z) => acc(*z, &|s| add_into(s, g)),
            Op::Reshape(x) => acc(*x, &|s| add_into(s, g)),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        shape: &AttnShape,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (rows, width) = dims(self.value(q));
        let (t, h) = (shape.seq, shape.heads);
        let dh = width / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut dq = vec![0.0; rows * width];
        let mut dk = vec![0.0; rows * width];
        let mut dv = vec![0.0; rows * width];
        let mut dp = vec![0.0; t];
        for b in 0..shape.batch {
            for head in 0..h {
                let off = head * dh;
                for i in 0..t {
                    let p = &probs[((b * h + head) * t + i) * t..][..t];
                    let gi = &g[(b * t + i) * width + off..][..dh];
                    let mut weighted = 0.0;
                    for j in 0..=i {
                        if p[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vj = &vd[(b * t + j) * width + off..][..dh];
                        dp[j] = dot(gi, vj);
                        weighted += p[j] * dp[j];
                        let dvj = &mut dv[(b * t + j) * width + off..][..dh];
                        for (d, gg) in dvj.iter_mut().zip(gi) {
                            *d += p[j] * gg;
                        }
                    }
                    let qi = &qd[(b * t + i) * width + off..][..dh];
                    for j in 0..=i {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - weighted) * scale;
                        let kj = &kd[(b * t + j) * width + off..][..dh];
                        let dqi = &mut dq[(b * t + i) * width + off..][..dh];
                        for (d, kk) in dqi.iter_mut().zip(kj) {
                            *d += ds * kk;
                        }
                        let dkj = &mut dk[(b * t + j) * width + off..][..dh];
                        for (d, qq) in dkj.iter_mut().zip(qi) {
                            *d += ds * qq;
                        }
                    }
                }
            }
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[var.0].requires_grad {
                let slot = grads[var.0].get_or_insert_with(|| vec![0.0; rows * width]);
                add_into(slot, &d);
            }
        }
    }
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(tape.value(y).item(), 9.0);
        assert_eq!(grads.wrt(&tape, x).item(), 6.0);
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(2.0));
        let sg = tape.stop_gradient(x);
        let y = tape.mul(sg, sg).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(&tape, x).item(), 0.0);
    }

    #[test]
    fn straight_through_forward_and_backward() {
        let mut tape = Tape::new();
        let z = tape.input(Tensor::matrix(1, 2, vec![0.7, -0.2]).unwrap());
        let q = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let st = tape.straight_through(z, q.clone()).unwrap();
        assert_eq!(tape.value(st), &q);
        let loss = tape.squared_error(st, &Tensor::zeros(&[1, 2]), &[1.0]).unwrap();
        let grads = tape.backward(loss).unwrap();
        // d/dz of ‖q‖² under pass-through is 2q
        assert_eq!(grads.wrt(&tape, z).data(), &[2.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(ItapError::ShapeMismatch { .. })));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let ce = tape.cross_entropy(l, &[1], &[1.0]).unwrap();
        assert_relative_eq!(tape.value(ce).item(), (1.0 + 1f64.exp()).ln(), max_relative = 1e-12);
        assert_relative_eq!(tape.value(ce).item(), 1.3133, epsilon = 1e-4);

        let u = tape.constant(Tensor::matrix(1, 7, vec![0.4; 7]).unwrap());
        let ce = tape.cross_entropy(u, &[3], &[1.0]).unwrap();
        assert_relative_eq!(tape.value(ce).item(), 7f64.ln(), max_relative = 1e-12);

        let peaked = tape.constant(Tensor::matrix(1, 3, vec![0.0, 60.0, 0.0]).unwrap());
        let ce = tape.cross_entropy(peaked, &[1], &[1.0]).unwrap();
        assert!(tape.value(ce).item() < 1e-20);

        assert!(matches!(
            tape.cross_entropy(peaked, &[3], &[1.0]),
            Err(ItapError::IndexOutOfRange { index: 3, size: 3 })
        ));
    }

    #[test]
    fn attention_respects_validity_mask() {
        let mut tape = Tape::new();
        // batch 1, seq 3, one head of width 1; key 0 invalid
        let q = tape.constant(Tensor::matrix(3, 1, vec![1.0, 1.0, 1.0]).unwrap());
        let v = tape.constant(Tensor::matrix(3, 1, vec![100.0, 2.0, 4.0]).unwrap());
        let shape = AttnShape::new(1, 3, 1).with_valid(vec![false, true, true]);
        let out = tape.causal_attention(q, q, v, shape).unwrap();
        let o = tape.value(out).data();
        assert_eq!(o[0], 100.0); // invalid query still sees itself
        assert_eq!(o[1], 2.0);
        assert_eq!(o[2], 3.0);
    }
}
