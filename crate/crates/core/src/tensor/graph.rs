//! The computation tape.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its output value and whatever it needs for the adjoint. Nodes are appended
//! in evaluation order, so a reverse sweep over the node list is a valid
//! topological order for backpropagation. Handles ([`Var`]) are plain indices
//! into that list and are only meaningful for the graph that created them.

use std::collections::HashMap;

use rand::Rng;

use super::{gemm, Layout, ParamId, ParameterRegistry, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_COEF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    SliceCols { src: Var, start: usize },
    ConcatCols(Vec<Var>),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout { x: Var, mask: Vec<f64> },
    CrossEntropySoft {
        logits: Var,
        targets: Tensor,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Adjoints of every node reachable from the seed of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Parameter adjoints; parameters bound to the graph but unreachable from
    /// the loss are absent.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.params
            .iter()
            .filter_map(move |&(id, v)| self.get(v).map(|g| (id, g)))
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable input that is not a registry parameter.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input (data, masks, targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Binds a registry parameter to this graph. Binding the same id twice
    /// returns the same handle, so a shared module contributes one leaf.
    pub fn param(&mut self, registry: &ParameterRegistry, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let value = registry.get(id).value().clone();
        let v = self.push(value, Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn bound_param(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    /// Copies the value into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    fn check_matrix(&self, op: &'static str, x: Var) -> Result<(usize, usize)> {
        let t = self.value(x);
        if !t.is_matrix() {
            return Err(Error::Dimension {
                op,
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        Ok((t.rows(), t.cols()))
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Adds a length-N vector to every row of an M×N matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, n) = self.check_matrix("add_row", x)?;
        if self.value(row).numel() != n {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row).data().to_vec();
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|xs| xs.iter().zip(&r).map(|(a, b)| a + b))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x, row]);
        Ok(self.push(value, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * s).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, s), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.check_matrix("transpose", x)?;
        let value = self.value(x).transpose();
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.check_matrix("slice_cols", x)?;
        if len == 0 || start + len > n {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: self.shape(x).to_vec(),
                rhs: vec![start, len],
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let value = Tensor::matrix(m, len, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceCols { src: x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Validation("concat_cols of nothing".into()))?;
        let (m, _) = self.check_matrix("concat_cols", first)?;
        let mut width = 0;
        for &p in parts {
            let (pm, pn) = self.check_matrix("concat_cols", p)?;
            if pm != m {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            width += pn;
        }
        let mut data = Vec::with_capacity(m * width);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::matrix(m, width, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// GELU, tanh form.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (SQRT_2_OVER_PI * (v + GELU_COEF * v * v * v)).tanh()))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.check_matrix("softmax_rows", x)?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SoftmaxRows(x), rg))
    }

    /// Per-row standardisation followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.check_matrix("layer_norm", x)?;
        if n < 2 {
            return Err(Error::Config(format!(
                "layer_norm needs at least 2 features per row, got {n}"
            )));
        }
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normalized = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for row in xs.chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                normalized.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout. With `training == false` or `rate == 0` the input
    /// handle is returned unchanged.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} must lie in [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep_scale })
            .collect();
        Ok(self.dropout_with_mask(x, mask))
    }

    /// Dropout with an explicit (already scaled) mask.
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<f64>) -> Var {
        assert_eq!(mask.len(), self.value(x).numel(), "dropout mask length");
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Dropout { x, mask }, rg)
    }

    /// Mean over rows of `-Σ_c target[c]·log softmax(logits)[c]`.
    pub fn cross_entropy_soft(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let (b, c) = self.check_matrix("cross_entropy_soft", logits)?;
        if targets.shape() != [b, c] {
            return Err(Error::Dimension {
                op: "cross_entropy_soft",
                lhs: self.shape(logits).to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        for (r, row) in targets.data().chunks(c).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&t| !(t >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Validation(format!(
                    "target row {r} is not a probability vector (sum {sum})"
                )));
            }
        }
        let mut probs = Vec::with_capacity(b * c);
        let mut loss = 0.0;
        for (row, trow) in self.value(logits).data().chunks(c).zip(targets.data().chunks(c)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (&l, &t) in row.iter().zip(trow) {
                let logp = l - lse;
                probs.push(logp.exp());
                if t != 0.0 {
                    loss -= t * logp;
                }
            }
        }
        let value = Tensor::scalar(loss / b as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropySoft {
                logits,
                targets: targets.clone(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sum of scalar nodes.
    pub fn add_scalars(&mut self, terms: &[Var]) -> Result<Var> {
        let mut iter = terms.iter();
        let mut acc = *iter
            .next()
            .ok_or_else(|| Error::Validation("add_scalars of nothing".into()))?;
        for &t in iter {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Dimension {
                op: "backward",
                lhs: self.shape(loss).to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &dy, &mut grads);
            }
            grads[idx] = Some(dy);
        }

        // Only differentiable leaves and intermediates keep their adjoints.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(&k, &v)| (k, v)).collect();
        params.sort();
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: Var, contrib: Vec<f64>) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contrib) {
                    *a += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf | Op::Param | Op::Constant => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, dy, Layout::Normal, bv.data(), Layout::Transposed, &mut da);
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), Layout::Transposed, dy, Layout::Normal, &mut db);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.to_vec());
                self.accumulate(grads, *b, dy.to_vec());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, dy.iter().zip(bv).map(|(g, v)| g * v).collect());
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, dy.iter().zip(av).map(|(g, v)| g * v).collect());
                }
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, dy.to_vec());
                if self.requires_grad(*row) {
                    let n = self.value(*row).numel();
                    let mut dr = vec![0.0; n];
                    for chunk in dy.chunks(n) {
                        for (d, g) in dr.iter_mut().zip(chunk) {
                            *d += g;
                        }
                    }
                    self.accumulate(grads, *row, dr);
                }
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, dy.iter().map(|g| g * s).collect());
            }
            Op::Transpose(x) => {
                let (m, n) = (node.value.rows(), node.value.cols());
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[j * m + i] = dy[i * n + j];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SliceCols { src, start } => {
                let srcv = self.value(*src);
                let (m, n) = (srcv.rows(), srcv.cols());
                let len = node.value.cols();
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    dx[r * n + start..r * n + start + len].copy_from_slice(&dy[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *src, dx);
            }
            Op::ConcatCols(parts) => {
                let m = node.value.rows();
                let width = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let pn = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut dp = Vec::with_capacity(m * pn);
                        for r in 0..m {
                            dp.extend_from_slice(&dy[r * width + offset..r * width + offset + pn]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    offset += pn;
                }
            }
            Op::Gelu(x) => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&v, g)| {
                        let u = SQRT_2_OVER_PI * (v + GELU_COEF * v * v * v);
                        let t = u.tanh();
                        let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * v * v);
                        g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::SoftmaxRows(x) => {
                let n = node.value.cols();
                let mut dx = Vec::with_capacity(dy.len());
                for (yrow, grow) in node.value.data().chunks(n).zip(dy.chunks(n)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    dx.extend(yrow.iter().zip(grow).map(|(y, g)| y * (g - dot)));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let n = node.value.cols();
                let g = self.value(*gain).data();
                if self.requires_grad(*gain) {
                    let mut dg = vec![0.0; n];
                    for (hrow, grow) in normalized.chunks(n).zip(dy.chunks(n)) {
                        for j in 0..n {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                }
                if self.requires_grad(*bias) {
                    let mut db = vec![0.0; n];
                    for grow in dy.chunks(n) {
                        for (d, v) in db.iter_mut().zip(grow) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
                if self.requires_grad(*x) {
                    let nf = n as f64;
                    let mut dx = Vec::with_capacity(dy.len());
                    for ((hrow, grow), inv) in normalized.chunks(n).zip(dy.chunks(n)).zip(inv_std) {
                        let dh: Vec<f64> = grow.iter().zip(g).map(|(d, gj)| d * gj).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hrow).map(|(a, b)| a * b).sum();
                        dx.extend(
                            dh.iter()
                                .zip(hrow)
                                .map(|(d, h)| inv / nf * (nf * d - sum_dh - h * sum_dh_h)),
                        );
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, dy.iter().zip(mask).map(|(g, m)| g * m).collect());
            }
            Op::CrossEntropySoft {
                logits,
                targets,
                probs,
            } => {
                let (b, c) = (targets.rows(), targets.cols());
                let scale = dy[0] / b as f64;
                let mut dx = Vec::with_capacity(b * c);
                for (prow, trow) in probs.chunks(c).zip(targets.data().chunks(c)) {
                    let tsum: f64 = trow.iter().sum();
                    dx.extend(prow.iter().zip(trow).map(|(p, t)| scale * (p * tsum - t)));
                }
                self.accumulate(grads, *logits, dx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![dy[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![dy[0] / n as f64; n]);
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
