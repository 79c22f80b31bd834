//! Reverse-mode tape over [`Tensor`] values.
//!
//! Ops are recorded as an enum with whatever forward state the reverse pass
//! needs. A tape lives for one forward/backward round and is then dropped.

use std::rc::Rc;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Matmul {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: f64,
    },
    Gelu {
        a: usize,
    },
    Transpose {
        a: usize,
    },
    Reshape {
        a: usize,
    },
    Concat {
        axis: usize,
        parts: Vec<usize>,
    },
    SliceCols {
        a: usize,
        start: usize,
        len: usize,
    },
    Gather {
        table: usize,
        indices: Vec<usize>,
    },
    SoftmaxRows {
        a: usize,
    },
    /// Softmax of `a + mask`; the mask is constant and carries no gradient.
    MaskedSoftmaxRows {
        a: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Per-row 2-d pair rotations with constant angles.
    RotatePairs {
        a: usize,
        cos: Rc<Vec<f64>>,
        sin: Rc<Vec<f64>>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        weights: Vec<f64>,
        normalized: bool,
        probs: Vec<f64>,
    },
    SumAll {
        a: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer for `var`, if it required one.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Insert a leaf value. Gradients accumulate for it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn need_2d(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if !t.is_2d() {
            return Err(Error::shape(op, format!("expected 2-d, got {:?}", t.shape())));
        }
        Ok((t.rows(), t.cols()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.need_2d(a, "matmul")?;
        let (kb, n) = self.need_2d(b, "matmul")?;
        if ka != kb {
            return Err(Error::shape(
                "matmul",
                format!(
                    "inner dimensions disagree: {:?} x {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let data = kernels::matmul_nn(self.value(a).data(), self.value(b).data(), m, ka, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(
            Tensor::new(vec![m, n], data)?,
            Op::Matmul { a: a.0, b: b.0 },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a: a.0, b: b.0 }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul { a: a.0, b: b.0 }, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(shape, data)?, Op::Scale { a: a.0, c }, rg))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| kernels::gelu_scalar(x))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(shape, data)?, Op::Gelu { a: a.0 }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.need_2d(a, "transpose")?;
        let src = self.value(a).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(vec![n, m], data)?, Op::Transpose { a: a.0 }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.value(a).shape(), shape),
            ));
        }
        let data = self.value(a).data().to_vec();
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(shape.to_vec(), data)?, Op::Reshape { a: a.0 }, rg))
    }

    /// Concatenate 2-d tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        if axis > 1 {
            return Err(Error::invalid(format!("concat axis {} out of range", axis)));
        }
        let (r0, c0) = self.need_2d(parts[0], "concat")?;
        let (mut rows, mut cols) = (r0, c0);
        for &p in &parts[1..] {
            let (r, c) = self.need_2d(p, "concat")?;
            if axis == 0 {
                if c != c0 {
                    return Err(Error::shape("concat", format!("column mismatch {} vs {}", c, c0)));
                }
                rows += r;
            } else {
                if r != r0 {
                    return Err(Error::shape("concat", format!("row mismatch {} vs {}", r, r0)));
                }
                cols += c;
            }
        }
        let mut data = vec![0.0; rows * cols];
        if axis == 0 {
            let mut at = 0;
            for &p in parts {
                let src = self.value(p).data();
                data[at..at + src.len()].copy_from_slice(src);
                at += src.len();
            }
        } else {
            let mut col_at = 0;
            for &p in parts {
                let t = self.value(p);
                let w = t.cols();
                for r in 0..rows {
                    data[r * cols + col_at..r * cols + col_at + w]
                        .copy_from_slice(&t.data()[r * w..(r + 1) * w]);
                }
                col_at += w;
            }
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::Concat {
                axis,
                parts: parts.iter().map(|p| p.0).collect(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.need_2d(a, "slice_cols")?;
        if start + len > cols {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {}..{} of {}", start, start + len, cols),
            ));
        }
        let src = self.value(a).data();
        let mut data = vec![0.0; rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len]
                .copy_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let rg = self.requires_grad(a);
        Ok(self.push(
            Tensor::new(vec![rows, len], data)?,
            Op::SliceCols { a: a.0, start, len },
            rg,
        ))
    }

    /// Gather rows of `table` by index. Backward scatter-adds, so duplicate
    /// indices accumulate.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (v, d) = self.need_2d(table, "gather")?;
        for &i in indices {
            if i >= v {
                return Err(Error::IndexOutOfRange {
                    what: "gather row",
                    index: i,
                    size: v,
                });
            }
        }
        let src = self.value(table).data();
        let mut data = vec![0.0; indices.len() * d];
        for (r, &i) in indices.iter().enumerate() {
            data[r * d..(r + 1) * d].copy_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.requires_grad(table);
        Ok(self.push(
            Tensor::new(vec![indices.len(), d], data)?,
            Op::Gather {
                table: table.0,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.need_2d(a, "softmax_rows")?;
        let mut data = self.value(a).data().to_vec();
        for r in 0..rows {
            kernels::softmax_row(&mut data[r * cols..(r + 1) * cols]);
        }
        let rg = self.requires_grad(a);
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::SoftmaxRows { a: a.0 },
            rg,
        ))
    }

    /// Softmax of `a + mask` where `mask` is a constant of the same shape
    /// (usually 0 / -inf). Every row must keep at least one finite entry.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: &Rc<Tensor>) -> Result<Var> {
        let (rows, cols) = self.need_2d(a, "masked_softmax_rows")?;
        if mask.shape() != self.value(a).shape() {
            return Err(Error::shape(
                "masked_softmax_rows",
                format!("mask {:?} vs input {:?}", mask.shape(), self.value(a).shape()),
            ));
        }
        let mut data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(mask.data())
            .map(|(x, m)| x + m)
            .collect();
        for r in 0..rows {
            kernels::softmax_row(&mut data[r * cols..(r + 1) * cols]);
        }
        let rg = self.requires_grad(a);
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::MaskedSoftmaxRows { a: a.0 },
            rg,
        ))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.need_2d(x, "layer_norm")?;
        if self.value(gain).numel() != cols || self.value(bias).numel() != cols {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain/bias must match last dimension {} (got {} / {})",
                    cols,
                    self.value(gain).numel(),
                    self.value(bias).numel()
                ),
            ));
        }
        let mut xhat = vec![0.0; rows * cols];
        let mut y = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        {
            let xv = self.value(x).data();
            let g = self.value(gain).data();
            let b = self.value(bias).data();
            for r in 0..rows {
                inv_std[r] = kernels::layer_norm_row(
                    &xv[r * cols..(r + 1) * cols],
                    g,
                    b,
                    eps,
                    &mut xhat[r * cols..(r + 1) * cols],
                    &mut y[r * cols..(r + 1) * cols],
                );
            }
        }
        let rg =
            self.requires_grad(x) || self.requires_grad(gain) || self.requires_grad(bias);
        Ok(self.push(
            Tensor::new(vec![rows, cols], y)?,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Rotate each row's dimension pairs (2l, 2l+1) by constant angles given
    /// as per-row cos/sin matrices of shape [rows, cols/2].
    pub fn rotate_pairs(&mut self, a: Var, cos: Rc<Vec<f64>>, sin: Rc<Vec<f64>>) -> Result<Var> {
        let (rows, cols) = self.need_2d(a, "rotate_pairs")?;
        if cols % 2 != 0 {
            return Err(Error::shape(
                "rotate_pairs",
                format!("pair rotation needs an even width, got {}", cols),
            ));
        }
        let half = cols / 2;
        if cos.len() != rows * half || sin.len() != rows * half {
            return Err(Error::shape(
                "rotate_pairs",
                format!("angle tables must be rows*{}, got {}", half, cos.len()),
            ));
        }
        let src = self.value(a).data();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for l in 0..half {
                let c = cos[r * half + l];
                let s = sin[r * half + l];
                let x = src[r * cols + 2 * l];
                let y = src[r * cols + 2 * l + 1];
                data[r * cols + 2 * l] = x * c - y * s;
                data[r * cols + 2 * l + 1] = x * s + y * c;
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::RotatePairs { a: a.0, cos, sin },
            rg,
        ))
    }

    /// Weighted token-level cross entropy over logit rows.
    ///
    /// `normalized` divides by the weight sum; otherwise the raw weighted sum
    /// is returned.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
        normalized: bool,
    ) -> Result<Var> {
        let (rows, vocab) = self.need_2d(logits, "cross_entropy")?;
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                format!(
                    "{} logit rows, {} targets, {} weights",
                    rows,
                    targets.len(),
                    weights.len()
                ),
            ));
        }
        for &t in targets {
            if t >= vocab {
                return Err(Error::IndexOutOfRange {
                    what: "cross_entropy target",
                    index: t,
                    size: vocab,
                });
            }
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        let mut wsum = 0.0;
        for r in 0..rows {
            let row = &mut probs[r * vocab..(r + 1) * vocab];
            let mut max = f64::NEG_INFINITY;
            for &v in row.iter() {
                if v > max {
                    max = v;
                }
            }
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let log_p = (row[targets[r]] / sum).ln();
            for v in row.iter_mut() {
                *v /= sum;
            }
            total += weights[r] * (-log_p);
            wsum += weights[r];
        }
        let value = if normalized {
            if wsum == 0.0 {
                return Err(Error::invalid("cross_entropy: normalized with zero weight sum"));
            }
            total / wsum
        } else {
            total
        };
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                normalized,
                probs,
            },
            rg,
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let total: f64 = self.value(a).data().iter().sum();
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::scalar(total), Op::SumAll { a: a.0 }, rg))
    }

    /// Run the reverse pass from scalar `loss`, seeding d(loss)/d(loss) with
    /// `seed` (1.0 for a plain gradient).
    pub fn backward(&self, loss: Var, seed: f64) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![seed]);

        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.accumulate_into_inputs(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn add_grad(&self, grads: &mut [Option<Vec<f64>>], node: usize, delta: &[f64]) {
        if !self.nodes[node].requires_grad {
            return;
        }
        let buf = grads[node].get_or_insert_with(|| vec![0.0; self.nodes[node].value.numel()]);
        for (b, d) in buf.iter_mut().zip(delta) {
            *b += d;
        }
    }

    fn accumulate_into_inputs(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[*a].value.rows(), self.nodes[*a].value.cols());
                let n = self.nodes[*b].value.cols();
                if self.nodes[*a].requires_grad {
                    let da = kernels::matmul_nt(g, self.nodes[*b].value.data(), m, n, k);
                    self.add_grad(grads, *a, &da);
                }
                if self.nodes[*b].requires_grad {
                    let db = kernels::matmul_tn(self.nodes[*a].value.data(), g, m, k, n);
                    self.add_grad(grads, *b, &db);
                }
            }
            Op::Add { a, b } => {
                self.add_grad(grads, *a, g);
                self.add_grad(grads, *b, g);
            }
            Op::Mul { a, b } => {
                if self.nodes[*a].requires_grad {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[*b].value.data())
                        .map(|(x, y)| x * y)
                        .collect();
                    self.add_grad(grads, *a, &da);
                }
                if self.nodes[*b].requires_grad {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[*a].value.data())
                        .map(|(x, y)| x * y)
                        .collect();
                    self.add_grad(grads, *b, &db);
                }
            }
            Op::Scale { a, c } => {
                let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                self.add_grad(grads, *a, &da);
            }
            Op::Gelu { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[*a].value.data())
                    .map(|(gv, &x)| gv * kernels::gelu_grad(x))
                    .collect();
                self.add_grad(grads, *a, &da);
            }
            Op::Transpose { a } => {
                // node value is [n, m]; input was [m, n]
                let n = self.nodes[id].value.rows();
                let m = self.nodes[id].value.cols();
                let mut da = vec![0.0; m * n];
                for i in 0..n {
                    for j in 0..m {
                        da[j * n + i] = g[i * m + j];
                    }
                }
                self.add_grad(grads, *a, &da);
            }
            Op::Reshape { a } => {
                self.add_grad(grads, *a, g);
            }
            Op::Concat { axis, parts } => {
                let cols = self.nodes[id].value.cols();
                if *axis == 0 {
                    let mut at = 0;
                    for &p in parts {
                        let len = self.nodes[p].value.numel();
                        if self.nodes[p].requires_grad {
                            self.add_grad(grads, p, &g[at..at + len]);
                        }
                        at += len;
                    }
                } else {
                    let rows = self.nodes[id].value.rows();
                    let mut col_at = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.cols();
                        if self.nodes[p].requires_grad {
                            let mut dp = vec![0.0; rows * w];
                            for r in 0..rows {
                                dp[r * w..(r + 1) * w].copy_from_slice(
                                    &g[r * cols + col_at..r * cols + col_at + w],
                                );
                            }
                            self.add_grad(grads, p, &dp);
                        }
                        col_at += w;
                    }
                }
            }
            Op::SliceCols { a, start, len } => {
                let rows = self.nodes[id].value.rows();
                let cols = self.nodes[*a].value.cols();
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    da[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.add_grad(grads, *a, &da);
            }
            Op::Gather { table, indices } => {
                let d = self.nodes[id].value.cols();
                let v = self.nodes[*table].value.rows();
                let mut dt = vec![0.0; v * d];
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += g[r * d + j];
                    }
                }
                self.add_grad(grads, *table, &dt);
            }
            Op::SoftmaxRows { a } | Op::MaskedSoftmaxRows { a } => {
                let p = self.nodes[id].value.data();
                let rows = self.nodes[id].value.rows();
                let cols = self.nodes[id].value.cols();
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    let pr = &p[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for j in 0..cols {
                        da[r * cols + j] = pr[j] * (gr[j] - dot);
                    }
                }
                self.add_grad(grads, *a, &da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let rows = self.nodes[id].value.rows();
                let cols = self.nodes[id].value.cols();
                let gv = self.nodes[*gain].value.data();
                if self.nodes[*gain].requires_grad {
                    let mut dg = vec![0.0; cols];
                    for r in 0..rows {
                        for j in 0..cols {
                            dg[j] += g[r * cols + j] * xhat[r * cols + j];
                        }
                    }
                    self.add_grad(grads, *gain, &dg);
                }
                if self.nodes[*bias].requires_grad {
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for j in 0..cols {
                            db[j] += g[r * cols + j];
                        }
                    }
                    self.add_grad(grads, *bias, &db);
                }
                if self.nodes[*x].requires_grad {
                    let mut dx = vec![0.0; rows * cols];
                    let d = cols as f64;
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..cols {
                            let dxh = gr[j] * gv[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xh[j];
                        }
                        mean_dxhat /= d;
                        mean_dxhat_xhat /= d;
                        for j in 0..cols {
                            let dxh = gr[j] * gv[j];
                            dx[r * cols + j] =
                                inv_std[r] * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                        }
                    }
                    self.add_grad(grads, *x, &dx);
                }
            }
            Op::RotatePairs { a, cos, sin } => {
                let rows = self.nodes[id].value.rows();
                let cols = self.nodes[id].value.cols();
                let half = cols / 2;
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    for l in 0..half {
                        let c = cos[r * half + l];
                        let s = sin[r * half + l];
                        let gx = g[r * cols + 2 * l];
                        let gy = g[r * cols + 2 * l + 1];
                        da[r * cols + 2 * l] = gx * c + gy * s;
                        da[r * cols + 2 * l + 1] = -gx * s + gy * c;
                    }
                }
                self.add_grad(grads, *a, &da);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                normalized,
                probs,
            } => {
                let rows = self.nodes[*logits].value.rows();
                let vocab = self.nodes[*logits].value.cols();
                let wsum: f64 = weights.iter().sum();
                let norm = if *normalized { wsum } else { 1.0 };
                let gd = g[0];
                let mut dl = vec![0.0; rows * vocab];
                for r in 0..rows {
                    let w = weights[r] / norm;
                    if w == 0.0 {
                        continue;
                    }
                    for j in 0..vocab {
                        let indicator = if j == targets[r] { 1.0 } else { 0.0 };
                        dl[r * vocab + j] = gd * w * (probs[r * vocab + j] - indicator);
                    }
                }
                self.add_grad(grads, *logits, &dl);
            }
            Op::SumAll { a } => {
                let da = vec![g[0]; self.nodes[*a].value.numel()];
                self.add_grad(grads, *a, &da);
            }
        }
    }
}
