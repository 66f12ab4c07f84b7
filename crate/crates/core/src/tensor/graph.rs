//! Explicit reverse-mode differentiation graph.
//!
//! Nodes are appended in evaluation order, so node indices are already a
//! topological order and backward is a single reverse sweep that visits each
//! node once. Gradients are only propagated into nodes that depend on a
//! parameter leaf.

use super::ops::{self, gemm};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for [`Graph::custom_unary`]: `(input, output, grad_output) -> grad_input`.
pub type BackwardFn = Box<dyn Fn(&Tensor, &Tensor, &Tensor) -> Tensor>;

enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ReluSq(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    MaskedSoftmax {
        x: Var,
        scale: f64,
    },
    MaskFill {
        x: Var,
        keep: Vec<bool>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Rope {
        x: Var,
        positions: Vec<usize>,
        base: f64,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        active: Vec<bool>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Custom {
        x: Var,
        backward: BackwardFn,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
/// Parameter leaves always have an entry, zero-filled when unreached.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a parameter leaf.
    pub fn wrt(&self, v: Var) -> &Tensor {
        self.get(v)
            .expect("gradient requested for a non-parameter node")
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            param: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            param: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.requires(v));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Matmul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = ops::transpose(self.value(a))?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape {
                op: "mul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = ops::add_row(self.value(x), self.value(bias))?;
        Ok(self.push(out, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = ops::scale(self.value(x), s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn relu_sq(&mut self, x: Var) -> Var {
        let out = ops::relu_sq(self.value(x));
        self.push(out, Op::ReluSq(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let parts = ops::layer_norm_parts(self.value(x), self.value(gain), self.value(bias), eps)?;
        let out = Tensor::from_parts(self.value(x).shape().to_vec(), parts.out);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat: parts.xhat,
            rstd: parts.rstd,
        };
        Ok(self.push(out, op, &[x, gain, bias]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = ops::softmax_rows(self.value(x))?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    /// `softmax_rows(mask_fill(scale·x, keep))` as one node, so only the
    /// probabilities are retained for backward.
    pub fn masked_softmax(&mut self, x: Var, scale: f64, keep: &[bool]) -> Result<Var> {
        let src = self.value(x);
        let d = src.last_dim();
        if keep.len() != src.numel() {
            return Err(Error::Shape {
                op: "masked_softmax",
                lhs: src.shape().to_vec(),
                rhs: vec![keep.len()],
            });
        }
        let mut data: Vec<f64> = src
            .data()
            .iter()
            .zip(keep)
            .map(|(&v, &k)| if k { v * scale } else { f64::NEG_INFINITY })
            .collect();
        for row in data.chunks_mut(d) {
            ops::softmax_in_place(row)?;
        }
        let out = Tensor::from_parts(src.shape().to_vec(), data);
        Ok(self.push(out, Op::MaskedSoftmax { x, scale }, &[x]))
    }

    /// Replaces every entry whose `keep` flag is false with `-inf`.
    pub fn mask_fill(&mut self, x: Var, keep: Vec<bool>) -> Result<Var> {
        let src = self.value(x);
        if keep.len() != src.numel() {
            return Err(Error::Shape {
                op: "mask_fill",
                lhs: src.shape().to_vec(),
                rhs: vec![keep.len()],
            });
        }
        let data = src
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v } else { f64::NEG_INFINITY })
            .collect();
        let out = Tensor::from_parts(src.shape().to_vec(), data);
        Ok(self.push(out, Op::MaskFill { x, keep }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if len == 0 || start + len > d {
            return Err(Error::contract(format!(
                "column slice {start}..{} out of range for width {d}",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&src[r * d + start..r * d + start + len]);
        }
        let out = Tensor::from_parts(vec![n, len], data);
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != n {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
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
        let out = Tensor::from_parts(vec![n, total], data);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Row `i` of the output is row `rows[i]` of `x`.
    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if rows.is_empty() {
            return Err(Error::contract("gather_rows needs at least one row"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::contract(format!(
                "row index {bad} out of range for {n} rows"
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in &rows {
            data.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let out = Tensor::from_parts(vec![rows.len(), d], data);
        Ok(self.push(out, Op::GatherRows { x, rows }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self.value(parts[0]).dims2()?.1;
        let mut n = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != d {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            n += r;
        }
        let mut data = Vec::with_capacity(n * d);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_parts(vec![n, d], data);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn rope(&mut self, x: Var, positions: Vec<usize>, base: f64) -> Result<Var> {
        let out = ops::rope(self.value(x), &positions, base, false)?;
        Ok(self.push(out, Op::Rope { x, positions, base }, &[x]))
    }

    /// Mean negative log-likelihood of `targets[r]` under `softmax(logits[r])`
    /// over the rows flagged in `active`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: Vec<usize>,
        active: Vec<bool>,
    ) -> Result<Var> {
        let (n, v) = self.value(logits).dims2()?;
        if targets.len() != n || active.len() != n {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![n, v],
                rhs: vec![targets.len(), active.len()],
            });
        }
        let count = active.iter().filter(|&&a| a).count();
        if count == 0 {
            return Err(Error::contract(
                "cross_entropy needs at least one active row",
            ));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; n * v];
        let mut total = 0.0;
        for r in (0..n).filter(|&r| active[r]) {
            let t = targets[r];
            if t >= v {
                return Err(Error::contract(format!("target {t} outside vocab {v}")));
            }
            let row = &src[r * v..(r + 1) * v];
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric {
                    op: "cross_entropy",
                    detail: format!("non-finite logits in row {r}"),
                });
            }
            let lse = ops::log_sum_exp(row);
            total += lse - row[t];
            for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let out = Tensor::scalar(total / count as f64);
        let op = Op::CrossEntropy {
            logits,
            targets,
            active,
            probs,
        };
        Ok(self.push(out, op, &[logits]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    /// Elementwise-shaped extension op with a caller-supplied backward rule.
    pub fn custom_unary(
        &mut self,
        x: Var,
        forward: impl Fn(&Tensor) -> Tensor,
        backward: BackwardFn,
    ) -> Var {
        let out = forward(self.value(x));
        self.push(out, Op::Custom { x, backward }, &[x])
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (node.param, g) {
                (true, Some(g)) => Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
                (true, None) => Some(Tensor::zeros(node.value.shape())),
                (false, _) => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.requires(*a) {
                    let ga = self.slot(grads, *a);
                    gemm(m, n, k, g, false, bv.data(), true, ga, 1.0);
                }
                if self.requires(*b) {
                    let gb = self.slot(grads, *b);
                    gemm(k, m, n, av.data(), true, g, false, gb, 1.0);
                }
            }
            Op::Transpose(a) => {
                if self.requires(*a) {
                    let (r, c) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                    let ga = self.slot(grads, *a);
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.requires(v) {
                        axpy(self.slot(grads, v), g, 1.0);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.requires(*a) {
                    let bv = self.value(*b).data();
                    let ga = self.slot(grads, *a);
                    for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * y;
                    }
                }
                if self.requires(*b) {
                    let av = self.value(*a).data();
                    let gb = self.slot(grads, *b);
                    for ((o, &gi), &x) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * x;
                    }
                }
            }
            Op::AddRow(x, b) => {
                if self.requires(*x) {
                    axpy(self.slot(grads, *x), g, 1.0);
                }
                if self.requires(*b) {
                    let d = out.last_dim();
                    let gb = self.slot(grads, *b);
                    for row in g.chunks(d) {
                        axpy(gb, row, 1.0);
                    }
                }
            }
            Op::Scale(x, s) => {
                if self.requires(*x) {
                    axpy(self.slot(grads, *x), g, *s);
                }
            }
            Op::ReluSq(x) => {
                if self.requires(*x) {
                    let xv = self.value(*x).data();
                    let gx = self.slot(grads, *x);
                    for ((o, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        *o += gi * 2.0 * xi.max(0.0);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = out.last_dim();
                if self.requires(*x) {
                    let gv = self.value(*gain).data();
                    let gx = self.slot(grads, *x);
                    let mut dxhat = vec![0.0; d];
                    for (r, &inv) in rstd.iter().enumerate() {
                        let go = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = go[j] * gv[j];
                        }
                        let mean1 = dxhat.iter().sum::<f64>() / d as f64;
                        let mean2 =
                            dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let dst = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            dst[j] += inv * (dxhat[j] - mean1 - xh[j] * mean2);
                        }
                    }
                }
                if self.requires(*gain) {
                    let gg = self.slot(grads, *gain);
                    for (go, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += go[j] * xh[j];
                        }
                    }
                }
                if self.requires(*bias) {
                    let gb = self.slot(grads, *bias);
                    for go in g.chunks(d) {
                        axpy(gb, go, 1.0);
                    }
                }
            }
            Op::Softmax(x) => {
                if self.requires(*x) {
                    let d = out.last_dim();
                    let gx = self.slot(grads, *x);
                    for ((y, go), dst) in
                        out.data().chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d))
                    {
                        let dot: f64 = y.iter().zip(go).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dst[j] += y[j] * (go[j] - dot);
                        }
                    }
                }
            }
            Op::MaskedSoftmax { x, scale } => {
                if self.requires(*x) {
                    let d = out.last_dim();
                    let gx = self.slot(grads, *x);
                    for ((y, go), dst) in
                        out.data().chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d))
                    {
                        let dot: f64 = y.iter().zip(go).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dst[j] += scale * y[j] * (go[j] - dot);
                        }
                    }
                }
            }
            Op::MaskFill { x, keep } => {
                if self.requires(*x) {
                    let gx = self.slot(grads, *x);
                    for ((o, &gi), &k) in gx.iter_mut().zip(g).zip(keep) {
                        if k {
                            *o += gi;
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if self.requires(*x) {
                    let d = self.value(*x).shape()[1];
                    let len = out.shape()[1];
                    let gx = self.slot(grads, *x);
                    for (r, go) in g.chunks(len).enumerate() {
                        axpy(&mut gx[r * d + start..r * d + start + len], go, 1.0);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if self.requires(p) {
                        let gp = self.slot(grads, p);
                        for (r, go) in g.chunks(total).enumerate() {
                            axpy(&mut gp[r * w..(r + 1) * w], &go[offset..offset + w], 1.0);
                        }
                    }
                    offset += w;
                }
            }
            Op::GatherRows { x, rows } => {
                if self.requires(*x) {
                    let d = out.shape()[1];
                    let gx = self.slot(grads, *x);
                    for (i, &r) in rows.iter().enumerate() {
                        axpy(&mut gx[r * d..(r + 1) * d], &g[i * d..(i + 1) * d], 1.0);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.requires(p) {
                        axpy(self.slot(grads, p), &g[offset..offset + len], 1.0);
                    }
                    offset += len;
                }
            }
            Op::Rope { x, positions, base } => {
                if self.requires(*x) {
                    let gt = Tensor::from_parts(out.shape().to_vec(), g.to_vec());
                    let back =
                        ops::rope(&gt, positions, *base, true).expect("shape checked in forward");
                    axpy(self.slot(grads, *x), back.data(), 1.0);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                active,
                probs,
            } => {
                if self.requires(*logits) {
                    let v = self.value(*logits).shape()[1];
                    let count = active.iter().filter(|&&a| a).count() as f64;
                    let coeff = g[0] / count;
                    let gl = self.slot(grads, *logits);
                    for r in (0..active.len()).filter(|&r| active[r]) {
                        let dst = &mut gl[r * v..(r + 1) * v];
                        axpy(dst, &probs[r * v..(r + 1) * v], coeff);
                        dst[targets[r]] -= coeff;
                    }
                }
            }
            Op::Sum(x) => {
                if self.requires(*x) {
                    for o in self.slot(grads, *x).iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Custom { x, backward } => {
                if self.requires(*x) {
                    let gt = Tensor::from_parts(out.shape().to_vec(), g.to_vec());
                    let gx = backward(self.value(*x), out, &gt);
                    axpy(self.slot(grads, *x), gx.data(), 1.0);
                }
            }
        }
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> &'a mut [f64] {
        let len = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }
}

#[inline]
fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}
