//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in execution order. Because nodes can
//! only reference earlier nodes, recording order is already a topological
//! order and [`Tape::backward`] simply walks it in reverse. A fresh tape is
//! built for every forward pass.
//!
//! ```
//! use code_core::autodiff::Tape;
//! use code_core::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = tape.mul_elem(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

use crate::error::{shape_err, Error, Result};
use crate::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};

/// Stabilizer added to squared row norms before normalizing.
pub const ROW_NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    MulElem(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    SoftmaxRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    MeanPoolRows(Var),
    FrobeniusNorm(Var),
    RowL2Normalize(Var),
    GatherRows(Var, Vec<usize>),
    CrossEntropy(Var, Vec<usize>),
    SoftTargetNll(Var, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation recorder for one forward pass.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`. Trainable leaves always have one (zero when the
    /// root does not depend on them); other nodes only when reached.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Tape {
    /// Finite-value checking follows the build profile: on in debug builds.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// When enabled, any operation producing NaN or ±∞ fails with
    /// [`Error::NonFinite`].
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, op_name: &'static str) -> Result<Var> {
        if self.check_finite {
            value.check_finite(op_name)?;
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::MulElem(a, b) => self.requires_grad(*a) || self.requires_grad(*b),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::SoftmaxRows(a)
            | Op::MeanPoolRows(a)
            | Op::FrobeniusNorm(a)
            | Op::RowL2Normalize(a)
            | Op::GatherRows(a, _)
            | Op::CrossEntropy(a, _)
            | Op::SoftTargetNll(a, _)
            | Op::SliceCols(a, _) => self.requires_grad(*a),
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => {
                parts.iter().any(|p| self.requires_grad(*p))
            }
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        self.push(out, Op::MatMulNt(a, b), "matmul_nt")
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        if !x.same_shape(y) {
            return Err(shape_err(
                name,
                format!("{:?} vs {:?}", x.shape(), y.shape()),
            ));
        }
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(p, q)| f(*p, *q))
            .collect();
        Tensor::new(x.rows(), x.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise(a, b, "add", |p, q| p + q)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise(a, b, "sub", |p, q| p - q)?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise(a, b, "mul_elem", |p, q| p * q)?;
        self.push(out, Op::MulElem(a, b), "mul_elem")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let x = self.value(a);
        let data = x.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(x.rows(), x.cols(), data)?;
        self.push(out, Op::Scale(a, factor), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Result<Var> {
        let x = self.value(a);
        let data = x.data().iter().map(|v| v + offset).collect();
        let out = Tensor::new(x.rows(), x.cols(), data)?;
        self.push(out, Op::AddScalar(a), "add_scalar")
    }

    /// `max(x, 0)`; the derivative at exactly 0 is taken as 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let data = x.data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::new(x.rows(), x.cols(), data)?;
        self.push(out, Op::Relu(a), "relu")
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::SoftmaxRows(a), "softmax_rows")
    }

    /// Stacks the parts vertically, first part on top.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty { op: "concat_rows" })?;
        let cols = self.value(*first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let t = self.value(*p);
            if t.cols() != cols {
                return Err(shape_err(
                    "concat_rows",
                    format!("{} columns vs {cols}", t.cols()),
                ));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(rows, cols, data)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    /// Places the parts side by side, first part leftmost.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty { op: "concat_cols" })?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for p in parts {
            let t = self.value(*p);
            if t.rows() != rows {
                return Err(shape_err(
                    "concat_cols",
                    format!("{} rows vs {rows}", t.rows()),
                ));
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::new(rows, cols, data)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Columns `start..start + width`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let x = self.value(a);
        if start + width > x.cols() {
            return Err(shape_err(
                "slice_cols",
                format!("columns {start}..{} of {}", start + width, x.cols()),
            ));
        }
        let mut data = Vec::with_capacity(x.rows() * width);
        for r in 0..x.rows() {
            data.extend_from_slice(&x.row(r)[start..start + width]);
        }
        let out = Tensor::new(x.rows(), width, data)?;
        self.push(out, Op::SliceCols(a, start), "slice_cols")
    }

    /// Column-wise mean over rows, producing `1×cols`.
    pub fn mean_pool_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rows() == 0 {
            return Err(Error::Empty {
                op: "mean_pool_rows",
            });
        }
        let mut acc = vec![0.0; x.cols()];
        for r in 0..x.rows() {
            for (s, v) in acc.iter_mut().zip(x.row(r)) {
                *s += v;
            }
        }
        let m = x.rows() as f64;
        acc.iter_mut().for_each(|s| *s /= m);
        let out = Tensor::new(1, x.cols(), acc)?;
        self.push(out, Op::MeanPoolRows(a), "mean_pool_rows")
    }

    /// `√(Σx²)` as a `1×1` tensor. The gradient at the zero tensor is 0.
    pub fn frobenius_norm(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).norm());
        self.push(out, Op::FrobeniusNorm(a), "frobenius_norm")
    }

    /// Divides each row by `√(Σrow² + ROW_NORM_EPS)`.
    pub fn row_l2_normalize(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..x.rows() {
            let n = row_norm(x.row(r));
            out.data_mut()[r * x.cols()..(r + 1) * x.cols()]
                .iter_mut()
                .for_each(|v| *v /= n);
        }
        self.push(out, Op::RowL2Normalize(a), "row_l2_normalize")
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * t.cols());
        for &id in ids {
            if id >= t.rows() {
                return Err(Error::TokenOutOfRange {
                    token: id,
                    vocab: t.rows(),
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(ids.len(), t.cols(), data)?;
        self.push(out, Op::GatherRows(table, ids.to_vec()), "gather_rows")
    }

    /// Mean over rows of `−log softmax(logits_i)[label_i]`, log-sum-exp stabilized.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        if z.rows() != labels.len() {
            return Err(shape_err(
                "cross_entropy",
                format!("{} logit rows for {} labels", z.rows(), labels.len()),
            ));
        }
        if labels.is_empty() {
            return Err(Error::Empty {
                op: "cross_entropy",
            });
        }
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            if label >= z.cols() {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: z.cols(),
                });
            }
            let row = z.row(i);
            total += log_sum_exp(row) - row[label];
        }
        let out = Tensor::scalar(total / labels.len() as f64);
        self.push(
            out,
            Op::CrossEntropy(logits, labels.to_vec()),
            "cross_entropy",
        )
    }

    /// Soft-target negative log-likelihood, averaged over rows:
    /// `−log(Σ_j w_ij e^{z_ij} / Σ_j e^{z_ij})`.
    ///
    /// Weights must be non-negative with at least one positive entry per row.
    pub fn soft_target_nll(&mut self, logits: Var, weights: &Tensor) -> Result<Var> {
        let z = self.value(logits);
        if !z.same_shape(weights) {
            return Err(shape_err(
                "soft_target_nll",
                format!("logits {:?} vs weights {:?}", z.shape(), weights.shape()),
            ));
        }
        if z.rows() == 0 {
            return Err(Error::Empty {
                op: "soft_target_nll",
            });
        }
        let mut total = 0.0;
        for i in 0..z.rows() {
            let row = z.row(i);
            let w = weights.row(i);
            if w.iter().any(|v| *v < 0.0) || !w.iter().any(|v| *v > 0.0) {
                return Err(shape_err(
                    "soft_target_nll",
                    format!("row {i} needs non-negative weights with a positive entry"),
                ));
            }
            total += log_sum_exp(row) - weighted_log_sum_exp(row, w);
        }
        let out = Tensor::scalar(total / z.rows() as f64);
        self.push(
            out,
            Op::SoftTargetNll(logits, weights.clone()),
            "soft_target_nll",
        )
    }

    /// Reverse sweep from a `1×1` root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let (rows, cols) = self.shape(root);
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarRoot { rows, cols });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (node, slot) in self.nodes.iter().zip(grads.iter_mut()) {
            if node.requires_grad && matches!(node.op, Op::Leaf) && slot.is_none() {
                let (r, c) = node.value.shape();
                *slot = Some(Tensor::zeros(r, c));
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(buf) = self.slot(*a, grads) {
                    matmul_nt_acc(gd, bv.data(), buf, m, n, k);
                }
                if let Some(buf) = self.slot(*b, grads) {
                    matmul_tn_acc(av.data(), gd, buf, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if let Some(buf) = self.slot(*a, grads) {
                    matmul_acc(gd, bv.data(), buf, m, n, k);
                }
                if let Some(buf) = self.slot(*b, grads) {
                    matmul_tn_acc(gd, av.data(), buf, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for p in [a, b] {
                    if let Some(buf) = self.slot(*p, grads) {
                        add_into(buf, gd);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(buf) = self.slot(*a, grads) {
                    add_into(buf, gd);
                }
                if let Some(buf) = self.slot(*b, grads) {
                    buf.iter_mut().zip(gd).for_each(|(o, v)| *o -= v);
                }
            }
            Op::MulElem(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(buf) = self.slot(*a, grads) {
                    for ((o, gv), bx) in buf.iter_mut().zip(gd).zip(bv) {
                        *o += gv * bx;
                    }
                }
                if let Some(buf) = self.slot(*b, grads) {
                    for ((o, gv), ax) in buf.iter_mut().zip(gd).zip(av) {
                        *o += gv * ax;
                    }
                }
            }
            Op::Scale(a, factor) => {
                if let Some(buf) = self.slot(*a, grads) {
                    buf.iter_mut().zip(gd).for_each(|(o, v)| *o += v * factor);
                }
            }
            Op::AddScalar(a) => {
                if let Some(buf) = self.slot(*a, grads) {
                    add_into(buf, gd);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                if let Some(buf) = self.slot(*a, grads) {
                    for ((o, gv), xv) in buf.iter_mut().zip(gd).zip(x) {
                        if *xv > 0.0 {
                            *o += gv;
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let cols = y.cols();
                if let Some(buf) = self.slot(*a, grads) {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &gd[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        let br = &mut buf[r * cols..(r + 1) * cols];
                        for ((o, yv), gv) in br.iter_mut().zip(yr).zip(gr) {
                            *o += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if let Some(buf) = self.slot(*p, grads) {
                        add_into(buf, &gd[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total_cols = y.cols();
                let mut col_offset = 0;
                for p in parts {
                    let pc = self.value(*p).cols();
                    if let Some(buf) = self.slot(*p, grads) {
                        for r in 0..y.rows() {
                            let src =
                                &gd[r * total_cols + col_offset..r * total_cols + col_offset + pc];
                            add_into(&mut buf[r * pc..(r + 1) * pc], src);
                        }
                    }
                    col_offset += pc;
                }
            }
            Op::SliceCols(a, start) => {
                let cols = self.value(*a).cols();
                let width = y.cols();
                if let Some(buf) = self.slot(*a, grads) {
                    for r in 0..y.rows() {
                        add_into(
                            &mut buf[r * cols + start..r * cols + start + width],
                            &gd[r * width..(r + 1) * width],
                        );
                    }
                }
            }
            Op::MeanPoolRows(a) => {
                let x = self.value(*a);
                let (m, cols) = x.shape();
                if let Some(buf) = self.slot(*a, grads) {
                    for r in 0..m {
                        for (o, gv) in buf[r * cols..(r + 1) * cols].iter_mut().zip(gd) {
                            *o += gv / m as f64;
                        }
                    }
                }
            }
            Op::FrobeniusNorm(a) => {
                let x = self.value(*a).data();
                let norm = y.item();
                if norm > 0.0 {
                    let s = gd[0] / norm;
                    if let Some(buf) = self.slot(*a, grads) {
                        buf.iter_mut().zip(x).for_each(|(o, v)| *o += s * v);
                    }
                }
            }
            Op::RowL2Normalize(a) => {
                let x = self.value(*a);
                let cols = x.cols();
                if let Some(buf) = self.slot(*a, grads) {
                    for r in 0..x.rows() {
                        let xr = x.row(r);
                        let gr = &gd[r * cols..(r + 1) * cols];
                        let n = row_norm(xr);
                        let dot: f64 = xr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        let c = dot / (n * n * n);
                        let br = &mut buf[r * cols..(r + 1) * cols];
                        for ((o, xv), gv) in br.iter_mut().zip(xr).zip(gr) {
                            *o += gv / n - xv * c;
                        }
                    }
                }
            }
            Op::GatherRows(table, ids) => {
                let cols = self.value(*table).cols();
                if let Some(buf) = self.slot(*table, grads) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(
                            &mut buf[id * cols..(id + 1) * cols],
                            &gd[r * cols..(r + 1) * cols],
                        );
                    }
                }
            }
            Op::CrossEntropy(logits, labels) => {
                let z = self.value(*logits);
                let cols = z.cols();
                let s = gd[0] / labels.len() as f64;
                if let Some(buf) = self.slot(*logits, grads) {
                    for (i, &label) in labels.iter().enumerate() {
                        let p = softmax_row(z.row(i));
                        let br = &mut buf[i * cols..(i + 1) * cols];
                        for (j, (o, pj)) in br.iter_mut().zip(&p).enumerate() {
                            let target = if j == label { 1.0 } else { 0.0 };
                            *o += s * (pj - target);
                        }
                    }
                }
            }
            Op::SoftTargetNll(logits, weights) => {
                let z = self.value(*logits);
                let cols = z.cols();
                let s = gd[0] / z.rows() as f64;
                if let Some(buf) = self.slot(*logits, grads) {
                    for i in 0..z.rows() {
                        let p = softmax_row(z.row(i));
                        let q = weighted_softmax_row(z.row(i), weights.row(i));
                        let br = &mut buf[i * cols..(i + 1) * cols];
                        for ((o, pj), qj) in br.iter_mut().zip(&p).zip(&q) {
                            *o += s * (pj - qj);
                        }
                    }
                }
            }
        }
    }

    /// Zero-initialized gradient buffer for `v`, if it requires one.
    fn slot<'g>(&self, v: Var, grads: &'g mut [Option<Tensor>]) -> Option<&'g mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let (r, c) = node.value.shape();
        Some(
            grads[v.0]
                .get_or_insert_with(|| Tensor::zeros(r, c))
                .data_mut(),
        )
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(o, v)| *o += v);
}

fn row_norm(row: &[f64]) -> f64 {
    (row.iter().map(|v| v * v).sum::<f64>() + ROW_NORM_EPS).sqrt()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `log Σ_j w_j e^{z_j}` over entries with `w_j > 0`.
fn weighted_log_sum_exp(row: &[f64], w: &[f64]) -> f64 {
    let max = row
        .iter()
        .zip(w)
        .filter(|(_, wv)| **wv > 0.0)
        .map(|(z, _)| *z)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row
        .iter()
        .zip(w)
        .filter(|(_, wv)| **wv > 0.0)
        .map(|(z, wv)| wv * (z - max).exp())
        .sum();
    max + sum.ln()
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn weighted_softmax_row(row: &[f64], w: &[f64]) -> Vec<f64> {
    let lse = weighted_log_sum_exp(row, w);
    row.iter()
        .zip(w)
        .map(|(z, wv)| if *wv > 0.0 { wv * (z - lse).exp() } else { 0.0 })
        .collect()
}

/// Row-wise softmax of a plain tensor.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    let cols = x.cols();
    for r in 0..x.rows() {
        let p = softmax_row(x.row(r));
        out.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(&p);
    }
    out
}
