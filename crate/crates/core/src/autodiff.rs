//! Tape-based reverse-mode differentiation over dense row-major `f64` matrices.
//!
//! A [`Tape`] records every operation executed through it. Values live on the
//! tape and are addressed through lightweight [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar node walks the tape in reverse and returns the
//! accumulated [`Gradients`]. Nodes created with [`Tape::constant`] or
//! [`Tape::detach`] never receive or forward gradient.

use crate::error::{Error, Result};

/// Lower clamp applied to the input of [`Tape::log`].
pub const LOG_CLAMP: f64 = 1e-12;

/// Rows whose norm falls below this get zero gradient in [`Tape::row_l2_norm`].
pub const NORM_EPS: f64 = 1e-12;

/// Dense row-major matrix of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::contract(format!(
                "tensor dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::contract(format!(
                "tensor {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "tensor dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, value)
    }

    /// Builds a tensor from nested rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        assert!(!rows.is_empty(), "at least one row required");
        let cols = rows[0].as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data).expect("valid dimensions")
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.shape(), (1, 1));
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the largest entry of row `r`; ties resolve to the lowest index.
    pub fn argmax_row(&self, r: usize) -> usize {
        let row = self.row(r);
        let mut best = 0;
        for (k, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = k;
            }
        }
        best
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn shape(self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Square(usize),
    Relu(usize),
    Log(usize),
    RowL2Norm(usize),
    SoftmaxRows(usize),
    SumAll(usize),
    MeanAll(usize),
    MeanOverRows(usize),
    RowSum(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations. Single-threaded; one tape per batch.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient slots produced by [`Tape::backward`], one per tape node.
#[derive(Debug, Clone)]
pub struct Gradients {
    slots: Vec<Tensor>,
}

impl Gradients {
    /// Gradient with respect to `var`. Nodes the root does not depend on hold zeros.
    pub fn wrt(&self, var: Var) -> &Tensor {
        &self.slots[var.id]
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let var = Var {
            id: self.nodes.len(),
            rows: value.rows,
            cols: value.cols,
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        var
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Same values as `x`, cut off from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.id].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.cols != b.rows {
            return Err(Error::Shape {
                op: "matmul",
                left: a.shape(),
                right: b.shape(),
            });
        }
        let out = {
            let av = &self.nodes[a.id].value;
            let bv = &self.nodes[b.id].value;
            matmul_raw(av, bv)
        };
        let rg = self.rg(&[a.id, b.id]);
        Ok(self.push(out, Op::MatMul(a.id, b.id), rg))
    }

    /// Adds the `1 x m` row `b` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        if b.rows != 1 || b.cols != x.cols {
            return Err(Error::Shape {
                op: "add_bias",
                left: x.shape(),
                right: b.shape(),
            });
        }
        let mut out = self.nodes[x.id].value.clone();
        let bv = &self.nodes[b.id].value.data;
        for row in out.data.chunks_mut(x.cols) {
            for (o, bb) in row.iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let rg = self.rg(&[x.id, b.id]);
        Ok(self.push(out, Op::AddBias(x.id, b.id), rg))
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        if a.shape() != b.shape() {
            return Err(Error::Shape {
                op: name,
                left: a.shape(),
                right: b.shape(),
            });
        }
        let av = &self.nodes[a.id].value;
        let bv = &self.nodes[b.id].value;
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor {
            rows: a.rows,
            cols: a.cols,
            data,
        };
        let rg = self.rg(&[a.id, b.id]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a.id, b.id), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a.id, b.id), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a.id, b.id), |x, y| x * y)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.nodes[x.id].value.map(f);
        let rg = self.rg(&[x.id]);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x.id, c), |v| v * c)
    }

    /// Adds the constant `c` to every entry.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Offset(x.id), |v| v + c)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x.id), |v| v * v)
    }

    /// `max(0, x)`; the subgradient at zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x.id), |v| if v > 0.0 { v } else { 0.0 })
    }

    /// Natural log of `max(x, LOG_CLAMP)`.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x.id), |v| v.max(LOG_CLAMP).ln())
    }

    /// Euclidean norm of each row, as an `n x 1` column.
    pub fn row_l2_norm(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.id].value;
        let data = xv
            .data
            .chunks(x.cols)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let out = Tensor {
            rows: x.rows,
            cols: 1,
            data,
        };
        let rg = self.rg(&[x.id]);
        self.push(out, Op::RowL2Norm(x.id), rg)
    }

    /// Per-row softmax, shifted by the row maximum before exponentiation.
    pub fn softmax_rows(&mut self, z: Var) -> Var {
        let out = softmax_raw(&self.nodes[z.id].value);
        let rg = self.rg(&[z.id]);
        self.push(out, Op::SoftmaxRows(z.id), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.nodes[x.id].value.data.iter().sum();
        let rg = self.rg(&[x.id]);
        self.push(Tensor::scalar(s), Op::SumAll(x.id), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.id].value;
        let s = v.data.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[x.id]);
        self.push(Tensor::scalar(s), Op::MeanAll(x.id), rg)
    }

    /// Column means: `n x m -> 1 x m`.
    pub fn mean_over_rows(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.id].value;
        let mut data = vec![0.0; x.cols];
        for row in v.data.chunks(x.cols) {
            for (d, r) in data.iter_mut().zip(row) {
                *d += r;
            }
        }
        let n = x.rows as f64;
        data.iter_mut().for_each(|d| *d /= n);
        let out = Tensor {
            rows: 1,
            cols: x.cols,
            data,
        };
        let rg = self.rg(&[x.id]);
        self.push(out, Op::MeanOverRows(x.id), rg)
    }

    /// Row sums: `n x m -> n x 1`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.id].value;
        let data = v.data.chunks(x.cols).map(|r| r.iter().sum()).collect();
        let out = Tensor {
            rows: x.rows,
            cols: 1,
            data,
        };
        let rg = self.rg(&[x.id]);
        self.push(out, Op::RowSum(x.id), rg)
    }

    /// Reverse sweep from the scalar `root`, seeded with gradient 1.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if root.id >= self.nodes.len() {
            return Err(Error::contract("backward root is not on this tape"));
        }
        if root.shape() != (1, 1) {
            return Err(Error::contract(format!(
                "backward root must be 1x1, got {}x{}",
                root.rows, root.cols
            )));
        }
        let mut slots: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.rows, n.value.cols))
            .collect();
        slots[root.id].data[0] = 1.0;

        for id in (0..=root.id).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = std::mem::replace(&mut slots[id], Tensor::zeros(1, 1));
            if g.data.iter().all(|&v| v == 0.0) {
                slots[id] = g;
                continue;
            }
            self.propagate(node, &g, &mut slots);
            slots[id] = g;
        }
        Ok(Gradients { slots })
    }

    fn accumulate(&self, slots: &mut [Tensor], id: usize, contrib: &Tensor) {
        if self.nodes[id].requires_grad {
            slots[id].add_assign(contrib);
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, slots: &mut [Tensor]) {
        let val = |i: usize| &self.nodes[i].value;
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a].requires_grad {
                    let ga = matmul_raw(g, &transpose(val(b)));
                    slots[a].add_assign(&ga);
                }
                if self.nodes[b].requires_grad {
                    let gb = matmul_raw(&transpose(val(a)), g);
                    slots[b].add_assign(&gb);
                }
            }
            Op::AddBias(x, b) => {
                self.accumulate(slots, x, g);
                if self.nodes[b].requires_grad {
                    let mut gb = Tensor::zeros(1, g.cols);
                    for row in g.data.chunks(g.cols) {
                        for (d, r) in gb.data.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    slots[b].add_assign(&gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(slots, a, g);
                self.accumulate(slots, b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(slots, a, g);
                if self.nodes[b].requires_grad {
                    slots[b].add_assign(&g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[a].requires_grad {
                    let ga = hadamard(g, val(b));
                    slots[a].add_assign(&ga);
                }
                if self.nodes[b].requires_grad {
                    let gb = hadamard(g, val(a));
                    slots[b].add_assign(&gb);
                }
            }
            Op::Scale(x, c) => self.accumulate(slots, x, &g.map(|v| v * c)),
            Op::Offset(x) => self.accumulate(slots, x, g),
            Op::Square(x) => {
                let gx = zip(g, val(x), |gv, xv| 2.0 * xv * gv);
                self.accumulate(slots, x, &gx);
            }
            Op::Relu(x) => {
                let gx = zip(g, val(x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                self.accumulate(slots, x, &gx);
            }
            Op::Log(x) => {
                let gx = zip(g, val(x), |gv, xv| if xv > LOG_CLAMP { gv / xv } else { 0.0 });
                self.accumulate(slots, x, &gx);
            }
            Op::RowL2Norm(x) => {
                let xv = val(x);
                let norms = &node.value;
                let mut gx = Tensor::zeros(xv.rows, xv.cols);
                for r in 0..xv.rows {
                    let n = norms.data[r];
                    if n < NORM_EPS {
                        continue;
                    }
                    let s = g.data[r] / n;
                    for c in 0..xv.cols {
                        gx.data[r * xv.cols + c] = s * xv.get(r, c);
                    }
                }
                self.accumulate(slots, x, &gx);
            }
            Op::SoftmaxRows(z) => {
                let y = &node.value;
                let mut gz = Tensor::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..y.cols {
                        gz.data[r * y.cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(slots, z, &gz);
            }
            Op::SumAll(x) => {
                let (r, c) = val(x).shape();
                self.accumulate(slots, x, &Tensor::filled(r, c, g.data[0]));
            }
            Op::MeanAll(x) => {
                let (r, c) = val(x).shape();
                let v = g.data[0] / (r * c) as f64;
                self.accumulate(slots, x, &Tensor::filled(r, c, v));
            }
            Op::MeanOverRows(x) => {
                let (r, c) = val(x).shape();
                let inv = 1.0 / r as f64;
                let mut gx = Tensor::zeros(r, c);
                for row in gx.data.chunks_mut(c) {
                    for (d, gv) in row.iter_mut().zip(&g.data) {
                        *d = gv * inv;
                    }
                }
                self.accumulate(slots, x, &gx);
            }
            Op::RowSum(x) => {
                let (r, c) = val(x).shape();
                let mut gx = Tensor::zeros(r, c);
                for (i, row) in gx.data.chunks_mut(c).enumerate() {
                    row.iter_mut().for_each(|d| *d = g.data[i]);
                }
                self.accumulate(slots, x, &gx);
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        rows: n,
        cols: m,
        data: out,
    }
}

pub(crate) fn softmax_raw(z: &Tensor) -> Tensor {
    let mut out = z.clone();
    for row in out.data.chunks_mut(z.cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

fn transpose(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(t.cols, t.rows);
    for r in 0..t.rows {
        for c in 0..t.cols {
            out.data[c * t.rows + r] = t.data[r * t.cols + c];
        }
    }
    out
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    zip(a, b, |x, y| x * y)
}
