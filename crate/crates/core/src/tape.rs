//! Reverse-mode differentiation over [`Mat`] values.
//!
//! A [`Tape`] records every operation in creation order, which is already a
//! topological order, so [`Tape::backward`] is a single reverse sweep. Nodes
//! that do not depend on any `needs_grad` leaf are skipped during the sweep,
//! which keeps frozen-weight forward passes cheap.

use crate::mat::{dot, Mat};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Dot(Var, Var),
    Sum(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` for nodes the output does not depend on
/// or that do not lead back to a trainable leaf.
#[derive(Debug)]
pub struct Grads(Vec<Option<Mat>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.0[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.0[v.0].take()
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data[0]
    }

    fn push(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_bt(self.value(b));
        self.push(v, Op::MatMulBt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b), &[a, b])
    }

    /// Adds the `1×n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let bias = self.value(b);
        assert_eq!(bias.rows, 1, "add_row bias must be a row vector");
        let mut v = self.value(a).clone();
        assert_eq!(v.cols, bias.cols, "add_row width");
        for r in 0..v.rows {
            for (x, y) in v.row_mut(r).iter_mut().zip(&bias.data) {
                *x += y;
            }
        }
        self.push(v, Op::AddRow(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect();
        let v = Mat::from_vec(va.rows, va.cols, data);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scaled(s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let src = self.value(a);
        let v = Mat::from_vec(src.rows, src.cols, src.data.iter().map(|x| x + s).collect());
        self.push(v, Op::AddScalar(a), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let data = src
            .data
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let v = Mat::from_vec(src.rows, src.cols, data);
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let v = Mat::from_vec(src.rows, src.cols, src.data.iter().map(|x| x.max(0.0)).collect());
        self.push(v, Op::Relu(a), &[a])
    }

    /// Row-wise layer normalization with a `1×n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let src = self.value(x);
        let (rows, cols) = src.shape();
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        assert_eq!(g.len(), cols, "layer_norm gain width");
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let row = src.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = inv;
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat[r * cols + c] = h;
                out.data[r * cols + c] = h * g[c] + b[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Row-wise softmax. Columns with `mask[c] == false` get exactly zero
    /// weight and receive no gradient.
    pub fn softmax_masked(&mut self, x: Var, mask: Option<&[bool]>) -> Var {
        let src = self.value(x);
        let (rows, cols) = src.shape();
        if let Some(m) = mask {
            assert_eq!(m.len(), cols, "softmax mask width");
        }
        let keep = |c: usize| mask.map_or(true, |m| m[c]);
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let row = src.row(r);
            let max = (0..cols)
                .filter(|&c| keep(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for c in 0..cols {
                if keep(c) {
                    let e = (row[c] - max).exp();
                    out.data[r * cols + c] = e;
                    total += e;
                }
            }
            for v in out.row_mut(r) {
                *v /= total;
            }
        }
        self.push(out, Op::Softmax(x), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let src = self.value(x);
        assert!(start + len <= src.cols, "slice_cols out of range");
        let mut out = Mat::zeros(src.rows, len);
        for r in 0..src.rows {
            out.row_mut(r).copy_from_slice(&src.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(x, start), &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let src = self.value(x);
        assert!(start + len <= src.rows, "slice_rows out of range");
        let out = src.rows_slice(start, len);
        self.push(out, Op::SliceRows(x, start), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for p in parts {
                let m = self.value(*p);
                assert_eq!(m.rows, rows, "concat_cols row count");
                out.row_mut(r)[offset..offset + m.cols].copy_from_slice(m.row(r));
                offset += m.cols;
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.cols, cols, "concat_rows width");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Mat::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(out, Op::Gather(table, ids.to_vec()), &[table])
    }

    /// Scales every row to unit L2 norm. Panics on an all-zero row.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let mut out = src.clone();
        let mut norms = Vec::with_capacity(src.rows);
        for r in 0..src.rows {
            let n = crate::mat::norm(src.row(r));
            assert!(n > 0.0, "normalize_rows: zero row");
            for v in out.row_mut(r) {
                *v /= n;
            }
            norms.push(n);
        }
        self.push(out, Op::NormalizeRows { x, norms }, &[x])
    }

    /// Frobenius inner product, as a `1×1` node.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "dot shape");
        let v = Mat::from_vec(1, 1, vec![dot(&va.data, &vb.data)]);
        self.push(v, Op::Dot(a, b), &[a, b])
    }

    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let first = self.value(parts[0]);
        let mut v = Mat::zeros(first.rows, first.cols);
        for p in parts {
            v.add_assign(self.value(*p));
        }
        self.push(v, Op::Sum(parts.to_vec()), parts)
    }

    /// Reverse sweep from a `1×1` output.
    pub fn backward(&self, out: Var) -> Grads {
        assert_eq!(self.value(out).shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Mat::filled(1, 1, 1.0));

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads(grads)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let mut acc = |v: Var, d: Mat| {
            if !self.wants(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.matmul_bt(self.value(*b)));
                }
                if self.wants(*b) {
                    acc(*b, self.value(*a).matmul_at(g));
                }
            }
            Op::MatMulBt(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.matmul(self.value(*b)));
                }
                if self.wants(*b) {
                    acc(*b, g.matmul_at(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                if self.wants(*b) {
                    let mut col = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (c, v) in col.data.iter_mut().zip(g.row(r)) {
                            *c += v;
                        }
                    }
                    acc(*b, col);
                }
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scaled(-1.0));
            }
            Op::Scale(a, s) => acc(*a, g.scaled(*s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Gelu(a) => {
                let x = self.value(*a);
                let data = x
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&x, &gy)| {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                acc(*a, Mat::from_vec(x.rows, x.cols, data));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let data = x
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&x, &gy)| if x > 0.0 { gy } else { 0.0 })
                    .collect();
                acc(*a, Mat::from_vec(x.rows, x.cols, data));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = g.shape();
                let gv = &self.value(*gain).data;
                if self.wants(*x) {
                    let mut dx = Mat::zeros(rows, cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let h = &xhat[r * cols..(r + 1) * cols];
                        let gy = g.row(r);
                        let dh: Vec<f64> = gy.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h = dot(&dh, h);
                        let inv = inv_std[r];
                        for c in 0..cols {
                            dx.data[r * cols + c] = inv / n * (n * dh[c] - sum_dh - h[c] * sum_dh_h);
                        }
                    }
                    acc(*x, dx);
                }
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dg = Mat::zeros(1, cols);
                    let mut db = Mat::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            let gy = g.data[r * cols + c];
                            dg.data[c] += gy * xhat[r * cols + c];
                            db.data[c] += gy;
                        }
                    }
                    acc(*gain, dg);
                    acc(*bias, db);
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut dx = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let s = dot(yr, gr);
                    for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = yr[c] * (gr[c] - s);
                    }
                }
                acc(*a, dx);
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut dx = Mat::zeros(src.rows, src.cols);
                for r in 0..g.rows {
                    dx.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                acc(*a, dx);
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let mut dx = Mat::zeros(src.rows, src.cols);
                dx.data[start * src.cols..(start + g.rows) * src.cols].copy_from_slice(&g.data);
                acc(*a, dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols;
                    if self.wants(*p) {
                        let mut d = Mat::zeros(g.rows, w);
                        for r in 0..g.rows {
                            d.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        acc(*p, d);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let h = self.value(*p).rows;
                    if self.wants(*p) {
                        acc(*p, g.rows_slice(offset, h));
                    }
                    offset += h;
                }
            }
            Op::Gather(table, ids) => {
                let t = self.value(*table);
                let mut dt = Mat::zeros(t.rows, t.cols);
                for (r, &id) in ids.iter().enumerate() {
                    for (d, v) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                acc(*table, dt);
            }
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut dx = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let s = dot(yr, gr);
                    for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = (gr[c] - yr[c] * s) / norms[r];
                    }
                }
                acc(*x, dx);
            }
            Op::Dot(a, b) => {
                let s = g.data[0];
                if self.wants(*a) {
                    acc(*a, self.value(*b).scaled(s));
                }
                if self.wants(*b) {
                    acc(*b, self.value(*a).scaled(s));
                }
            }
            Op::Sum(parts) => {
                for p in parts {
                    acc(*p, g.clone());
                }
            }
        }
    }
}
