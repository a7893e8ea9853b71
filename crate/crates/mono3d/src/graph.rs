//! Reverse-mode automatic differentiation over dense f64 matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value and enough bookkeeping to run the chain rule backwards. Feature maps
//! are `(positions, channels)` matrices, so one matrix multiply covers linear
//! layers, attention, and 1x1 convolutions alike; spatial ops (patchify,
//! bilinear resize) carry their grid shape explicitly.
//!
//! Gradients flow only through nodes reachable from a trainable parameter;
//! everything else is skipped during the backward sweep.

use crate::Mat;
use std::collections::HashMap;

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// (n,c) + (1,c), broadcast over rows.
    AddRow(Var, Var),
    /// (n,c) * (1,c), broadcast over rows.
    MulRow(Var, Var),
    /// (n,c) + (n,1), broadcast over columns.
    AddCol(Var, Var),
    /// (n,c) * (n,1), broadcast over columns.
    MulCol(Var, Var),
    /// (n,c) + (1,1).
    AddScalar(Var, Var),
    /// (n,c) * (1,1).
    MulScalar(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Gelu(Var),
    SmoothL1(Var),
    Exp(Var),
    Ln(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Recip(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var, f64),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    SumAll(Var),
    RowSums(Var),
    ColSums(Var),
    /// Per-row minimum with the argmin recorded at forward time.
    MinCols(Var, Vec<usize>),
    /// Non-overlapping p x p patches of an (h*w, c) map -> (h/p * w/p, p*p*c).
    Patchify { x: Var, h: usize, w: usize, p: usize },
    /// Bilinear resample of an (h*w, c) map to (oh*ow, c).
    BilinearResize { x: Var, h: usize, w: usize, oh: usize, ow: usize },
    /// Cross product of two (1,3) rows.
    Cross3(Var, Var),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Gradients from one backward sweep, indexed by [`Var`].
pub struct Grads {
    by_node: Vec<Option<Mat>>,
}

impl Grads {
    pub fn for_var(&self, v: Var) -> Option<&Mat> {
        self.by_node[v.0].as_ref()
    }

    pub fn for_param(&self, g: &Graph, key: usize) -> Option<&Mat> {
        g.param_vars.get(&key).and_then(|v| self.for_var(*v))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<usize, Var>,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn smooth_l1_scalar(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_grad_scalar(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Source row/pair weights for one output coordinate of a bilinear resize.
fn resize_taps(src: usize, dst: usize, i: usize) -> (usize, usize, f64) {
    let s = (i as f64 + 0.5) * src as f64 / dst as f64 - 0.5;
    if s <= 0.0 || src == 1 {
        (0, 0, 0.0)
    } else if s >= (src - 1) as f64 {
        (src - 1, src - 1, 0.0)
    } else {
        let lo = s.floor() as usize;
        (lo, lo + 1, s - lo as f64)
    }
}

fn cross3(a: &[f64], b: &[f64]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Value of a (1,1) node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on a non-scalar node");
        m[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar_constant(&mut self, x: f64) -> Var {
        self.constant(Mat::from_elem((1, 1), x))
    }

    /// Registers a parameter leaf. Repeated calls with the same key return
    /// the same node, so gradients accumulate per parameter, not per use.
    pub fn param(&mut self, key: usize, value: &Mat, trainable: bool) -> Var {
        if let Some(v) = self.param_vars.get(&key) {
            return *v;
        }
        let v = self.push(value.clone(), Op::Param, trainable);
        self.param_vars.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.value(a).dim();
        let (br, bc) = self.value(b).dim();
        assert_eq!(ac, br, "matmul {}x{} by {}x{}", ar, ac, br, bc);
        let value = self.value(a).dot(self.value(b));
        let needs = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), needs)
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, op: fn(Var, Var) -> Op, f: fn(f64, f64) -> f64) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "elementwise shape mismatch");
        let mut value = self.value(a).clone();
        value.zip_mut_with(self.value(b), |x, y| *x = f(*x, *y));
        let needs = self.ng(a) || self.ng(b);
        self.push(value, op(a, b), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, Op::Mul, |x, y| x * y)
    }

    fn broadcast_row(&mut self, a: Var, b: Var, op: fn(Var, Var) -> Op, f: fn(f64, f64) -> f64) -> Var {
        let (_, ac) = self.value(a).dim();
        assert_eq!(self.value(b).dim(), (1, ac), "row broadcast shape mismatch");
        let brow = self.value(b).row(0).to_owned();
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            row.zip_mut_with(&brow, |x, y| *x = f(*x, *y));
        }
        let needs = self.ng(a) || self.ng(b);
        self.push(value, op(a, b), needs)
    }

    /// `(n,c) + (1,c)`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        self.broadcast_row(a, b, Op::AddRow, |x, y| x + y)
    }

    /// `(n,c) * (1,c)`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        self.broadcast_row(a, b, Op::MulRow, |x, y| x * y)
    }

    fn broadcast_col(&mut self, a: Var, b: Var, op: fn(Var, Var) -> Op, f: fn(f64, f64) -> f64) -> Var {
        let (ar, _) = self.value(a).dim();
        assert_eq!(self.value(b).dim(), (ar, 1), "column broadcast shape mismatch");
        let bcol: Vec<f64> = self.value(b).column(0).to_vec();
        let mut value = self.value(a).clone();
        for (i, mut row) in value.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|x| f(x, bcol[i]));
        }
        let needs = self.ng(a) || self.ng(b);
        self.push(value, op(a, b), needs)
    }

    /// `(n,c) + (n,1)`.
    pub fn add_col(&mut self, a: Var, b: Var) -> Var {
        self.broadcast_col(a, b, Op::AddCol, |x, y| x + y)
    }

    /// `(n,c) * (n,1)`.
    pub fn mul_col(&mut self, a: Var, b: Var) -> Var {
        self.broadcast_col(a, b, Op::MulCol, |x, y| x * y)
    }

    /// `(n,c) + (1,1)`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).dim(), (1, 1), "add_scalar with non-scalar");
        let sv = self.value(s)[[0, 0]];
        let value = self.value(a).mapv(|x| x + sv);
        let needs = self.ng(a) || self.ng(s);
        self.push(value, Op::AddScalar(a, s), needs)
    }

    /// `(n,c) * (1,1)`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).dim(), (1, 1), "mul_scalar with non-scalar");
        let sv = self.value(s)[[0, 0]];
        let value = self.value(a).mapv(|x| x * sv);
        let needs = self.ng(a) || self.ng(s);
        self.push(value, Op::MulScalar(a, s), needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).mapv(|x| x * c);
        let needs = self.ng(a);
        self.push(value, Op::Scale(a, c), needs)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).mapv(|x| x + c);
        let needs = self.ng(a);
        self.push(value, Op::Offset(a), needs)
    }

    fn unary(&mut self, a: Var, op: fn(Var) -> Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).mapv(&f);
        let needs = self.ng(a);
        self.push(value, op(a), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu, |x| x.max(0.0))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu, gelu_scalar)
    }

    /// Elementwise Huber penalty: `0.5x^2` inside the unit interval, `|x|-0.5` outside.
    pub fn smooth_l1(&mut self, a: Var) -> Var {
        self.unary(a, Op::SmoothL1, smooth_l1_scalar)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp, f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln, f64::ln)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid, sigmoid_scalar)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt, f64::sqrt)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Op::Recip, f64::recip)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let needs = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), needs)
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)`, no affine term.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let c = x.ncols() as f64;
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            let mean = row.sum() / c;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
        }
        let needs = self.ng(a);
        self.push(value, Op::LayerNormRows(a, eps), needs)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let needs = self.ng(a);
        self.push(value, Op::Transpose(a), needs)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.value(parts[0]).ncols();
        let n: usize = parts.iter().map(|p| self.value(*p).nrows()).sum();
        let mut value = Mat::zeros((n, c));
        let mut at = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.ncols(), c, "concat_rows column mismatch");
            value.slice_mut(ndarray::s![at..at + m.nrows(), ..]).assign(m);
            at += m.nrows();
        }
        let needs = parts.iter().any(|p| self.ng(*p));
        self.push(value, Op::ConcatRows(parts.to_vec()), needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).nrows();
        let c: usize = parts.iter().map(|p| self.value(*p).ncols()).sum();
        let mut value = Mat::zeros((n, c));
        let mut at = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.nrows(), n, "concat_cols row mismatch");
            value.slice_mut(ndarray::s![.., at..at + m.ncols()]).assign(m);
            at += m.ncols();
        }
        let needs = parts.iter().any(|p| self.ng(*p));
        self.push(value, Op::ConcatCols(parts.to_vec()), needs)
    }

    pub fn slice_rows(&mut self, a: Var, from: usize, to: usize) -> Var {
        assert!(from < to && to <= self.value(a).nrows(), "slice_rows out of range");
        let value = self.value(a).slice(ndarray::s![from..to, ..]).to_owned();
        let needs = self.ng(a);
        self.push(value, Op::SliceRows(a, from, to), needs)
    }

    pub fn slice_cols(&mut self, a: Var, from: usize, to: usize) -> Var {
        assert!(from < to && to <= self.value(a).ncols(), "slice_cols out of range");
        let value = self.value(a).slice(ndarray::s![.., from..to]).to_owned();
        let needs = self.ng(a);
        self.push(value, Op::SliceCols(a, from, to), needs)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        let needs = self.ng(a);
        self.push(value, Op::SumAll(a), needs)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum within each row: `(n,c) -> (n,1)`.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = Mat::zeros((x.nrows(), 1));
        for (i, row) in x.rows().into_iter().enumerate() {
            value[[i, 0]] = row.sum();
        }
        let needs = self.ng(a);
        self.push(value, Op::RowSums(a), needs)
    }

    /// Sum down each column: `(n,c) -> (1,c)`.
    pub fn col_sums(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = Mat::zeros((1, x.ncols()));
        for row in x.rows() {
            for (j, v) in row.iter().enumerate() {
                value[[0, j]] += v;
            }
        }
        let needs = self.ng(a);
        self.push(value, Op::ColSums(a), needs)
    }

    /// Minimum within each row: `(n,c) -> (n,1)`. Ties break to the first column.
    pub fn min_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = Mat::zeros((x.nrows(), 1));
        let mut argmins = Vec::with_capacity(x.nrows());
        for (i, row) in x.rows().into_iter().enumerate() {
            let (mut best_j, mut best) = (0usize, row[0]);
            for (j, v) in row.iter().enumerate().skip(1) {
                if *v < best {
                    best = *v;
                    best_j = j;
                }
            }
            value[[i, 0]] = best;
            argmins.push(best_j);
        }
        let needs = self.ng(a);
        self.push(value, Op::MinCols(a, argmins), needs)
    }

    /// Rearranges an `(h*w, c)` row-major map into non-overlapping `p x p`
    /// patches: output `(h/p * w/p, p*p*c)` with column `(dr*p + dc)*c + ch`.
    pub fn patchify(&mut self, a: Var, h: usize, w: usize, p: usize) -> Var {
        let x = self.value(a);
        let c = x.ncols();
        assert_eq!(x.nrows(), h * w, "patchify input rows != h*w");
        assert!(p > 0 && h % p == 0 && w % p == 0, "patchify grid not divisible by {}", p);
        let (oh, ow) = (h / p, w / p);
        let mut value = Mat::zeros((oh * ow, p * p * c));
        for or in 0..oh {
            for oc in 0..ow {
                let dst = or * ow + oc;
                for dr in 0..p {
                    for dc in 0..p {
                        let src = (or * p + dr) * w + (oc * p + dc);
                        let base = (dr * p + dc) * c;
                        for ch in 0..c {
                            value[[dst, base + ch]] = x[[src, ch]];
                        }
                    }
                }
            }
        }
        let needs = self.ng(a);
        self.push(value, Op::Patchify { x: a, h, w, p }, needs)
    }

    /// Bilinear resample of an `(h*w, c)` row-major map to `(oh*ow, c)`,
    /// sampling at pixel centers with edge clamping.
    pub fn bilinear_resize(&mut self, a: Var, h: usize, w: usize, oh: usize, ow: usize) -> Var {
        let x = self.value(a);
        let c = x.ncols();
        assert_eq!(x.nrows(), h * w, "bilinear_resize input rows != h*w");
        assert!(oh > 0 && ow > 0);
        let mut value = Mat::zeros((oh * ow, c));
        for i in 0..oh {
            let (r0, r1, wy) = resize_taps(h, oh, i);
            for j in 0..ow {
                let (c0, c1, wx) = resize_taps(w, ow, j);
                let dst = i * ow + j;
                for ch in 0..c {
                    let v00 = x[[r0 * w + c0, ch]];
                    let v01 = x[[r0 * w + c1, ch]];
                    let v10 = x[[r1 * w + c0, ch]];
                    let v11 = x[[r1 * w + c1, ch]];
                    value[[dst, ch]] = (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01)
                        + wy * ((1.0 - wx) * v10 + wx * v11);
                }
            }
        }
        let needs = self.ng(a);
        self.push(value, Op::BilinearResize { x: a, h, w, oh, ow }, needs)
    }

    /// Cross product of two (1,3) rows.
    pub fn cross3(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), (1, 3));
        assert_eq!(self.value(b).dim(), (1, 3));
        let av: Vec<f64> = self.value(a).row(0).to_vec();
        let bv: Vec<f64> = self.value(b).row(0).to_vec();
        let cr = cross3(&av, &bv);
        let value = Mat::from_shape_vec((1, 3), cr.to_vec()).unwrap();
        let needs = self.ng(a) || self.ng(b);
        self.push(value, Op::Cross3(a, b), needs)
    }

    /// Elementwise division, `a / b`.
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let r = self.recip(b);
        self.mul(a, r)
    }

    /// Runs the chain rule backwards from a (1,1) loss node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward from a non-scalar node");
        let mut by_node: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        by_node[loss.0] = Some(Mat::from_elem((1, 1), 1.0));

        for i in (0..self.nodes.len()).rev() {
            if by_node[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = by_node[i].take().unwrap();
            self.accumulate(i, &g, &mut by_node);
            by_node[i] = Some(g);
        }
        Grads { by_node }
    }

    fn accumulate(&self, i: usize, g: &Mat, out: &mut [Option<Mat>]) {
        fn acc(slot: &mut Option<Mat>, delta: Mat) {
            match slot {
                Some(m) => *m += &delta,
                None => *slot = Some(delta),
            }
        }
        let val = |v: Var| &self.nodes[v.0].value;
        let ng = |v: Var| self.nodes[v.0].needs_grad;

        match &self.nodes[i].op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                if ng(*a) {
                    acc(&mut out[a.0], g.dot(&val(*b).t()));
                }
                if ng(*b) {
                    acc(&mut out[b.0], val(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                if ng(*a) {
                    acc(&mut out[a.0], g.clone());
                }
                if ng(*b) {
                    acc(&mut out[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if ng(*a) {
                    acc(&mut out[a.0], g.clone());
                }
                if ng(*b) {
                    acc(&mut out[b.0], g.mapv(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if ng(*a) {
                    acc(&mut out[a.0], g * val(*b));
                }
                if ng(*b) {
                    acc(&mut out[b.0], g * val(*a));
                }
            }
            Op::AddRow(a, b) => {
                if ng(*a) {
                    acc(&mut out[a.0], g.clone());
                }
                if ng(*b) {
                    let mut gb = Mat::zeros((1, g.ncols()));
                    for row in g.rows() {
                        for (j, v) in row.iter().enumerate() {
                            gb[[0, j]] += v;
                        }
                    }
                    acc(&mut out[b.0], gb);
                }
            }
            Op::MulRow(a, b) => {
                if ng(*a) {
                    let brow = val(*b).row(0).to_owned();
                    let mut ga = g.clone();
                    for mut row in ga.rows_mut() {
                        row.zip_mut_with(&brow, |x, y| *x *= y);
                    }
                    acc(&mut out[a.0], ga);
                }
                if ng(*b) {
                    let prod = g * val(*a);
                    let mut gb = Mat::zeros((1, g.ncols()));
                    for row in prod.rows() {
                        for (j, v) in row.iter().enumerate() {
                            gb[[0, j]] += v;
                        }
                    }
                    acc(&mut out[b.0], gb);
                }
            }
            Op::AddCol(a, b) => {
                if ng(*a) {
                    acc(&mut out[a.0], g.clone());
                }
                if ng(*b) {
                    let mut gb = Mat::zeros((g.nrows(), 1));
                    for (i2, row) in g.rows().into_iter().enumerate() {
                        gb[[i2, 0]] = row.sum();
                    }
                    acc(&mut out[b.0], gb);
                }
            }
            Op::MulCol(a, b) => {
                if ng(*a) {
                    let bcol: Vec<f64> = val(*b).column(0).to_vec();
                    let mut ga = g.clone();
                    for (i2, mut row) in ga.rows_mut().into_iter().enumerate() {
                        row.mapv_inplace(|x| x * bcol[i2]);
                    }
                    acc(&mut out[a.0], ga);
                }
                if ng(*b) {
                    let prod = g * val(*a);
                    let mut gb = Mat::zeros((g.nrows(), 1));
                    for (i2, row) in prod.rows().into_iter().enumerate() {
                        gb[[i2, 0]] = row.sum();
                    }
                    acc(&mut out[b.0], gb);
                }
            }
            Op::AddScalar(a, s) => {
                if ng(*a) {
                    acc(&mut out[a.0], g.clone());
                }
                if ng(*s) {
                    acc(&mut out[s.0], Mat::from_elem((1, 1), g.sum()));
                }
            }
            Op::MulScalar(a, s) => {
                if ng(*a) {
                    let sv = val(*s)[[0, 0]];
                    acc(&mut out[a.0], g.mapv(|x| x * sv));
                }
                if ng(*s) {
                    acc(&mut out[s.0], Mat::from_elem((1, 1), (g * val(*a)).sum()));
                }
            }
            Op::Scale(a, c) => {
                if ng(*a) {
                    acc(&mut out[a.0], g.mapv(|x| x * c));
                }
            }
            Op::Offset(a) => {
                if ng(*a) {
                    acc(&mut out[a.0], g.clone());
                }
            }
            Op::Relu(a) => {
                if ng(*a) {
                    let mut ga = g.clone();
                    ga.zip_mut_with(val(*a), |x, v| {
                        if *v <= 0.0 {
                            *x = 0.0;
                        }
                    });
                    acc(&mut out[a.0], ga);
                }
            }
            Op::Gelu(a) => {
                if ng(*a) {
                    let mut ga = g.clone();
                    ga.zip_mut_with(val(*a), |x, v| *x *= gelu_grad_scalar(*v));
                    acc(&mut out[a.0], ga);
                }
            }
            Op::SmoothL1(a) => {
                if ng(*a) {
                    let mut ga = g.clone();
                    ga.zip_mut_with(val(*a), |x, v| *x *= smooth_l1_grad_scalar(*v));
                    acc(&mut out[a.0], ga);
                }
            }
            Op::Exp(a) => {
                if ng(*a) {
                    acc(&mut out[a.0], g * &self.nodes[i].value);
                }
            }
            Op::Ln(a) => {
                if ng(*a) {
                    let mut ga = g.clone();
                    ga.zip_mut_with(val(*a), |x, v| *x /= v);
                    acc(&mut out[a.0], ga);
                }
            }
            Op::Sigmoid(a) => {
                if ng(*a) {
                    let mut ga = g.clone();
                    ga.zip_mut_with(&self.nodes[i].value, |x, y| *x *= y * (1.0 - y));
                    acc(&mut out[a.0], ga);
                }
            }
            Op::Sqrt(a) => {
                if ng(*a) {
                    let mut ga = g.clone();
                    ga.zip_mut_with(&self.nodes[i].value, |x, y| *x *= 0.5 / y);
                    acc(&mut out[a.0], ga);
                }
            }
            Op::Recip(a) => {
                if ng(*a) {
                    let mut ga = g.clone();
                    ga.zip_mut_with(&self.nodes[i].value, |x, y| *x *= -y * y);
                    acc(&mut out[a.0], ga);
                }
            }
            Op::SoftmaxRows(a) => {
                if ng(*a) {
                    let y = &self.nodes[i].value;
                    let mut ga = Mat::zeros(g.raw_dim());
                    for (r, grow) in g.rows().into_iter().enumerate() {
                        let yrow = y.row(r);
                        let dot: f64 = grow.iter().zip(yrow.iter()).map(|(gv, yv)| gv * yv).sum();
                        for (j, yv) in yrow.iter().enumerate() {
                            ga[[r, j]] = yv * (grow[j] - dot);
                        }
                    }
                    acc(&mut out[a.0], ga);
                }
            }
            Op::LayerNormRows(a, eps) => {
                if ng(*a) {
                    let x = val(*a);
                    let y = &self.nodes[i].value;
                    let c = x.ncols() as f64;
                    let mut ga = Mat::zeros(g.raw_dim());
                    for r in 0..x.nrows() {
                        let xrow = x.row(r);
                        let mean = xrow.sum() / c;
                        let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
                        let inv = 1.0 / (var + eps).sqrt();
                        let grow = g.row(r);
                        let yrow = y.row(r);
                        let gm = grow.sum() / c;
                        let gym: f64 =
                            grow.iter().zip(yrow.iter()).map(|(gv, yv)| gv * yv).sum::<f64>() / c;
                        for j in 0..x.ncols() {
                            ga[[r, j]] = inv * (grow[j] - gm - yrow[j] * gym);
                        }
                    }
                    acc(&mut out[a.0], ga);
                }
            }
            Op::Transpose(a) => {
                if ng(*a) {
                    acc(&mut out[a.0], g.t().to_owned());
                }
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for p in parts {
                    let n = val(*p).nrows();
                    if ng(*p) {
                        acc(&mut out[p.0], g.slice(ndarray::s![at..at + n, ..]).to_owned());
                    }
                    at += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let c = val(*p).ncols();
                    if ng(*p) {
                        acc(&mut out[p.0], g.slice(ndarray::s![.., at..at + c]).to_owned());
                    }
                    at += c;
                }
            }
            Op::SliceRows(a, from, to) => {
                if ng(*a) {
                    let mut ga = Mat::zeros(val(*a).raw_dim());
                    ga.slice_mut(ndarray::s![*from..*to, ..]).assign(g);
                    acc(&mut out[a.0], ga);
                }
            }
            Op::SliceCols(a, from, to) => {
                if ng(*a) {
                    let mut ga = Mat::zeros(val(*a).raw_dim());
                    ga.slice_mut(ndarray::s![.., *from..*to]).assign(g);
                    acc(&mut out[a.0], ga);
                }
            }
            Op::SumAll(a) => {
                if ng(*a) {
                    acc(&mut out[a.0], Mat::from_elem(val(*a).raw_dim(), g[[0, 0]]));
                }
            }
            Op::RowSums(a) => {
                if ng(*a) {
                    let x = val(*a);
                    let mut ga = Mat::zeros(x.raw_dim());
                    for (r, mut row) in ga.rows_mut().into_iter().enumerate() {
                        row.fill(g[[r, 0]]);
                    }
                    acc(&mut out[a.0], ga);
                }
            }
            Op::ColSums(a) => {
                if ng(*a) {
                    let x = val(*a);
                    let mut ga = Mat::zeros(x.raw_dim());
                    for mut row in ga.rows_mut() {
                        for (j, v) in row.iter_mut().enumerate() {
                            *v = g[[0, j]];
                        }
                    }
                    acc(&mut out[a.0], ga);
                }
            }
            Op::MinCols(a, argmins) => {
                if ng(*a) {
                    let mut ga = Mat::zeros(val(*a).raw_dim());
                    for (r, j) in argmins.iter().enumerate() {
                        ga[[r, *j]] = g[[r, 0]];
                    }
                    acc(&mut out[a.0], ga);
                }
            }
            Op::Patchify { x, h, w, p } => {
                if ng(*x) {
                    let c = val(*x).ncols();
                    let (p, h, w) = (*p, *h, *w);
                    let (oh, ow) = (h / p, w / p);
                    let mut ga = Mat::zeros(val(*x).raw_dim());
                    for or in 0..oh {
                        for oc in 0..ow {
                            let dst = or * ow + oc;
                            for dr in 0..p {
                                for dc in 0..p {
                                    let src = (or * p + dr) * w + (oc * p + dc);
                                    let base = (dr * p + dc) * c;
                                    for ch in 0..c {
                                        ga[[src, ch]] += g[[dst, base + ch]];
                                    }
                                }
                            }
                        }
                    }
                    acc(&mut out[x.0], ga);
                }
            }
            Op::BilinearResize { x, h, w, oh, ow } => {
                if ng(*x) {
                    let c = val(*x).ncols();
                    let (h, w, oh, ow) = (*h, *w, *oh, *ow);
                    let mut ga = Mat::zeros(val(*x).raw_dim());
                    for i2 in 0..oh {
                        let (r0, r1, wy) = resize_taps(h, oh, i2);
                        for j in 0..ow {
                            let (c0, c1, wx) = resize_taps(w, ow, j);
                            let dst = i2 * ow + j;
                            for ch in 0..c {
                                let gv = g[[dst, ch]];
                                ga[[r0 * w + c0, ch]] += (1.0 - wy) * (1.0 - wx) * gv;
                                ga[[r0 * w + c1, ch]] += (1.0 - wy) * wx * gv;
                                ga[[r1 * w + c0, ch]] += wy * (1.0 - wx) * gv;
                                ga[[r1 * w + c1, ch]] += wy * wx * gv;
                            }
                        }
                    }
                    acc(&mut out[x.0], ga);
                }
            }
            Op::Cross3(a, b) => {
                let av: Vec<f64> = val(*a).row(0).to_vec();
                let bv: Vec<f64> = val(*b).row(0).to_vec();
                let gv: Vec<f64> = g.row(0).to_vec();
                if ng(*a) {
                    let ga = cross3(&bv, &gv);
                    acc(&mut out[a.0], Mat::from_shape_vec((1, 3), ga.to_vec()).unwrap());
                }
                if ng(*b) {
                    let gb = cross3(&gv, &av);
                    acc(&mut out[b.0], Mat::from_shape_vec((1, 3), gb.to_vec()).unwrap());
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Mat::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut rng))
    }

    /// Central-difference check of d loss / d x against the tape, where
    /// `build` maps the input node to a scalar loss node.
    fn fd_check<F>(x0: &Mat, build: F)
    where
        F: Fn(&mut Graph, Var) -> Var,
    {
        let eval = |x: &Mat| -> f64 {
            let mut g = Graph::new();
            let xv = g.param(0, x, true);
            let loss = build(&mut g, xv);
            g.scalar(loss)
        };

        let mut g = Graph::new();
        let xv = g.param(0, x0, true);
        let loss = build(&mut g, xv);
        let grads = g.backward(loss);
        let analytic = grads.for_param(&g, 0).expect("no gradient reached the input").clone();

        let h = 1e-6;
        for i in 0..x0.nrows() {
            for j in 0..x0.ncols() {
                let mut xp = x0.clone();
                xp[[i, j]] += h;
                let mut xm = x0.clone();
                xm[[i, j]] -= h;
                let numeric = (eval(&xp) - eval(&xm)) / (2.0 * h);
                let a = analytic[[i, j]];
                let tol = 1e-7 + 1e-5 * numeric.abs().max(a.abs());
                assert!(
                    (numeric - a).abs() <= tol,
                    "grad mismatch at ({i},{j}): numeric {numeric} vs analytic {a}"
                );
            }
        }
    }

    #[test]
    fn grad_matmul_chain() {
        let x = randn(3, 4, 1);
        let w = randn(4, 5, 2);
        fd_check(&x, |g, xv| {
            let wv = g.constant(w.clone());
            let y = g.matmul(xv, wv);
            g.mean_all(y)
        });
        // And with the weight as the differentiated input.
        let x2 = x.clone();
        fd_check(&w, |g, wv| {
            let xv = g.constant(x2.clone());
            let y = g.matmul(xv, wv);
            let y2 = g.mul(y, y);
            g.mean_all(y2)
        });
    }

    #[test]
    fn grad_elementwise_binary() {
        let x = randn(3, 4, 3);
        let other = randn(3, 4, 4);
        for which in 0..3 {
            let o = other.clone();
            fd_check(&x, move |g, xv| {
                let ov = g.constant(o.clone());
                let y = match which {
                    0 => g.add(xv, ov),
                    1 => g.sub(xv, ov),
                    _ => g.mul(xv, ov),
                };
                let y2 = g.mul(y, y);
                g.mean_all(y2)
            });
        }
    }

    #[test]
    fn grad_row_broadcast() {
        let x = randn(4, 3, 5);
        let b = randn(1, 3, 6);
        let bb = b.clone();
        fd_check(&x, move |g, xv| {
            let bv = g.constant(bb.clone());
            let y = g.add_row(xv, bv);
            let z = g.mul_row(y, bv);
            let z2 = g.mul(z, z);
            g.mean_all(z2)
        });
        let xx = x.clone();
        fd_check(&b, move |g, bv| {
            let xv = g.constant(xx.clone());
            let y = g.add_row(xv, bv);
            let z = g.mul_row(y, bv);
            let z2 = g.mul(z, z);
            g.mean_all(z2)
        });
    }

    #[test]
    fn grad_col_broadcast() {
        let x = randn(4, 3, 7);
        let b = randn(4, 1, 8);
        let bb = b.clone();
        fd_check(&x, move |g, xv| {
            let bv = g.constant(bb.clone());
            let y = g.add_col(xv, bv);
            let z = g.mul_col(y, bv);
            let z2 = g.mul(z, z);
            g.mean_all(z2)
        });
        let xx = x.clone();
        fd_check(&b, move |g, bv| {
            let xv = g.constant(xx.clone());
            let y = g.add_col(xv, bv);
            let z = g.mul_col(y, bv);
            let z2 = g.mul(z, z);
            g.mean_all(z2)
        });
    }

    #[test]
    fn grad_scalar_broadcast() {
        let x = randn(3, 5, 9);
        let s = Mat::from_elem((1, 1), 0.7);
        let ss = s.clone();
        fd_check(&x, move |g, xv| {
            let sv = g.constant(ss.clone());
            let y = g.mul_scalar(xv, sv);
            let z = g.add_scalar(y, sv);
            let z2 = g.mul(z, z);
            g.mean_all(z2)
        });
        let xx = x.clone();
        fd_check(&s, move |g, sv| {
            let xv = g.constant(xx.clone());
            let y = g.mul_scalar(xv, sv);
            let z = g.add_scalar(y, sv);
            let z2 = g.mul(z, z);
            g.mean_all(z2)
        });
    }

    #[test]
    fn grad_unary_smooth() {
        let x = randn(3, 4, 10);
        fd_check(&x, |g, xv| {
            let y = g.gelu(xv);
            g.mean_all(y)
        });
        fd_check(&x, |g, xv| {
            let y = g.sigmoid(xv);
            g.mean_all(y)
        });
        fd_check(&x, |g, xv| {
            let y = g.exp(xv);
            g.mean_all(y)
        });
        // Positive-domain ops.
        let xp = x.mapv(|v| v.abs() + 0.5);
        fd_check(&xp, |g, xv| {
            let y = g.ln(xv);
            g.mean_all(y)
        });
        fd_check(&xp, |g, xv| {
            let y = g.sqrt(xv);
            g.mean_all(y)
        });
        fd_check(&xp, |g, xv| {
            let y = g.recip(xv);
            g.mean_all(y)
        });
    }

    #[test]
    fn grad_relu_and_smooth_l1() {
        // Keep inputs away from the kinks at 0 and +-1.
        let x = randn(4, 4, 11).mapv(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
        fd_check(&x, |g, xv| {
            let y = g.relu(xv);
            g.mean_all(y)
        });
        let x2 = randn(4, 4, 12).mapv(|v| if (v.abs() - 1.0).abs() < 0.05 { v * 1.2 } else { v });
        fd_check(&x2, |g, xv| {
            let y = g.smooth_l1(xv);
            g.mean_all(y)
        });
    }

    #[test]
    fn grad_softmax_and_layer_norm() {
        let x = randn(3, 6, 13);
        fd_check(&x, |g, xv| {
            let y = g.softmax_rows(xv);
            let y2 = g.mul(y, y);
            g.mean_all(y2)
        });
        fd_check(&x, |g, xv| {
            let y = g.layer_norm_rows(xv, 1e-5);
            let y2 = g.mul(y, y);
            let y3 = g.gelu(y2);
            g.mean_all(y3)
        });
    }

    #[test]
    fn grad_shape_ops() {
        let x = randn(4, 6, 14);
        fd_check(&x, |g, xv| {
            let t = g.transpose(xv);
            let s = g.slice_rows(t, 1, 4);
            let s2 = g.slice_cols(s, 0, 3);
            let y = g.mul(s2, s2);
            g.mean_all(y)
        });
        fd_check(&x, |g, xv| {
            let a = g.slice_rows(xv, 0, 2);
            let b = g.slice_rows(xv, 2, 4);
            let cat = g.concat_rows(&[a, b, a]);
            let y = g.mul(cat, cat);
            g.mean_all(y)
        });
        fd_check(&x, |g, xv| {
            let a = g.slice_cols(xv, 0, 2);
            let b = g.slice_cols(xv, 2, 6);
            let cat = g.concat_cols(&[b, a]);
            let y = g.mul(cat, cat);
            g.mean_all(y)
        });
    }

    #[test]
    fn grad_reductions() {
        let x = randn(4, 5, 15);
        fd_check(&x, |g, xv| {
            let y = g.mul(xv, xv);
            let r = g.row_sums(y);
            let r2 = g.mul(r, r);
            g.mean_all(r2)
        });
        fd_check(&x, |g, xv| {
            let y = g.mul(xv, xv);
            let c = g.col_sums(y);
            let c2 = g.mul(c, c);
            g.mean_all(c2)
        });
        fd_check(&x, |g, xv| {
            let y = g.mul(xv, xv);
            let m = g.min_cols(y);
            g.mean_all(m)
        });
    }

    #[test]
    fn grad_patchify_and_resize() {
        let x = randn(4 * 6, 3, 16);
        fd_check(&x, |g, xv| {
            let p = g.patchify(xv, 4, 6, 2);
            let y = g.mul(p, p);
            g.mean_all(y)
        });
        fd_check(&x, |g, xv| {
            let r = g.bilinear_resize(xv, 4, 6, 7, 5);
            let y = g.mul(r, r);
            g.mean_all(y)
        });
        fd_check(&x, |g, xv| {
            let r = g.bilinear_resize(xv, 4, 6, 2, 3);
            let y = g.mul(r, r);
            g.mean_all(y)
        });
    }

    #[test]
    fn grad_cross3() {
        let a = randn(1, 3, 17);
        let b = randn(1, 3, 18);
        let bb = b.clone();
        fd_check(&a, move |g, av| {
            let bv = g.constant(bb.clone());
            let c = g.cross3(av, bv);
            let c2 = g.mul(c, c);
            g.mean_all(c2)
        });
        let aa = a.clone();
        fd_check(&b, move |g, bv| {
            let av = g.constant(aa.clone());
            let c = g.cross3(av, bv);
            let c2 = g.mul(c, c);
            g.mean_all(c2)
        });
    }

    #[test]
    fn grad_div() {
        let x = randn(3, 3, 19).mapv(|v| v.abs() + 0.5);
        fd_check(&x, |g, xv| {
            let num = g.offset(xv, 1.0);
            let y = g.div(num, xv);
            g.mean_all(y)
        });
    }

    #[test]
    fn reused_param_accumulates_once_per_use() {
        // loss = mean(x * x) built by registering the same key twice must
        // give the same gradient as using one handle twice.
        let x = randn(3, 3, 20);
        let mut g = Graph::new();
        let a = g.param(7, &x, true);
        let b = g.param(7, &x, true);
        assert_eq!(a, b, "same key must map to the same node");
        let y = g.mul(a, b);
        let loss = g.mean_all(y);
        let grads = g.backward(loss);
        let got = grads.for_param(&g, 7).unwrap();
        let want = x.mapv(|v| 2.0 * v / 9.0);
        for (gv, wv) in got.iter().zip(want.iter()) {
            assert!((gv - wv).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_skips_frozen_parameters() {
        let x = randn(2, 2, 21);
        let mut g = Graph::new();
        let frozen = g.param(0, &x, false);
        let live = g.param(1, &x, true);
        let y = g.mul(frozen, live);
        let loss = g.mean_all(y);
        let grads = g.backward(loss);
        assert!(grads.for_param(&g, 0).is_none());
        assert!(grads.for_param(&g, 1).is_some());
    }

    #[test]
    fn patchify_layout_is_row_major_patch_then_channel() {
        // 2x2 grid of 1-channel values laid out row-major: patchify with p=2
        // must produce a single row [v00, v01, v10, v11].
        let x = Mat::from_shape_vec((4, 1), vec![10.0, 11.0, 12.0, 13.0]).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let p = g.patchify(xv, 2, 2, 2);
        assert_eq!(g.value(p).dim(), (1, 4));
        assert_eq!(g.value(p).row(0).to_vec(), vec![10.0, 11.0, 12.0, 13.0]);
    }

    #[test]
    fn bilinear_resize_identity_when_sizes_match() {
        let x = randn(6 * 5, 2, 22);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let r = g.bilinear_resize(xv, 6, 5, 6, 5);
        assert_eq!(g.value(r), &x);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = randn(5, 7, 23).mapv(|v| v * 30.0);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = g.softmax_rows(xv);
        for row in g.value(y).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }
}
