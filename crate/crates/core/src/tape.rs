//! A small reverse-mode differentiation tape over row-major matrices.
//!
//! The operation set is exactly what the controller (LSTM + categorical heads
//! + PPO loss) and the trainable layer set need; it is not a general autodiff
//! library. Every operation eagerly computes its value and records enough to
//! run the adjoint later. Variables created with [`Tape::param`] receive
//! gradients; [`Tape::constant`] leaves do not.

use crate::tensor::{gemm, Layout, Matrix};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    PickCols(Var, Vec<usize>),
    Minimum(Var, Var),
    Clamp(Var, f64, f64),
    Mean(Var),
    Sum(Var),
    RowSum(Var),
    Conv1d { x: Var, w: Var, b: Var, geom: ConvGeom },
    MaxPool1d { x: Var, geom: PoolGeom },
}

/// Geometry of a channel-last 1-D convolution applied row-wise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub len: usize,
    pub channels: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_len(&self) -> usize {
        if self.len < self.kernel {
            0
        } else {
            (self.len - self.kernel) / self.stride + 1
        }
    }
}

/// Geometry of a non-overlapping channel-last max pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub len: usize,
    pub channels: usize,
    pub size: usize,
}

impl PoolGeom {
    pub fn out_len(&self) -> usize {
        self.len / self.size
    }
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = crate::tensor::matmul(self.value(a), self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `x + 1ᵀb` with `b` a `1 × cols` row broadcast over the rows of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        assert_eq!(bv.rows, 1);
        assert_eq!(bv.cols, xv.cols, "bias width mismatch");
        let mut value = xv.clone();
        for r in 0..value.rows {
            for (o, bb) in value.row_mut(r).iter_mut().zip(&bv.data) {
                *o += bb;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(value, Op::AddBias(x, b), ng)
    }

    fn zip_op(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!((av.rows, av.cols), (bv.rows, bv.cols), "elementwise shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Matrix::from_vec(av.rows, av.cols, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, f64::min, Op::Minimum(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows {
            softmax_in_place(value.row_mut(r));
        }
        let ng = self.ng(a);
        self.push(value, Op::Softmax(a), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows {
            let row = value.row_mut(r);
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let ng = self.ng(a);
        self.push(value, Op::LogSoftmax(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat row mismatch");
            for r in 0..rows {
                value.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Columns `start..start + width`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let av = self.value(a);
        assert!(start + width <= av.cols);
        let mut value = Matrix::zeros(av.rows, width);
        for r in 0..av.rows {
            value.row_mut(r).copy_from_slice(&av.row(r)[start..start + width]);
        }
        let ng = self.ng(a);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let value = self.value(a).select_rows(idx);
        let ng = self.ng(a);
        self.push(value, Op::GatherRows(a, idx.to_vec()), ng)
    }

    /// `out[r, 0] = a[r, idx[r]]`.
    pub fn pick_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        assert_eq!(idx.len(), av.rows);
        let data = idx.iter().enumerate().map(|(r, &c)| av.get(r, c)).collect();
        let value = Matrix::from_vec(av.rows, 1, data);
        let ng = self.ng(a);
        self.push(value, Op::PickCols(a, idx.to_vec()), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Matrix::scalar(av.data.iter().sum::<f64>() / av.len() as f64);
        let ng = self.ng(a);
        self.push(value, Op::Mean(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).data.iter().sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows).map(|r| av.row(r).iter().sum()).collect();
        let value = Matrix::from_vec(av.rows, 1, data);
        let ng = self.ng(a);
        self.push(value, Op::RowSum(a), ng)
    }

    /// Row-wise valid 1-D convolution. `x` rows hold `len × channels`
    /// (channel-last), `w` is `(kernel · channels) × filters`, `b` is `1 × filters`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(xv.cols, geom.len * geom.channels);
        assert_eq!((wv.rows, wv.cols), (geom.kernel * geom.channels, geom.filters));
        assert_eq!(bv.cols, geom.filters);
        let lo = geom.out_len();
        assert!(lo > 0, "convolution kernel longer than input");
        let kc = geom.kernel * geom.channels;
        let mut value = Matrix::zeros(xv.rows, lo * geom.filters);
        for r in 0..xv.rows {
            let out = value.row_mut(r);
            for p in 0..lo {
                out[p * geom.filters..(p + 1) * geom.filters].copy_from_slice(&bv.data);
            }
            gemm(
                lo,
                kc,
                geom.filters,
                1.0,
                xv.row(r),
                Layout { row_stride: (geom.stride * geom.channels) as isize, col_stride: 1 },
                &wv.data,
                Layout::row_major(geom.filters),
                1.0,
                out,
                Layout::row_major(geom.filters),
            );
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(value, Op::Conv1d { x, w, b, geom }, ng)
    }

    pub fn max_pool1d(&mut self, x: Var, geom: PoolGeom) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.cols, geom.len * geom.channels);
        let lo = geom.out_len();
        assert!(lo > 0, "pool size larger than input");
        let ch = geom.channels;
        let mut value = Matrix::zeros(xv.rows, lo * ch);
        for r in 0..xv.rows {
            let xr = xv.row(r);
            let out = value.row_mut(r);
            for q in 0..lo {
                for c in 0..ch {
                    let mut m = f64::NEG_INFINITY;
                    for j in 0..geom.size {
                        m = m.max(xr[(q * geom.size + j) * ch + c]);
                    }
                    out[q * ch + c] = m;
                }
            }
        }
        let ng = self.ng(x);
        self.push(value, Op::MaxPool1d { x, geom }, ng)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward requires a scalar loss");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.adjoint(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Matrix>], v: Var) -> Option<&'a mut Matrix> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let shape = &self.nodes[v.0].value;
        Some(grads[v.0].get_or_insert_with(|| Matrix::zeros(shape.rows, shape.cols)))
    }

    fn adjoint(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let y = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    // ga += g · bᵀ
                    gemm(
                        av.rows,
                        g.cols,
                        av.cols,
                        1.0,
                        &g.data,
                        Layout::row_major(g.cols),
                        &bv.data,
                        Layout::transposed(bv.cols),
                        1.0,
                        &mut ga.data,
                        Layout::row_major(av.cols),
                    );
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // gb += aᵀ · g
                    gemm(
                        bv.rows,
                        av.rows,
                        bv.cols,
                        1.0,
                        &av.data,
                        Layout::transposed(av.cols),
                        &g.data,
                        Layout::row_major(g.cols),
                        1.0,
                        &mut gb.data,
                        Layout::row_major(bv.cols),
                    );
                }
            }
            Op::AddBias(x, b) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.add_assign(g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for r in 0..g.rows {
                        for (o, v) in gb.data.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.add_assign(g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.data.iter_mut().zip(&g.data).for_each(|(o, v)| *o -= v);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, gv), bb) in ga.data.iter_mut().zip(&g.data).zip(bv) {
                        *o += gv * bb;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((o, gv), aa) in gb.data.iter_mut().zip(&g.data).zip(av) {
                        *o += gv * aa;
                    }
                }
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                if let Some(ga) = self.slot(grads, *a) {
                    for (k, o) in ga.data.iter_mut().enumerate() {
                        if av[k] <= bv[k] {
                            *o += g.data[k];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (k, o) in gb.data.iter_mut().enumerate() {
                        if av[k] > bv[k] {
                            *o += g.data[k];
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.data.iter_mut().zip(&g.data).for_each(|(o, v)| *o += c * v);
                }
            }
            Op::Tanh(a) => self.elementwise_back(*a, g, grads, |_, y| 1.0 - y * y, y),
            Op::Sigmoid(a) => self.elementwise_back(*a, g, grads, |_, y| y * (1.0 - y), y),
            Op::Relu(a) => self.elementwise_back(*a, g, grads, |x, _| if x > 0.0 { 1.0 } else { 0.0 }, y),
            Op::Exp(a) => self.elementwise_back(*a, g, grads, |_, y| y, y),
            Op::Square(a) => self.elementwise_back(*a, g, grads, |x, _| 2.0 * x, y),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.elementwise_back(*a, g, grads, |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 }, y)
            }
            Op::Softmax(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..y.rows {
                        let (p, gr) = (y.row(r), g.row(r));
                        let dot: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (k, o) in ga.row_mut(r).iter_mut().enumerate() {
                            *o += p[k] * (gr[k] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..y.rows {
                        let (ls, gr) = (y.row(r), g.row(r));
                        let total: f64 = gr.iter().sum();
                        for (k, o) in ga.row_mut(r).iter_mut().enumerate() {
                            *o += gr[k] - ls[k].exp() * total;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols;
                    if let Some(gp) = self.slot(grads, p) {
                        for r in 0..g.rows {
                            for (o, v) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *o += v;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let start = *start;
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..g.rows {
                        for (o, v) in ga.row_mut(r)[start..start + g.cols].iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (r, &src) in idx.iter().enumerate() {
                        for (o, v) in ga.row_mut(src).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::PickCols(a, idx) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (r, &c) in idx.iter().enumerate() {
                        let cols = ga.cols;
                        ga.data[r * cols + c] += g.data[r];
                    }
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let s = g.scalar_value() / ga.len() as f64;
                    ga.data.iter_mut().for_each(|o| *o += s);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let s = g.scalar_value();
                    ga.data.iter_mut().for_each(|o| *o += s);
                }
            }
            Op::RowSum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..ga.rows {
                        let s = g.data[r];
                        ga.row_mut(r).iter_mut().for_each(|o| *o += s);
                    }
                }
            }
            Op::Conv1d { x, w, b, geom } => self.conv_back(*x, *w, *b, *geom, g, grads),
            Op::MaxPool1d { x, geom } => {
                let xv = self.value(*x);
                let ch = geom.channels;
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..xv.rows {
                        let xr = xv.row(r);
                        let gr = g.row(r);
                        let gxr = gx.row_mut(r);
                        for q in 0..geom.out_len() {
                            for c in 0..ch {
                                let mut best = (q * geom.size) * ch + c;
                                for j in 1..geom.size {
                                    let k = (q * geom.size + j) * ch + c;
                                    if xr[k] > xr[best] {
                                        best = k;
                                    }
                                }
                                gxr[best] += gr[q * ch + c];
                            }
                        }
                    }
                }
            }
        }
    }

    fn elementwise_back(
        &self,
        a: Var,
        g: &Matrix,
        grads: &mut [Option<Matrix>],
        d: impl Fn(f64, f64) -> f64,
        y: &Matrix,
    ) {
        let x = &self.value(a).data;
        if let Some(ga) = self.slot(grads, a) {
            for k in 0..ga.data.len() {
                ga.data[k] += g.data[k] * d(x[k], y.data[k]);
            }
        }
    }

    fn conv_back(&self, x: Var, w: Var, b: Var, geom: ConvGeom, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let (xv, wv) = (self.value(x), self.value(w));
        let lo = geom.out_len();
        let kc = geom.kernel * geom.channels;
        let f = geom.filters;
        let step = geom.stride * geom.channels;
        if let Some(gb) = self.slot(grads, b) {
            for r in 0..g.rows {
                for p in 0..lo {
                    for (o, v) in gb.data.iter_mut().zip(&g.row(r)[p * f..(p + 1) * f]) {
                        *o += v;
                    }
                }
            }
        }
        if let Some(gw) = self.slot(grads, w) {
            for r in 0..g.rows {
                // gw += Aᵀ · dOut, A the overlapping window view of x
                gemm(
                    kc,
                    lo,
                    f,
                    1.0,
                    xv.row(r),
                    Layout { row_stride: 1, col_stride: step as isize },
                    g.row(r),
                    Layout::row_major(f),
                    1.0,
                    &mut gw.data,
                    Layout::row_major(f),
                );
            }
        }
        if let Some(gx) = self.slot(grads, x) {
            let mut tmp = vec![0.0; lo * kc];
            for r in 0..g.rows {
                gemm(
                    lo,
                    f,
                    kc,
                    1.0,
                    g.row(r),
                    Layout::row_major(f),
                    &wv.data,
                    Layout::transposed(f),
                    0.0,
                    &mut tmp,
                    Layout::row_major(kc),
                );
                let gxr = gx.row_mut(r);
                for p in 0..lo {
                    let base = p * step;
                    for (o, v) in gxr[base..base + kc].iter_mut().zip(&tmp[p * kc..(p + 1) * kc]) {
                        *o += v;
                    }
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    xs.iter_mut().for_each(|x| *x /= s);
}
