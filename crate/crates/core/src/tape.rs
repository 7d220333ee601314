//! Minimal reverse-mode automatic differentiation over row-major `f64` matrices.
//!
//! Every value on the tape is a 2-D matrix. Images travel as `[batch, C*H*W]`
//! rows and convolutions carry their own geometry. A [`Graph`] is built fresh
//! for every forward pass and discarded after [`Graph::backward`].

use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index of a trainable parameter inside a parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Geometry of a 2-D convolution with square kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn in_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_height() * self.out_width()
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Unfolds a batch `[B, Cin*H*W]` into `[Cin*k*k, B*OH*OW]`.
    fn im2col(&self, input: &Mat) -> Mat {
        let (oh, ow) = (self.out_height(), self.out_width());
        let batch = input.nrows();
        let mut cols = Mat::zeros((self.patch_len(), batch * oh * ow));
        let (h, w, k) = (self.height as isize, self.width as isize, self.kernel);
        for b in 0..batch {
            let row = input.row(b);
            for c in 0..self.in_channels {
                for ky in 0..k {
                    for kx in 0..k {
                        let prow = (c * k + ky) * k + kx;
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= h {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix < 0 || ix >= w {
                                    continue;
                                }
                                cols[[prow, (b * oh + oy) * ow + ox]] =
                                    row[(c * self.height + iy as usize) * self.width + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters columns back onto the input.
    fn col2im(&self, cols: &Mat, batch: usize) -> Mat {
        let (oh, ow) = (self.out_height(), self.out_width());
        let mut out = Mat::zeros((batch, self.in_len()));
        let (h, w, k) = (self.height as isize, self.width as isize, self.kernel);
        for b in 0..batch {
            let mut row = out.row_mut(b);
            for c in 0..self.in_channels {
                for ky in 0..k {
                    for kx in 0..k {
                        let prow = (c * k + ky) * k + kx;
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= h {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix < 0 || ix >= w {
                                    continue;
                                }
                                row[(c * self.height + iy as usize) * self.width + ix as usize] +=
                                    cols[[prow, (b * oh + oy) * ow + ox]];
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Softplus(Var),
    Clamp(Var, f64, f64),
    SumAll(Var),
    SumCols(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Rc<Vec<usize>>),
    Select(Var, Var, Rc<Array2<bool>>),
    LogSoftmax(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Mat,
    },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// A single-use computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of every parameter leaf that received one.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Mat)> + '_ {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].as_ref().map(|g| (id, g)))
    }
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
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

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (attack inputs, probes).
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId, value: Mat) -> Var {
        self.push(value, Op::Param(id), true)
    }

    /// Copies `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = &self.nodes[v.0].value;
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.nodes[a.0].value.mapv(f);
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    /// `a [n, m] + bias [1, m]` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        assert_eq!(self.shape(bias).0, 1, "bias must be a row vector");
        let value = self.value(a) + self.value(bias);
        let ng = self.ng(a) || self.ng(bias);
        self.push(value, Op::AddBias(a, bias), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let value = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// Scales row `i` of `a` by `col[i, 0]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.shape(col), (self.shape(a).0, 1), "mul_col shape mismatch");
        let value = self.value(a) * self.value(col);
        let ng = self.ng(a) || self.ng(col);
        self.push(value, Op::MulCol(a, col), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x * k, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x + k, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, relu, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// Elementwise clamp; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Mat::from_elem((1, 1), total), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums, `[n, m] -> [n, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.ng(a);
        self.push(value, Op::SumCols(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Output row `i` is input row `idx[i]`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), idx);
        let ng = self.ng(a);
        self.push(value, Op::GatherRows(a, Rc::new(idx.to_vec())), ng)
    }

    /// Elementwise `mask ? b : a`.
    pub fn select(&mut self, a: Var, b: Var, mask: Rc<Array2<bool>>) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "select shape mismatch");
        assert_eq!(self.shape(a), mask.dim(), "select mask mismatch");
        let mut value = self.value(a).clone();
        Zip::from(&mut value)
            .and(self.value(b))
            .and(&*mask)
            .for_each(|v, &bv, &m| {
                if m {
                    *v = bv
                }
            });
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Select(a, b, mask), ng)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        let ng = self.ng(a);
        self.push(value, Op::LogSoftmax(a), ng)
    }

    /// `input [B, Cin*H*W]`, `weight [Cout, Cin*k*k]`, `bias [1, Cout]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, geom: ConvGeom) -> Var {
        assert_eq!(self.shape(input).1, geom.in_len(), "conv input length mismatch");
        assert_eq!(
            self.shape(weight),
            (geom.out_channels, geom.patch_len()),
            "conv weight shape mismatch"
        );
        let batch = self.shape(input).0;
        let cols = geom.im2col(self.value(input));
        // [Cout, B*OH*OW]
        let prod = self.value(weight).dot(&cols);
        let spatial = geom.out_height() * geom.out_width();
        let bias_row = self.value(bias).row(0).to_owned();
        let mut value = Mat::zeros((batch, geom.out_len()));
        for b in 0..batch {
            let mut row = value.row_mut(b);
            for c in 0..geom.out_channels {
                let src = prod.slice(s![c, b * spatial..(b + 1) * spatial]);
                let mut dst = row.slice_mut(s![c * spatial..(c + 1) * spatial]);
                Zip::from(&mut dst).and(&src).for_each(|d, &x| *d = x + bias_row[c]);
            }
        }
        let ng = self.ng(input) || self.ng(weight) || self.ng(bias);
        self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            ng,
        )
    }

    /// Reverse sweep from a `[1, 1]` root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        let n = root.0 + 1;
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::ones((1, 1)));
        for i in (0..n).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, node)| match node.op {
                Op::Param(id) => Some((id, Var(i))),
                _ => None,
            })
            .collect();
        Gradients { grads, params }
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let acc = |v: Var, delta: Mat, grads: &mut [Option<Mat>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.dot(&self.value(*b).t()), grads);
                }
                if self.ng(*b) {
                    acc(*b, self.value(*a).t().dot(g), grads);
                }
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned(), grads),
            Op::AddBias(a, bias) => {
                acc(*a, g.clone(), grads);
                if self.ng(*bias) {
                    acc(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)), grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, -g, grads);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g * self.value(*b), grads);
                }
                if self.ng(*b) {
                    acc(*b, g * self.value(*a), grads);
                }
            }
            Op::MulCol(a, col) => {
                if self.ng(*a) {
                    acc(*a, g * self.value(*col), grads);
                }
                if self.ng(*col) {
                    let d = (g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(*col, d, grads);
                }
            }
            Op::Scale(a, k) => acc(*a, g * *k, grads),
            Op::AddScalar(a) => acc(*a, g.clone(), grads),
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                acc(*a, d, grads);
            }
            Op::Sigmoid(a) => acc(*a, g * &out.mapv(|y| y * (1.0 - y)), grads),
            Op::Tanh(a) => acc(*a, g * &out.mapv(|y| 1.0 - y * y), grads),
            Op::Exp(a) => acc(*a, g * out, grads),
            Op::Log(a) => acc(*a, g / self.value(*a), grads),
            Op::Sqrt(a) => acc(*a, g / &out.mapv(|y| 2.0 * y), grads),
            Op::Square(a) => acc(*a, g * &self.value(*a).mapv(|x| 2.0 * x), grads),
            Op::Softplus(a) => acc(*a, g * &self.value(*a).mapv(sigmoid), grads),
            Op::Clamp(a, lo, hi) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| {
                        if x < *lo || x > *hi {
                            *d = 0.0
                        }
                    });
                acc(*a, d, grads);
            }
            Op::SumAll(a) => {
                let shape = self.shape(*a);
                acc(*a, Mat::from_elem(shape, g[[0, 0]]), grads);
            }
            Op::SumCols(a) => {
                let shape = self.shape(*a);
                let d = Mat::from_shape_fn(shape, |(r, _)| g[[r, 0]]);
                acc(*a, d, grads);
            }
            Op::SliceCols(a, start) => {
                let mut d = Mat::zeros(self.shape(*a));
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                acc(*a, d, grads);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    acc(p, g.slice(s![.., offset..offset + w]).to_owned(), grads);
                    offset += w;
                }
            }
            Op::GatherRows(a, idx) => {
                let mut d = Mat::zeros(self.shape(*a));
                for (r, &src) in idx.iter().enumerate() {
                    let mut row = d.row_mut(src);
                    row += &g.row(r);
                }
                acc(*a, d, grads);
            }
            Op::Select(a, b, mask) => {
                if self.ng(*a) {
                    let mut d = g.clone();
                    Zip::from(&mut d).and(&**mask).for_each(|d, &m| {
                        if m {
                            *d = 0.0
                        }
                    });
                    acc(*a, d, grads);
                }
                if self.ng(*b) {
                    let mut d = g.clone();
                    Zip::from(&mut d).and(&**mask).for_each(|d, &m| {
                        if !m {
                            *d = 0.0
                        }
                    });
                    acc(*b, d, grads);
                }
            }
            Op::LogSoftmax(a) => {
                let mut d = g.clone();
                for (mut drow, orow) in d.rows_mut().into_iter().zip(out.rows()) {
                    let gsum = drow.sum();
                    Zip::from(&mut drow)
                        .and(&orow)
                        .for_each(|dv, &lp| *dv -= lp.exp() * gsum);
                }
                acc(*a, d, grads);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let batch = self.shape(*input).0;
                let spatial = geom.out_height() * geom.out_width();
                // Regroup the output gradient as [Cout, B*OH*OW].
                let mut gcols = Mat::zeros((geom.out_channels, batch * spatial));
                for b in 0..batch {
                    for c in 0..geom.out_channels {
                        gcols
                            .slice_mut(s![c, b * spatial..(b + 1) * spatial])
                            .assign(&g.slice(s![b, c * spatial..(c + 1) * spatial]));
                    }
                }
                if self.ng(*weight) {
                    acc(*weight, gcols.dot(&cols.t()), grads);
                }
                if self.ng(*bias) {
                    acc(*bias, gcols.sum_axis(Axis(1)).insert_axis(Axis(0)), grads);
                }
                if self.ng(*input) {
                    let dcols = self.value(*weight).t().dot(&gcols);
                    acc(*input, geom.col2im(&dcols, batch), grads);
                }
            }
        }
    }
}
