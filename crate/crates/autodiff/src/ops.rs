//! Differentiable operations: forward constructors on [`Var`] and the
//! matching backward rules.

use crate::conv::{col2im, im2col, ConvGeometry};
use crate::error::{invalid, mismatch, Result};
use crate::graph::{GradSink, Graph, Var};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Exp,
    Log,
    Sin,
    Cos,
    Relu,
    Hardswish,
    Sigmoid,
    Softplus,
    Abs,
    Square,
    Sqrt,
}

/// User supplied backward rule for [`Graph::custom`].
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the upstream gradient `grad_out`.
    /// Entries may be `None` where `needs[i]` is false.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

/// Coordinates feeding a [`Var::lattice_gather`] whose gradient is wanted.
pub struct LatticeCoords<'g, T: Scalar> {
    /// `S x D` coordinate array.
    pub q: Var<'g, T>,
    /// Column of `q` driving each lattice axis.
    pub columns: Vec<usize>,
    /// Derivative of the in-cell fraction with respect to the coordinate, per axis.
    pub scales: Vec<T>,
}

pub(crate) struct LatticeState<T> {
    table: usize,
    dims: usize,
    corners: Vec<u32>,
    fracs: Vec<T>,
    coords: Option<(usize, Vec<usize>, Vec<T>)>,
}

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, T),
    Offset(usize),
    MatMul(usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols { x: usize, start: usize },
    SelectRows { x: usize, idx: Vec<usize> },
    RepeatRows { x: usize, times: usize },
    Reshape(usize),
    Transpose(usize),
    Sum(usize),
    Mean(usize),
    SumCols(usize),
    Unary(usize, UnaryKind),
    Softmax(usize),
    LogSoftmax(usize),
    PickCols { x: usize, idx: Vec<usize> },
    Lattice(Box<LatticeState<T>>),
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeometry,
        cols: Vec<T>,
    },
    SegmentWeightedSum { w: usize, x: usize },
    Custom {
        inputs: Vec<usize>,
        op: Box<dyn CustomOp<T>>,
    },
}

fn unary_fwd<T: Scalar>(kind: UnaryKind, x: T) -> T {
    let zero = T::zero();
    match kind {
        UnaryKind::Neg => -x,
        UnaryKind::Exp => x.exp(),
        UnaryKind::Log => x.ln(),
        UnaryKind::Sin => x.sin(),
        UnaryKind::Cos => x.cos(),
        UnaryKind::Relu => {
            if x > zero {
                x
            } else {
                zero
            }
        }
        UnaryKind::Hardswish => {
            let three = T::lit(3.0);
            if x <= -three {
                zero
            } else if x >= three {
                x
            } else {
                x * (x + three) / T::lit(6.0)
            }
        }
        UnaryKind::Sigmoid => sigmoid(x),
        UnaryKind::Softplus => x.max(zero) + (-x.abs()).exp().ln_1p(),
        UnaryKind::Abs => x.abs(),
        UnaryKind::Square => x * x,
        UnaryKind::Sqrt => x.sqrt(),
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

/// Derivative given input `x` and output `y`.
fn unary_deriv<T: Scalar>(kind: UnaryKind, x: T, y: T) -> T {
    let zero = T::zero();
    let one = T::one();
    match kind {
        UnaryKind::Neg => -one,
        UnaryKind::Exp => y,
        UnaryKind::Log => one / x,
        UnaryKind::Sin => x.cos(),
        UnaryKind::Cos => -x.sin(),
        UnaryKind::Relu => {
            if x > zero {
                one
            } else {
                zero
            }
        }
        UnaryKind::Hardswish => {
            let three = T::lit(3.0);
            if x <= -three {
                zero
            } else if x >= three {
                one
            } else {
                (x + x + three) / T::lit(6.0)
            }
        }
        UnaryKind::Sigmoid => y * (one - y),
        UnaryKind::Softplus => sigmoid(x),
        UnaryKind::Abs => {
            if x > zero {
                one
            } else if x < zero {
                -one
            } else {
                zero
            }
        }
        UnaryKind::Square => x + x,
        UnaryKind::Sqrt => T::lit(0.5) / y,
    }
}

fn softmax_rows<T: Scalar>(x: &[T], cols: usize, log: bool) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        if log {
            let lse = max + sum.ln();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s - lse;
            }
        } else {
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
    }
    out
}

fn lattice_weight<T: Scalar>(fracs: &[T], corner: usize) -> T {
    let one = T::one();
    fracs.iter().enumerate().fold(one, |acc, (a, &f)| {
        if corner >> a & 1 == 1 {
            acc * f
        } else {
            acc * (one - f)
        }
    })
}

impl<'g, T: Scalar> Var<'g, T> {
    fn binary_same(self, other: Var<'g, T>, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Self> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(mismatch(name, a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::raw(a.shape().to_vec(), data);
        drop((a, b));
        let req = self.graph.requires(&[self.id, other.id]);
        Ok(self.graph.push(out, op, req))
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Self> {
        self.binary_same(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Self> {
        self.binary_same(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Self> {
        self.binary_same(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    /// `x[r, c] + b[c]`.
    pub fn add_row(self, bias: Var<'g, T>) -> Result<Self> {
        let (x, b) = (self.value(), bias.value());
        let cols = x.cols();
        if b.numel() != cols {
            return Err(mismatch("add_row", x.shape(), b.shape()));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (v, &bb) in row.iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        let out = Tensor::raw(x.shape().to_vec(), data);
        drop((x, b));
        let req = self.graph.requires(&[self.id, bias.id]);
        Ok(self.graph.push(out, Op::AddRow(self.id, bias.id), req))
    }

    /// `x[r, c] * s[r]`.
    pub fn mul_col(self, scale: Var<'g, T>) -> Result<Self> {
        let (x, s) = (self.value(), scale.value());
        let cols = x.cols();
        if s.numel() != x.rows() {
            return Err(mismatch("mul_col", x.shape(), s.shape()));
        }
        let mut data = x.data().to_vec();
        for (row, &sv) in data.chunks_mut(cols).zip(s.data()) {
            row.iter_mut().for_each(|v| *v *= sv);
        }
        let out = Tensor::raw(x.shape().to_vec(), data);
        drop((x, s));
        let req = self.graph.requires(&[self.id, scale.id]);
        Ok(self.graph.push(out, Op::MulCol(self.id, scale.id), req))
    }

    pub fn scale(self, c: T) -> Self {
        let x = self.value();
        let out = Tensor::raw(x.shape().to_vec(), x.data().iter().map(|&v| v * c).collect());
        drop(x);
        let req = self.requires_grad();
        self.graph.push(out, Op::Scale(self.id, c), req)
    }

    pub fn offset(self, c: T) -> Self {
        let x = self.value();
        let out = Tensor::raw(x.shape().to_vec(), x.data().iter().map(|&v| v + c).collect());
        drop(x);
        let req = self.requires_grad();
        self.graph.push(out, Op::Offset(self.id), req)
    }

    /// Matrix product of `m x k` and `k x n` operands.
    pub fn matmul(self, other: Var<'g, T>) -> Result<Self> {
        let (a, b) = (self.value(), other.value());
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(mismatch("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![T::zero(); m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut c, false);
        drop((a, b));
        let req = self.graph.requires(&[self.id, other.id]);
        Ok(self.graph.push(Tensor::raw(vec![m, n], c), Op::MatMul(self.id, other.id), req))
    }

    pub fn unary(self, kind: UnaryKind) -> Self {
        let x = self.value();
        let data = x.data().iter().map(|&v| unary_fwd(kind, v)).collect();
        let out = Tensor::raw(x.shape().to_vec(), data);
        drop(x);
        let req = self.requires_grad();
        self.graph.push(out, Op::Unary(self.id, kind), req)
    }

    pub fn neg(self) -> Self {
        self.unary(UnaryKind::Neg)
    }
    pub fn exp(self) -> Self {
        self.unary(UnaryKind::Exp)
    }
    pub fn log(self) -> Self {
        self.unary(UnaryKind::Log)
    }
    pub fn sin(self) -> Self {
        self.unary(UnaryKind::Sin)
    }
    pub fn cos(self) -> Self {
        self.unary(UnaryKind::Cos)
    }
    pub fn relu(self) -> Self {
        self.unary(UnaryKind::Relu)
    }
    /// `x * relu6(x + 3) / 6`.
    pub fn hardswish(self) -> Self {
        self.unary(UnaryKind::Hardswish)
    }
    pub fn sigmoid(self) -> Self {
        self.unary(UnaryKind::Sigmoid)
    }
    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Self {
        self.unary(UnaryKind::Softplus)
    }
    pub fn abs(self) -> Self {
        self.unary(UnaryKind::Abs)
    }
    pub fn square(self) -> Self {
        self.unary(UnaryKind::Square)
    }
    pub fn sqrt(self) -> Self {
        self.unary(UnaryKind::Sqrt)
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Self {
        let x = self.value();
        let out = Tensor::raw(x.shape().to_vec(), softmax_rows(x.data(), x.cols(), false));
        drop(x);
        let req = self.requires_grad();
        self.graph.push(out, Op::Softmax(self.id), req)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Self {
        let x = self.value();
        let out = Tensor::raw(x.shape().to_vec(), softmax_rows(x.data(), x.cols(), true));
        drop(x);
        let req = self.requires_grad();
        self.graph.push(out, Op::LogSoftmax(self.id), req)
    }

    pub fn sum(self) -> Self {
        let total = self.value().data().iter().copied().sum();
        let req = self.requires_grad();
        self.graph.push(Tensor::scalar(total), Op::Sum(self.id), req)
    }

    pub fn mean(self) -> Self {
        let x = self.value();
        let n = T::from_usize(x.numel().max(1)).unwrap();
        let total: T = x.data().iter().copied().sum();
        drop(x);
        let req = self.requires_grad();
        self.graph.push(Tensor::scalar(total / n), Op::Mean(self.id), req)
    }

    /// Sum over the last axis: `r x c -> r`.
    pub fn sum_cols(self) -> Self {
        let x = self.value();
        let data: Vec<T> = x.data().chunks(x.cols()).map(|r| r.iter().copied().sum()).collect();
        let rows = data.len();
        drop(x);
        let req = self.requires_grad();
        self.graph.push(Tensor::raw(vec![rows], data), Op::SumCols(self.id), req)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let x = self.value();
        if shape.iter().product::<usize>() != x.numel() {
            return Err(mismatch("reshape", x.shape(), &shape));
        }
        let out = Tensor::raw(shape, x.data().to_vec());
        drop(x);
        let req = self.requires_grad();
        Ok(self.graph.push(out, Op::Reshape(self.id), req))
    }

    /// Transpose of a matrix (`r x c -> c x r`).
    pub fn transpose(self) -> Self {
        let x = self.value();
        let (r, c) = (x.rows(), x.cols());
        let src = x.data();
        let mut data = vec![T::zero(); src.len()];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        drop(x);
        let req = self.requires_grad();
        self.graph.push(Tensor::raw(vec![c, r], data), Op::Transpose(self.id), req)
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Self> {
        let x = self.value();
        let cols = x.cols();
        if start + len > cols {
            return Err(invalid("slice_cols", format!("{start}+{len} exceeds {cols} columns")));
        }
        let rows = x.rows();
        let mut data = Vec::with_capacity(rows * len);
        for row in x.data().chunks(cols) {
            data.extend_from_slice(&row[start..start + len]);
        }
        drop(x);
        let req = self.requires_grad();
        Ok(self
            .graph
            .push(Tensor::raw(vec![rows, len], data), Op::SliceCols { x: self.id, start }, req))
    }

    /// Rows `idx` of a matrix, in the given order (repeats allowed).
    pub fn select_rows(self, idx: &[usize]) -> Result<Self> {
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(invalid("select_rows", format!("row {bad} out of {rows}")));
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(&x.data()[i * cols..(i + 1) * cols]);
        }
        let shape = if x.shape().len() == 1 {
            vec![idx.len()]
        } else {
            vec![idx.len(), cols]
        };
        drop(x);
        let req = self.requires_grad();
        Ok(self.graph.push(
            Tensor::raw(shape, data),
            Op::SelectRows {
                x: self.id,
                idx: idx.to_vec(),
            },
            req,
        ))
    }

    /// Repeats each row `times` times consecutively.
    pub fn repeat_rows(self, times: usize) -> Self {
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        let mut data = Vec::with_capacity(rows * cols * times);
        for row in x.data().chunks(cols) {
            for _ in 0..times {
                data.extend_from_slice(row);
            }
        }
        drop(x);
        let req = self.requires_grad();
        self.graph.push(
            Tensor::raw(vec![rows * times, cols], data),
            Op::RepeatRows { x: self.id, times },
            req,
        )
    }

    /// `x[r, idx[r]]` for every row.
    pub fn pick_cols(self, idx: &[usize]) -> Result<Self> {
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        if idx.len() != rows || idx.iter().any(|&i| i >= cols) {
            return Err(invalid("pick_cols", format!("{} indices for {rows}x{cols}", idx.len())));
        }
        let data = idx.iter().enumerate().map(|(r, &c)| x.data()[r * cols + c]).collect();
        drop(x);
        let req = self.requires_grad();
        Ok(self.graph.push(
            Tensor::raw(vec![rows], data),
            Op::PickCols {
                x: self.id,
                idx: idx.to_vec(),
            },
            req,
        ))
    }

    /// Interpolating gather over a lattice stored row-wise in `self` (`T x C`).
    ///
    /// For every query `s`, `corners[s * 2^dims + k]` is the table row of corner
    /// `k` (bit `a` of `k` selects the upper node along axis `a`) and
    /// `fracs[s * dims + a]` the in-cell fraction along axis `a`. The output is
    /// the multilinear blend, `S x C`.
    pub fn lattice_gather(
        self,
        corners: Vec<u32>,
        fracs: Vec<T>,
        dims: usize,
        coords: Option<LatticeCoords<'g, T>>,
    ) -> Result<Self> {
        let table = self.value();
        let (rows, cols) = (table.rows(), table.cols());
        let k = 1usize << dims;
        if dims == 0 || corners.len() % k != 0 || fracs.len() != corners.len() / k * dims {
            return Err(invalid("lattice_gather", "corner/fraction arrays disagree"));
        }
        if let Some(&bad) = corners.iter().find(|&&c| c as usize >= rows) {
            return Err(invalid("lattice_gather", format!("row {bad} out of {rows}")));
        }
        let samples = corners.len() / k;
        let mut data = vec![T::zero(); samples * cols];
        for s in 0..samples {
            let f = &fracs[s * dims..(s + 1) * dims];
            let out = &mut data[s * cols..(s + 1) * cols];
            for c in 0..k {
                let w = lattice_weight(f, c);
                let row = corners[s * k + c] as usize * cols;
                for (o, &t) in out.iter_mut().zip(&table.data()[row..row + cols]) {
                    *o += w * t;
                }
            }
        }
        drop(table);
        let mut ids = vec![self.id];
        let coords = match coords {
            Some(lc) => {
                let qshape = lc.q.shape();
                if lc.columns.len() != dims || lc.scales.len() != dims || qshape.iter().product::<usize>() / qshape.last().copied().unwrap_or(1) != samples {
                    return Err(invalid("lattice_gather", "coordinate link does not match samples"));
                }
                ids.push(lc.q.id);
                Some((lc.q.id, lc.columns, lc.scales))
            }
            None => None,
        };
        let req = self.graph.requires(&ids);
        Ok(self.graph.push(
            Tensor::raw(vec![samples, cols], data),
            Op::Lattice(Box::new(LatticeState {
                table: self.id,
                dims,
                corners,
                fracs,
                coords,
            })),
            req,
        ))
    }

    /// 2-D convolution of a `(C_in, H, W)` image with weights
    /// `(C_out, C_in, k, k)` and bias `(C_out)`; zero padding.
    pub fn conv2d(self, weight: Var<'g, T>, bias: Var<'g, T>, stride: usize, padding: usize) -> Result<Self> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        if x.shape().len() != 3 || w.shape().len() != 4 || w.shape()[1] != x.shape()[0] || w.shape()[2] != w.shape()[3] {
            return Err(mismatch("conv2d", x.shape(), w.shape()));
        }
        let cout = w.shape()[0];
        if b.numel() != cout {
            return Err(mismatch("conv2d bias", w.shape(), b.shape()));
        }
        let geom = ConvGeometry::new(x.shape()[0], x.shape()[1], x.shape()[2], w.shape()[2], stride, padding)
            .ok_or_else(|| invalid("conv2d", format!("kernel does not fit image {:?}", x.shape())))?;
        let cols = im2col(x.data(), &geom);
        let (patch, pixels) = (geom.patch_len(), geom.out_pixels());
        let mut out = vec![T::zero(); cout * pixels];
        gemm(cout, patch, pixels, w.data(), false, &cols, false, &mut out, false);
        for (row, &bb) in out.chunks_mut(pixels).zip(b.data()) {
            row.iter_mut().for_each(|v| *v += bb);
        }
        let shape = vec![cout, geom.out_h, geom.out_w];
        drop((x, w, b));
        let req = self.graph.requires(&[self.id, weight.id, bias.id]);
        Ok(self.graph.push(
            Tensor::raw(shape, out),
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.id,
                geom,
                cols: if req { cols } else { Vec::new() },
            },
            req,
        ))
    }

    /// Per-segment weighted row sum: `w` is `R x N`, `self` is `(R*N) x K`,
    /// output `R x K` with `out[r] = sum_n w[r, n] * self[r*N + n]`.
    pub fn segment_weighted_sum(self, weights: Var<'g, T>) -> Result<Self> {
        let (x, w) = (self.value(), weights.value());
        let (r, n) = (w.rows(), w.cols());
        if x.rows() != r * n {
            return Err(mismatch("segment_weighted_sum", x.shape(), w.shape()));
        }
        let k = x.cols();
        let mut out = vec![T::zero(); r * k];
        for ri in 0..r {
            let dst = &mut out[ri * k..(ri + 1) * k];
            for ni in 0..n {
                let wv = w.data()[ri * n + ni];
                let row = &x.data()[(ri * n + ni) * k..(ri * n + ni + 1) * k];
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d += wv * v;
                }
            }
        }
        drop((x, w));
        let req = self.graph.requires(&[self.id, weights.id]);
        Ok(self.graph.push(
            Tensor::raw(vec![r, k], out),
            Op::SegmentWeightedSum {
                w: weights.id,
                x: self.id,
            },
            req,
        ))
    }
}

impl<T: Scalar> Graph<T> {
    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols<'g>(&'g self, parts: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        let first = parts.first().ok_or_else(|| invalid("concat_cols", "no inputs"))?;
        let rows = first.value().rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let v = p.value();
            if v.rows() != rows {
                return Err(mismatch("concat_cols", first.value().shape(), v.shape()));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![T::zero(); rows * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let v = p.value();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w].copy_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let req = self.requires(&ids);
        Ok(self.push(Tensor::raw(vec![rows, total], data), Op::ConcatCols(ids), req))
    }

    /// Stacks matrices with equal column counts along rows.
    pub fn concat_rows<'g>(&'g self, parts: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        let first = parts.first().ok_or_else(|| invalid("concat_rows", "no inputs"))?;
        let cols = first.value().cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = p.value();
            if v.cols() != cols {
                return Err(mismatch("concat_rows", first.value().shape(), v.shape()));
            }
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let req = self.requires(&ids);
        Ok(self.push(Tensor::raw(vec![rows, cols], data), Op::ConcatRows(ids), req))
    }

    /// Registers an operation whose forward value was computed by the caller.
    pub fn custom<'g>(&'g self, inputs: &[Var<'g, T>], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var<'g, T> {
        let ids: Vec<usize> = inputs.iter().map(|p| p.id).collect();
        let req = self.requires(&ids);
        self.push(output, Op::Custom { inputs: ids, op }, req)
    }
}

fn add_into<T: Scalar>(dst: Option<&mut Vec<T>>, src: impl IntoIterator<Item = T>) {
    if let Some(d) = dst {
        for (a, b) in d.iter_mut().zip(src) {
            *a += b;
        }
    }
}

pub(crate) fn backward_op<T: Scalar>(op: &Op<T>, out_id: usize, g: &[T], sink: &mut GradSink<'_, T>) {
    let values = sink.values;
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            add_into(sink.slot(*a), g.iter().copied());
            add_into(sink.slot(*b), g.iter().copied());
        }
        Op::Sub(a, b) => {
            add_into(sink.slot(*a), g.iter().copied());
            add_into(sink.slot(*b), g.iter().map(|&v| -v));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&values[*a], &values[*b]);
            add_into(sink.slot(*a), g.iter().zip(bv.data()).map(|(&gg, &y)| gg * y));
            add_into(sink.slot(*b), g.iter().zip(av.data()).map(|(&gg, &x)| gg * x));
        }
        Op::AddRow(x, b) => {
            add_into(sink.slot(*x), g.iter().copied());
            let cols = values[*b].numel();
            if let Some(gb) = sink.slot(*b) {
                for row in g.chunks(cols) {
                    for (d, &v) in gb.iter_mut().zip(row) {
                        *d += v;
                    }
                }
            }
        }
        Op::MulCol(x, s) => {
            let (xv, sv) = (&values[*x], &values[*s]);
            let cols = xv.cols();
            if let Some(gx) = sink.slot(*x) {
                for ((d, gr), &scale) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(sv.data()) {
                    for (a, &b) in d.iter_mut().zip(gr) {
                        *a += b * scale;
                    }
                }
            }
            if let Some(gs) = sink.slot(*s) {
                for ((d, gr), xr) in gs.iter_mut().zip(g.chunks(cols)).zip(xv.data().chunks(cols)) {
                    *d += gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>();
                }
            }
        }
        Op::Scale(x, c) => add_into(sink.slot(*x), g.iter().map(|&v| v * *c)),
        Op::Offset(x) | Op::Reshape(x) => add_into(sink.slot(*x), g.iter().copied()),
        Op::MatMul(a, b) => {
            let (av, bv) = (&values[*a], &values[*b]);
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if let Some(ga) = sink.slot(*a) {
                gemm(m, n, k, g, false, bv.data(), true, ga, true);
            }
            if let Some(gb) = sink.slot(*b) {
                gemm(k, m, n, av.data(), true, g, false, gb, true);
            }
        }
        Op::ConcatCols(ids) => {
            let total = values[out_id].cols();
            let rows = values[out_id].rows();
            let mut offset = 0;
            for &id in ids {
                let w = values[id].cols();
                if let Some(gi) = sink.slot(id) {
                    for r in 0..rows {
                        for c in 0..w {
                            gi[r * w + c] += g[r * total + offset + c];
                        }
                    }
                }
                offset += w;
            }
        }
        Op::ConcatRows(ids) => {
            let mut offset = 0;
            for &id in ids {
                let n = values[id].numel();
                add_into(sink.slot(id), g[offset..offset + n].iter().copied());
                offset += n;
            }
        }
        Op::SliceCols { x, start } => {
            let cols = values[*x].cols();
            let len = values[out_id].cols();
            if let Some(gx) = sink.slot(*x) {
                for (dst, src) in gx.chunks_mut(cols).zip(g.chunks(len)) {
                    for (a, &b) in dst[*start..*start + len].iter_mut().zip(src) {
                        *a += b;
                    }
                }
            }
        }
        Op::SelectRows { x, idx } => {
            let cols = values[*x].cols();
            if let Some(gx) = sink.slot(*x) {
                for (o, &i) in idx.iter().enumerate() {
                    for c in 0..cols {
                        gx[i * cols + c] += g[o * cols + c];
                    }
                }
            }
        }
        Op::RepeatRows { x, times } => {
            let cols = values[*x].cols();
            if let Some(gx) = sink.slot(*x) {
                for (r, dst) in gx.chunks_mut(cols).enumerate() {
                    for t in 0..*times {
                        let src = &g[(r * times + t) * cols..(r * times + t + 1) * cols];
                        for (a, &b) in dst.iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                }
            }
        }
        Op::Transpose(x) => {
            let (r, c) = (values[*x].rows(), values[*x].cols());
            if let Some(gx) = sink.slot(*x) {
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Sum(x) => {
            let n = values[*x].numel();
            add_into(sink.slot(*x), std::iter::repeat(g[0]).take(n));
        }
        Op::Mean(x) => {
            let n = values[*x].numel();
            let v = g[0] / T::from_usize(n.max(1)).unwrap();
            add_into(sink.slot(*x), std::iter::repeat(v).take(n));
        }
        Op::SumCols(x) => {
            let cols = values[*x].cols();
            if let Some(gx) = sink.slot(*x) {
                for (dst, &gv) in gx.chunks_mut(cols).zip(g) {
                    dst.iter_mut().for_each(|d| *d += gv);
                }
            }
        }
        Op::Unary(x, kind) => {
            let (xv, yv) = (&values[*x], &values[out_id]);
            add_into(
                sink.slot(*x),
                g.iter()
                    .zip(xv.data().iter().zip(yv.data()))
                    .map(|(&gg, (&a, &y))| gg * unary_deriv(*kind, a, y)),
            );
        }
        Op::Softmax(x) => {
            let y = &values[out_id];
            let cols = y.cols();
            if let Some(gx) = sink.slot(*x) {
                for ((dst, gr), yr) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.data().chunks(cols)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((d, &gg), &yy) in dst.iter_mut().zip(gr).zip(yr) {
                        *d += yy * (gg - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(x) => {
            let y = &values[out_id];
            let cols = y.cols();
            if let Some(gx) = sink.slot(*x) {
                for ((dst, gr), yr) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.data().chunks(cols)) {
                    let total: T = gr.iter().copied().sum();
                    for ((d, &gg), &yy) in dst.iter_mut().zip(gr).zip(yr) {
                        *d += gg - yy.exp() * total;
                    }
                }
            }
        }
        Op::PickCols { x, idx } => {
            let cols = values[*x].cols();
            if let Some(gx) = sink.slot(*x) {
                for (r, &c) in idx.iter().enumerate() {
                    gx[r * cols + c] += g[r];
                }
            }
        }
        Op::Lattice(state) => lattice_backward(state, g, sink),
        Op::Conv2d { x, w, b, geom, cols } => {
            let wv = &values[*w];
            let cout = wv.shape()[0];
            let (patch, pixels) = (geom.patch_len(), geom.out_pixels());
            if let Some(gw) = sink.slot(*w) {
                gemm(cout, pixels, patch, g, false, cols, true, gw, true);
            }
            if let Some(gb) = sink.slot(*b) {
                for (d, row) in gb.iter_mut().zip(g.chunks(pixels)) {
                    *d += row.iter().copied().sum::<T>();
                }
            }
            if sink.wants(*x) {
                let mut dcols = vec![T::zero(); patch * pixels];
                gemm(patch, cout, pixels, wv.data(), true, g, false, &mut dcols, false);
                if let Some(gx) = sink.slot(*x) {
                    col2im(&dcols, geom, gx);
                }
            }
        }
        Op::SegmentWeightedSum { w, x } => {
            let (wv, xv) = (&values[*w], &values[*x]);
            let (r, n) = (wv.rows(), wv.cols());
            let k = xv.cols();
            if let Some(gw) = sink.slot(*w) {
                for ri in 0..r {
                    let gr = &g[ri * k..(ri + 1) * k];
                    for ni in 0..n {
                        let row = &xv.data()[(ri * n + ni) * k..(ri * n + ni + 1) * k];
                        gw[ri * n + ni] += gr.iter().zip(row).map(|(&a, &b)| a * b).sum::<T>();
                    }
                }
            }
            if let Some(gx) = sink.slot(*x) {
                for ri in 0..r {
                    let gr = &g[ri * k..(ri + 1) * k];
                    for ni in 0..n {
                        let wv = wv.data()[ri * n + ni];
                        let dst = &mut gx[(ri * n + ni) * k..(ri * n + ni + 1) * k];
                        for (d, &gg) in dst.iter_mut().zip(gr) {
                            *d += wv * gg;
                        }
                    }
                }
            }
        }
        Op::Custom { inputs, op } => {
            let ins: Vec<&Tensor<T>> = inputs.iter().map(|&i| &*values[i]).collect();
            let needs: Vec<bool> = inputs.iter().map(|&i| sink.wants(i)).collect();
            let grads = op.backward(&ins, &values[out_id], g, &needs);
            for (&i, gi) in inputs.iter().zip(grads) {
                if let Some(gi) = gi {
                    add_into(sink.slot(i), gi);
                }
            }
        }
    }
}

fn lattice_backward<T: Scalar>(state: &LatticeState<T>, g: &[T], sink: &mut GradSink<'_, T>) {
    let values = sink.values;
    let dims = state.dims;
    let k = 1usize << dims;
    let table = &values[state.table];
    let cols = table.cols();
    let samples = state.corners.len() / k;
    if let Some((qid, columns, scales)) = &state.coords {
        if sink.wants(*qid) {
            let qcols = values[*qid].cols();
            let mut gq = vec![T::zero(); values[*qid].numel()];
            for s in 0..samples {
                let f = &state.fracs[s * dims..(s + 1) * dims];
                let gs = &g[s * cols..(s + 1) * cols];
                for c in 0..k {
                    let row = state.corners[s * k + c] as usize * cols;
                    let dot: T = gs.iter().zip(&table.data()[row..row + cols]).map(|(&a, &b)| a * b).sum();
                    for a in 0..dims {
                        // d/df_a of the corner weight: the other factors, signed.
                        let mut dw = if c >> a & 1 == 1 { T::one() } else { -T::one() };
                        for (b, &fb) in f.iter().enumerate() {
                            if b != a {
                                dw *= if c >> b & 1 == 1 { fb } else { T::one() - fb };
                            }
                        }
                        gq[s * qcols + columns[a]] += dot * dw * scales[a];
                    }
                }
            }
            add_into(sink.slot(*qid), gq);
        }
    }
    if let Some(gt) = sink.slot(state.table) {
        for s in 0..samples {
            let f = &state.fracs[s * dims..(s + 1) * dims];
            let gs = &g[s * cols..(s + 1) * cols];
            for c in 0..k {
                let w = lattice_weight(f, c);
                let row = state.corners[s * k + c] as usize * cols;
                for (d, &gg) in gt[row..row + cols].iter_mut().zip(gs) {
                    *d += w * gg;
                }
            }
        }
    }
}
