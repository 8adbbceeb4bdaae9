//! Differentiable operations: forward evaluation and the matching
//! vector-Jacobian products.

use super::kernels::{col2im_add, conv_output_size, gemm_into, im2col, ConvGeom, Mat};
use super::tape::{Node, Tape, Var};
use super::{s, Scalar, Tensor};
use crate::error::{Error, Result};

pub(crate) enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Ln(Var),
    Softmax(Var),
    Masked { x: Var, allowed: Vec<bool> },
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<T>, rstd: Vec<T> },
    Conv2d { x: Var, kernel: Var, bias: Option<Var>, geom: ConvGeom },
    MaxPool { x: Var, argmax: Vec<usize> },
    MeanRows(Var),
    ChannelMean(Var),
    Concat(Vec<Var>),
    SelectRows { x: Var, index: Vec<usize> },
    Gather { x: Var, index: Vec<usize> },
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    PairwiseL2 { q: Var, g: Var },
    NormalizeRows { x: Var, norms: Vec<T> },
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn gelu<T: Scalar>(x: T) -> T {
    let u = s::<T>(GELU_C) * (x + s::<T>(GELU_A) * x * x * x);
    s::<T>(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = s::<T>(GELU_C);
    let a = s::<T>(GELU_A);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + s::<T>(3.0) * a * x * x);
    s::<T>(0.5) * (T::one() + t) + s::<T>(0.5) * x * (T::one() - t * t) * du
}

/// Rows of a trailing-axis layout: `(rows, d)` where `d` is the last dimension.
fn rows_of(shape: &[usize]) -> (usize, usize) {
    let d = *shape.last().expect("rank >= 1");
    (shape.iter().product::<usize>() / d, d)
}

impl<T: Scalar> Tape<T> {
    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(x).map(f);
        self.push(out, op)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape(), data).expect("same shape");
        self.push(out, op)
    }

    /// Matrix product of rank-2 tensors `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `a * b^T` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, true)
    }

    fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let [ar, ac] = self.value(a).dims2("matmul")?;
        let [br, bc] = self.value(b).dims2("matmul")?;
        let mut ma = Mat::new(self.value(a).data(), ar, ac);
        let mut mb = Mat::new(self.value(b).data(), br, bc);
        if ta {
            ma = ma.t();
        }
        if tb {
            mb = mb.t();
        }
        let (m, k) = ma.dims();
        let (k2, n) = mb.dims();
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_into(ma, mb, T::zero(), &mut out);
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    fn row_param_check(&self, op: &'static str, x: Var, p: Var) -> Result<()> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(p) != [d] {
            return Err(Error::shape(op, self.shape(x), self.shape(p)));
        }
        Ok(())
    }

    /// `x + b` with `b: [d]` broadcast over every trailing-axis row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        self.row_param_check("add_row", x, b)?;
        let bias = self.value(b).data();
        let d = bias.len();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            for (v, &bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        Ok(self.push(out, Op::AddRow(x, b)))
    }

    /// `x * g` with `g: [d]` broadcast over every trailing-axis row of `x`.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        self.row_param_check("mul_row", x, g)?;
        let gain = self.value(g).data();
        let d = gain.len();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            for (v, &gv) in row.iter_mut().zip(gain) {
                *v *= gv;
            }
        }
        Ok(self.push(out, Op::MulRow(x, g)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    /// Natural logarithm; inputs must be positive.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| !(v > T::zero())) {
            return Err(Error::Numeric("logarithm of a non-positive value".into()));
        }
        Ok(self.unary(x, |v| v.ln(), Op::Ln(x)))
    }

    /// Softmax over the last axis with max subtraction.
    ///
    /// `-inf` entries are treated as masked and receive zero weight; NaN,
    /// `+inf`, or a fully masked row is a numeric error.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (_, d) = rows_of(xv.shape());
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            let mut max = T::neg_infinity();
            for &v in row.iter() {
                if v.is_nan() || v == T::infinity() {
                    return Err(Error::Numeric("softmax input is not finite".into()));
                }
                max = max.max(v);
            }
            if max == T::neg_infinity() {
                return Err(Error::Numeric("softmax row is fully masked".into()));
            }
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Ok(self.push(out, Op::Softmax(x)))
    }

    /// Replace entries whose `allowed` flag is false with `-inf`.
    pub fn masked(&mut self, x: Var, allowed: Vec<bool>) -> Result<Var> {
        if allowed.len() != self.value(x).len() {
            return Err(Error::shape("masked", self.shape(x), &[allowed.len()]));
        }
        let mut out = self.value(x).clone();
        for (v, &keep) in out.data_mut().iter_mut().zip(&allowed) {
            if !keep {
                *v = T::neg_infinity();
            }
        }
        Ok(self.push(out, Op::Masked { x, allowed }))
    }

    /// Layer normalization over the last axis followed by a per-feature affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.row_param_check("layer_norm", x, gain)?;
        self.row_param_check("layer_norm", x, bias)?;
        let xv = self.value(x);
        let (rows, d) = rows_of(xv.shape());
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let dn = s::<T>(d as f64);
        let mut out = xv.clone();
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        for row in out.data_mut().chunks_mut(d) {
            let m = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / dn;
            let r = T::one() / (var + s::<T>(eps)).sqrt();
            for ((v, &g), &b) in row.iter_mut().zip(gv).zip(bv) {
                *v = (*v - m) * r * g + b;
            }
            mean.push(m);
            rstd.push(r);
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
        ))
    }

    /// Cross-correlation of `x: [c_in, h, w]` with `kernel: [c_out, c_in, k, k]`,
    /// plus an optional per-output-channel bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let [c_in, h, w] = self.value(x).dims3("conv2d")?;
        let ks = self.shape(kernel).to_vec();
        let (c_out, k) = match ks[..] {
            [co, ci, kh, kw] if ci == c_in && kh == kw => (co, kh),
            _ => return Err(Error::shape("conv2d", self.shape(x), &ks)),
        };
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(Error::shape("conv2d bias", &ks, self.shape(b)));
            }
        }
        let geom = ConvGeom {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out: conv_output_size(h, k, stride, pad)?,
            w_out: conv_output_size(w, k, stride, pad)?,
        };
        let hw_out = geom.h_out * geom.w_out;
        let mut out = vec![T::zero(); c_out * hw_out];
        let xd = self.value(x).data();
        let kd = Mat::new(self.value(kernel).data(), c_out, c_in * k * k);
        if is_pointwise(&geom) {
            gemm_into(kd, Mat::new(xd, c_in, hw_out), T::zero(), &mut out);
        } else {
            let mut col = vec![T::zero(); c_in * k * k * hw_out];
            im2col(xd, &geom, &mut col);
            gemm_into(kd, Mat::new(&col, c_in * k * k, hw_out), T::zero(), &mut out);
        }
        if let Some(b) = bias {
            for (plane, &bv) in out.chunks_mut(hw_out).zip(self.value(b).data()) {
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
        let out = Tensor::new(&[c_out, geom.h_out, geom.w_out], out)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
            },
        ))
    }

    /// Max pooling over `size x size` windows of `x: [c, h, w]`.
    pub fn maxpool2d(&mut self, x: Var, size: usize, stride: usize) -> Result<Var> {
        let [c, h, w] = self.value(x).dims3("maxpool2d")?;
        let ho = conv_output_size(h, size, stride, 0)?;
        let wo = conv_output_size(w, size, stride, 0)?;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = usize::MAX;
                    let mut best_v = T::neg_infinity();
                    for ky in 0..size {
                        for kx in 0..size {
                            let idx = (ch * h + oy * stride + ky) * w + ox * stride + kx;
                            if best == usize::MAX || xd[idx] > best_v {
                                best = idx;
                                best_v = xd[idx];
                            }
                        }
                    }
                    out.push(best_v);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(&[c, ho, wo], out)?;
        Ok(self.push(out, Op::MaxPool { x, argmax }))
    }

    /// Mean over the rows of `x: [n, d]`, giving `[d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let [n, d] = self.value(x).dims2("mean_rows")?;
        let mut out = vec![T::zero(); d];
        for row in self.value(x).data().chunks(d) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = s::<T>(1.0 / n as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        Ok(self.push(Tensor::new(&[d], out)?, Op::MeanRows(x)))
    }

    /// Global average pooling of `x: [c, h, w]`, giving `[c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [c, h, w] = self.value(x).dims3("global_avg_pool")?;
        let inv = s::<T>(1.0 / (h * w) as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        Ok(self.push(Tensor::new(&[c], out)?, Op::ChannelMean(x)))
    }

    /// Concatenate along the leading axis; trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let sh = self.shape(p);
            if sh[1..] != tail[..] {
                return Err(Error::shape("concat", self.shape(first), sh));
            }
            lead += sh[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat(parts.to_vec())))
    }

    /// Rows of `x` (leading axis) picked by `index`, in that order.
    pub fn select_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let row = shape[1..].iter().product::<usize>();
        if index.is_empty() || index.iter().any(|&i| i >= shape[0]) {
            return Err(Error::Usage(format!(
                "row selection out of range for leading extent {}",
                shape[0]
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(index.len() * row);
        for &i in index {
            data.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = index.len();
        Ok(self.push(
            Tensor::new(&out_shape, data)?,
            Op::SelectRows {
                x,
                index: index.to_vec(),
            },
        ))
    }

    /// Flat elements of `x` picked by `index`, as a vector.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if index.is_empty() || index.iter().any(|&i| i >= src.len()) {
            return Err(Error::Usage("gather index out of range".into()));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        Ok(self.push(
            Tensor::new(&[index.len()], data)?,
            Op::Gather {
                x,
                index: index.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transposed()?;
        Ok(self.push(out, Op::Transpose(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(v), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let v = xv.data().iter().copied().sum::<T>() / s::<T>(xv.len() as f64);
        self.push(Tensor::scalar(v), Op::Mean(x))
    }

    /// Euclidean distances between the rows of `q: [n, d]` and `g: [m, d]`.
    pub fn pairwise_l2(&mut self, q: Var, g: Var) -> Result<Var> {
        let [n, d] = self.value(q).dims2("pairwise_l2")?;
        let [m, d2] = self.value(g).dims2("pairwise_l2")?;
        if d != d2 {
            return Err(Error::shape("pairwise_l2", self.shape(q), self.shape(g)));
        }
        let (qd, gd) = (self.value(q).data(), self.value(g).data());
        let mut out = Vec::with_capacity(n * m);
        for qi in qd.chunks(d) {
            for gj in gd.chunks(d) {
                let ss: T = qi.iter().zip(gj).map(|(&a, &b)| (a - b) * (a - b)).sum();
                out.push(ss.sqrt());
            }
        }
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::PairwiseL2 { q, g }))
    }

    /// Scale every trailing-axis row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (_, d) = rows_of(self.shape(x));
        let mut out = self.value(x).clone();
        let mut norms = Vec::new();
        for row in out.data_mut().chunks_mut(d) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(n > T::zero()) || !n.is_finite() {
                return Err(Error::DegenerateDescriptor);
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok(self.push(out, Op::NormalizeRows { x, norms }))
    }
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.k == 1 && g.stride == 1 && g.pad == 0
}

fn value<T>(nodes: &[Node<T>], v: Var) -> &Tensor<T> {
    &nodes[v.0].value
}

fn needs<T>(nodes: &[Node<T>], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn like<T: Scalar>(t: &Tensor<T>, data: Vec<T>) -> Tensor<T> {
    Tensor::new(t.shape(), data).expect("gradient matches input shape")
}

fn row_sums<T: Scalar>(rows: impl Iterator<Item = T>, d: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); d];
    for (i, v) in rows.enumerate() {
        acc[i % d] += v;
    }
    acc
}

impl<T: Scalar> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } => vec![*a, *b],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulRow(a, b) => vec![*a, *b],
            Scale(x, _) | Relu(x) | Gelu(x) | Sigmoid(x) | Softplus(x) | Ln(x) | Softmax(x)
            | MeanRows(x) | ChannelMean(x) | Reshape(x) | Transpose(x) | Sum(x) | Mean(x) => {
                vec![*x]
            }
            Masked { x, .. }
            | MaxPool { x, .. }
            | SelectRows { x, .. }
            | Gather { x, .. }
            | NormalizeRows { x, .. } => vec![*x],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Conv2d {
                x, kernel, bias, ..
            } => {
                let mut v = vec![*x, *kernel];
                v.extend(bias.iter().copied());
                v
            }
            Concat(parts) => parts.clone(),
            PairwiseL2 { q, g } => vec![*q, *g],
        }
    }

    /// Contributions to the gradients of this op's inputs given the
    /// gradient `g` of its output `out`.
    pub(crate) fn backward(
        &self,
        out: &Tensor<T>,
        g: &Tensor<T>,
        nodes: &[Node<T>],
    ) -> Result<Vec<(Var, Tensor<T>)>> {
        use Op::*;
        let gd = g.data();
        let mut res = Vec::new();
        match self {
            Leaf => {}
            MatMul { a, b, ta, tb } => {
                let (av, bv) = (value(nodes, *a), value(nodes, *b));
                let [ar, ac] = av.dims2("matmul")?;
                let [br, bc] = bv.dims2("matmul")?;
                let [m, n] = out.dims2("matmul")?;
                let ma = Mat::new(av.data(), ar, ac);
                let mb = Mat::new(bv.data(), br, bc);
                let op_a = if *ta { ma.t() } else { ma };
                let op_b = if *tb { mb.t() } else { mb };
                let dc = Mat::new(gd, m, n);
                if needs(nodes, *a) {
                    let mut da = vec![T::zero(); av.len()];
                    if *ta {
                        gemm_into(op_b, dc.t(), T::zero(), &mut da);
                    } else {
                        gemm_into(dc, op_b.t(), T::zero(), &mut da);
                    }
                    res.push((*a, like(av, da)));
                }
                if needs(nodes, *b) {
                    let mut db = vec![T::zero(); bv.len()];
                    if *tb {
                        gemm_into(dc.t(), op_a, T::zero(), &mut db);
                    } else {
                        gemm_into(op_a.t(), dc, T::zero(), &mut db);
                    }
                    res.push((*b, like(bv, db)));
                }
            }
            Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Sub(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.map(|v| -v)));
            }
            Mul(a, b) => {
                let (av, bv) = (value(nodes, *a), value(nodes, *b));
                let da = gd.iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                let db = gd.iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                res.push((*a, like(av, da)));
                res.push((*b, like(bv, db)));
            }
            Scale(x, c) => res.push((*x, g.map(|v| v * *c))),
            AddRow(x, b) => {
                let bv = value(nodes, *b);
                res.push((*x, g.clone()));
                res.push((*b, like(bv, row_sums(gd.iter().copied(), bv.len()))));
            }
            MulRow(x, w) => {
                let (xv, wv) = (value(nodes, *x), value(nodes, *w));
                let d = wv.len();
                let dx = gd
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| v * wv.data()[i % d])
                    .collect();
                let dw = row_sums(gd.iter().zip(xv.data()).map(|(&a, &b)| a * b), d);
                res.push((*x, like(xv, dx)));
                res.push((*w, like(wv, dw)));
            }
            Relu(x) => {
                let dx = gd
                    .iter()
                    .zip(out.data())
                    .map(|(&v, &y)| if y > T::zero() { v } else { T::zero() })
                    .collect();
                res.push((*x, like(out, dx)));
            }
            Gelu(x) => {
                let xv = value(nodes, *x);
                let dx = gd
                    .iter()
                    .zip(xv.data())
                    .map(|(&v, &xi)| v * gelu_grad(xi))
                    .collect();
                res.push((*x, like(xv, dx)));
            }
            Sigmoid(x) => {
                let dx = gd
                    .iter()
                    .zip(out.data())
                    .map(|(&v, &y)| v * y * (T::one() - y))
                    .collect();
                res.push((*x, like(out, dx)));
            }
            Softplus(x) => {
                let xv = value(nodes, *x);
                let dx = gd
                    .iter()
                    .zip(xv.data())
                    .map(|(&v, &xi)| v * sigmoid(xi))
                    .collect();
                res.push((*x, like(xv, dx)));
            }
            Ln(x) => {
                let xv = value(nodes, *x);
                let dx = gd.iter().zip(xv.data()).map(|(&v, &xi)| v / xi).collect();
                res.push((*x, like(xv, dx)));
            }
            Softmax(x) => {
                let (_, d) = rows_of(out.shape());
                let mut dx = Vec::with_capacity(out.len());
                for (y, gr) in out.data().chunks(d).zip(gd.chunks(d)) {
                    let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    dx.extend(y.iter().zip(gr).map(|(&yi, &gi)| yi * (gi - dot)));
                }
                res.push((*x, like(out, dx)));
            }
            Masked { x, allowed } => {
                let dx = gd
                    .iter()
                    .zip(allowed)
                    .map(|(&v, &keep)| if keep { v } else { T::zero() })
                    .collect();
                res.push((*x, like(out, dx)));
            }
            LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let xv = value(nodes, *x);
                let gv = value(nodes, *gain).data();
                let (_, d) = rows_of(xv.shape());
                let dn = s::<T>(d as f64);
                let mut dx = Vec::with_capacity(xv.len());
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                for (r, (xr, gr)) in xv.data().chunks(d).zip(gd.chunks(d)).enumerate() {
                    let (m, rs) = (mean[r], rstd[r]);
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..d {
                        let xhat = (xr[j] - m) * rs;
                        let dxhat = gr[j] * gv[j];
                        dgain[j] += gr[j] * xhat;
                        dbias[j] += gr[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    for j in 0..d {
                        let xhat = (xr[j] - m) * rs;
                        let dxhat = gr[j] * gv[j];
                        dx.push(rs * (dxhat - sum_dxhat / dn - xhat * sum_dxhat_xhat / dn));
                    }
                }
                res.push((*x, like(xv, dx)));
                res.push((*gain, Tensor::new(&[d], dgain)?));
                res.push((*bias, Tensor::new(&[d], dbias)?));
            }
            Conv2d {
                x,
                kernel,
                bias,
                geom,
            } => {
                let (xv, kv) = (value(nodes, *x), value(nodes, *kernel));
                let c_out = kv.shape()[0];
                let kk = geom.c_in * geom.k * geom.k;
                let hw_out = geom.h_out * geom.w_out;
                let dy = Mat::new(gd, c_out, hw_out);
                let pointwise = is_pointwise(geom);
                let col_store;
                let col: &[T] = if pointwise {
                    xv.data()
                } else {
                    let mut c = vec![T::zero(); kk * hw_out];
                    im2col(xv.data(), geom, &mut c);
                    col_store = c;
                    &col_store
                };
                if needs(nodes, *kernel) {
                    let mut dk = vec![T::zero(); kv.len()];
                    gemm_into(dy, Mat::new(col, kk, hw_out).t(), T::zero(), &mut dk);
                    res.push((*kernel, like(kv, dk)));
                }
                if needs(nodes, *x) {
                    let km = Mat::new(kv.data(), c_out, kk).t();
                    if pointwise {
                        let mut dx = vec![T::zero(); xv.len()];
                        gemm_into(km, dy, T::zero(), &mut dx);
                        res.push((*x, like(xv, dx)));
                    } else {
                        let mut dcol = vec![T::zero(); kk * hw_out];
                        gemm_into(km, dy, T::zero(), &mut dcol);
                        let mut dx = vec![T::zero(); xv.len()];
                        col2im_add(&dcol, geom, &mut dx);
                        res.push((*x, like(xv, dx)));
                    }
                }
                if let Some(b) = bias {
                    let db = gd.chunks(hw_out).map(|p| p.iter().copied().sum()).collect();
                    res.push((*b, Tensor::new(&[c_out], db)?));
                }
            }
            MaxPool { x, argmax } => {
                let xv = value(nodes, *x);
                let mut dx = vec![T::zero(); xv.len()];
                for (&i, &v) in argmax.iter().zip(gd) {
                    dx[i] += v;
                }
                res.push((*x, like(xv, dx)));
            }
            MeanRows(x) => {
                let xv = value(nodes, *x);
                let [n, d] = xv.dims2("mean_rows")?;
                let inv = s::<T>(1.0 / n as f64);
                let dx = (0..n * d).map(|i| gd[i % d] * inv).collect();
                res.push((*x, like(xv, dx)));
            }
            ChannelMean(x) => {
                let xv = value(nodes, *x);
                let [c, h, w] = xv.dims3("global_avg_pool")?;
                let inv = s::<T>(1.0 / (h * w) as f64);
                let dx = (0..c * h * w).map(|i| gd[i / (h * w)] * inv).collect();
                res.push((*x, like(xv, dx)));
            }
            Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pv = value(nodes, p);
                    res.push((p, like(pv, gd[off..off + pv.len()].to_vec())));
                    off += pv.len();
                }
            }
            SelectRows { x, index } => {
                let xv = value(nodes, *x);
                let row = xv.len() / xv.shape()[0];
                let mut dx = vec![T::zero(); xv.len()];
                for (k, &i) in index.iter().enumerate() {
                    for (d, &v) in dx[i * row..(i + 1) * row]
                        .iter_mut()
                        .zip(&gd[k * row..(k + 1) * row])
                    {
                        *d += v;
                    }
                }
                res.push((*x, like(xv, dx)));
            }
            Gather { x, index } => {
                let xv = value(nodes, *x);
                let mut dx = vec![T::zero(); xv.len()];
                for (&i, &v) in index.iter().zip(gd) {
                    dx[i] += v;
                }
                res.push((*x, like(xv, dx)));
            }
            Reshape(x) => {
                let xv = value(nodes, *x);
                res.push((*x, like(xv, gd.to_vec())));
            }
            Transpose(x) => res.push((*x, g.transposed()?)),
            Sum(x) => {
                let xv = value(nodes, *x);
                res.push((*x, Tensor::full(xv.shape(), gd[0])));
            }
            Mean(x) => {
                let xv = value(nodes, *x);
                let v = gd[0] / s::<T>(xv.len() as f64);
                res.push((*x, Tensor::full(xv.shape(), v)));
            }
            PairwiseL2 { q, g: gal } => {
                let (qv, gv) = (value(nodes, *q), value(nodes, *gal));
                let [n, d] = qv.dims2("pairwise_l2")?;
                let [m, _] = gv.dims2("pairwise_l2")?;
                let mut dq = vec![T::zero(); qv.len()];
                let mut dg = vec![T::zero(); gv.len()];
                for i in 0..n {
                    for j in 0..m {
                        let dist = out.data()[i * m + j];
                        // Zero distance is a kink; take the zero subgradient there.
                        if dist == T::zero() {
                            continue;
                        }
                        let w = gd[i * m + j] / dist;
                        for k in 0..d {
                            let diff = qv.data()[i * d + k] - gv.data()[j * d + k];
                            dq[i * d + k] += w * diff;
                            dg[j * d + k] -= w * diff;
                        }
                    }
                }
                res.push((*q, like(qv, dq)));
                res.push((*gal, like(gv, dg)));
            }
            NormalizeRows { x, norms } => {
                let (_, d) = rows_of(out.shape());
                let mut dx = Vec::with_capacity(out.len());
                for ((y, gr), &n) in out.data().chunks(d).zip(gd.chunks(d)).zip(norms) {
                    let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    dx.extend(y.iter().zip(gr).map(|(&yi, &gi)| (gi - yi * dot) / n));
                }
                res.push((*x, like(out, dx)));
            }
        }
        Ok(res)
    }
}
