//! Dense row-major tensors and the forward/backward kernels the network
//! layers are built from.
//!
//! Images and feature maps are laid out `H x W x C` (channels innermost);
//! batched variants prepend a leading `B` dimension. Convolution is
//! cross-correlation (kernels are not flipped) with kernels laid out
//! `kh x kw x Cin x Cout`.

use std::fmt;

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview = &self.data[..self.data.len().min(8)];
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

fn shape_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) && !data.is_empty() {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        if shape_len(shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {} elements, got {}",
                shape_len(shape),
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); shape_len(shape)] }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape_len(shape)] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let data = (0..shape_len(shape)).map(&mut f).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape_len(shape) != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Row `i` of a tensor viewed as `shape[0] x rest`.
    pub fn row(&self, i: usize) -> &[T] {
        let w = self.data.len() / self.shape[0];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let w = self.data.len() / self.shape[0];
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Tensor<T>) -> Result<T> {
        self.check_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    pub(crate) fn check_same_shape(&self, other: &Tensor<T>, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub(crate) fn expect_shape(&self, shape: &[usize], what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(format!(
                "{what}: expected {shape:?}, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }
}

fn as_matrix<T>(t: &Tensor<T>, name: &str) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        &[r, c] => Ok((r, c)),
        s => Err(Error::shape(format!("{name} must be 2-D, got {s:?}"))),
    }
}

/// Matrix product of `m x k` and `k x n` tensors.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = as_matrix(a, "matmul lhs")?;
    let (k2, n) = as_matrix(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul {:?} x {:?}: inner dimensions differ",
            a.shape, b.shape
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    T::gemm(m, k, n, T::one(), &a.data, false, &b.data, false, T::zero(), &mut out.data);
    Ok(out)
}

/// Row-wise softmax of an `n x K` score matrix, max-subtracted.
pub fn softmax_rows<T: Real>(scores: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = as_matrix(scores, "softmax input")?;
    let mut out = scores.clone();
    if k == 0 {
        return Ok(out);
    }
    for row in out.data.chunks_mut(k) {
        softmax_in_place(row);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Backward of a row-wise softmax given its output `p` and the cotangent
/// `dp` of the same row: `dz = p * (dp - <p, dp>)`.
pub(crate) fn softmax_backward_row<T: Real>(p: &[T], dp: &[T], dz: &mut [T]) {
    let inner: T = p.iter().zip(dp).map(|(&a, &b)| a * b).sum();
    for ((z, &pi), &dpi) in dz.iter_mut().zip(p).zip(dp) {
        *z = pi * (dpi - inner);
    }
}

pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

pub fn relu_in_place<T: Real>(t: &mut Tensor<T>) {
    for v in &mut t.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes `grad` wherever the ReLU output was not positive.
pub fn relu_backward_in_place<T: Real>(output: &Tensor<T>, grad: &mut Tensor<T>) {
    for (g, &o) in grad.data.iter_mut().zip(&output.data) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Per-side zero padding of a convolution input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn same(p: usize) -> Self {
        Padding { top: p, bottom: p, left: p, right: p }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    batch: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    pad: Padding,
    stride: usize,
}

impl ConvGeometry {
    fn new<T>(input: &Tensor<T>, kernels: &Tensor<T>, pad: Padding, stride: usize) -> Result<Self> {
        let (batch, h, w, cin) = match input.shape.as_slice() {
            &[b, h, w, c] => (b, h, w, c),
            s => return Err(Error::shape(format!("conv2d input must be B x H x W x C, got {s:?}"))),
        };
        let (kh, kw, kcin, cout) = match kernels.shape.as_slice() {
            &[a, b, c, d] => (a, b, c, d),
            s => return Err(Error::shape(format!("conv2d kernels must be kh x kw x Cin x Cout, got {s:?}"))),
        };
        if kcin != cin {
            return Err(Error::shape(format!(
                "conv2d input {:?} has {cin} channels, kernels {:?} expect {kcin}",
                input.shape, kernels.shape
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let out_dim = |n: usize, lo: usize, hi: usize, k: usize, axis: &str| -> Result<usize> {
            let padded = n + lo + hi;
            if padded < k || (padded - k) % stride != 0 {
                return Err(Error::shape(format!(
                    "conv2d {axis}: ({n} + {lo} + {hi} - {k}) / {stride} is not a non-negative integer"
                )));
            }
            Ok((padded - k) / stride + 1)
        };
        let oh = out_dim(h, pad.top, pad.bottom, kh, "height")?;
        let ow = out_dim(w, pad.left, pad.right, kw, "width")?;
        Ok(ConvGeometry { batch, h, w, cin, kh, kw, cout, oh, ow, pad, stride })
    }

    fn rows(&self) -> usize {
        self.batch * self.oh * self.ow
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    /// Input offset for output pixel (oy, ox) and kernel tap (ky, kx), or
    /// `None` when the tap lands in padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad.top)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad.left)?;
        if y < self.h && x < self.w {
            Some((y, x))
        } else {
            None
        }
    }
}

fn im2col<T: Real>(input: &[T], g: &ConvGeometry) -> Vec<T> {
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.rows() * patch];
    let img = g.h * g.w * g.cin;
    let mut row = 0;
    for b in 0..g.batch {
        let src = &input[b * img..(b + 1) * img];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            let o = (ky * g.kw + kx) * g.cin;
                            let s = (y * g.w + x) * g.cin;
                            dst[o..o + g.cin].copy_from_slice(&src[s..s + g.cin]);
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, out: &mut [T]) {
    let patch = g.patch();
    let img = g.h * g.w * g.cin;
    let mut row = 0;
    for b in 0..g.batch {
        let dst = &mut out[b * img..(b + 1) * img];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let src = &cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            let o = (ky * g.kw + kx) * g.cin;
                            let d = (y * g.w + x) * g.cin;
                            for (a, &v) in dst[d..d + g.cin].iter_mut().zip(&src[o..o + g.cin]) {
                                *a += v;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn check_bias<T>(bias: &Tensor<T>, cout: usize) -> Result<()> {
    if bias.shape != [cout] {
        return Err(Error::shape(format!("conv2d bias must be [{cout}], got {:?}", bias.shape)));
    }
    Ok(())
}

/// Batched 2-D cross-correlation: `B x H x W x Cin` to `B x H' x W' x Cout`.
pub fn conv2d_batch<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    padding: Padding,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input, kernels, padding, stride)?;
    check_bias(bias, g.cout)?;
    let cols = im2col(&input.data, &g);
    let mut out = Tensor::zeros(&[g.batch, g.oh, g.ow, g.cout]);
    for row in out.data.chunks_mut(g.cout) {
        row.copy_from_slice(&bias.data);
    }
    T::gemm(g.rows(), g.patch(), g.cout, T::one(), &cols, false, &kernels.data, false, T::one(), &mut out.data);
    Ok(out)
}

/// Single-image convolution on `H x W x Cin`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    padding: Padding,
    stride: usize,
) -> Result<Tensor<T>> {
    let mut shape = vec![1];
    shape.extend_from_slice(&input.shape);
    if shape.len() != 4 {
        return Err(Error::shape(format!("conv2d input must be H x W x C, got {:?}", input.shape)));
    }
    let batched = input.clone().reshape(&shape)?;
    let out = conv2d_batch(&batched, kernels, bias, padding, stride)?;
    let s = out.shape[1..].to_vec();
    out.reshape(&s)
}

/// Gradients of [`conv2d_batch`]. Returns `(d_input, d_kernels, d_bias)`;
/// `d_input` is skipped when not requested.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    d_out: &Tensor<T>,
    padding: Padding,
    stride: usize,
    want_input_grad: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeometry::new(input, kernels, padding, stride)?;
    d_out.expect_shape(&[g.batch, g.oh, g.ow, g.cout], "conv2d cotangent")?;
    let cols = im2col(&input.data, &g);

    let mut d_bias = Tensor::zeros(&[g.cout]);
    for row in d_out.data.chunks(g.cout) {
        for (b, &v) in d_bias.data.iter_mut().zip(row) {
            *b += v;
        }
    }

    let mut d_kernels = Tensor::zeros(&kernels.shape);
    T::gemm(g.patch(), g.rows(), g.cout, T::one(), &cols, true, &d_out.data, false, T::zero(), &mut d_kernels.data);

    let d_input = if want_input_grad {
        let mut d_cols = vec![T::zero(); cols.len()];
        T::gemm(g.rows(), g.cout, g.patch(), T::one(), &d_out.data, false, &kernels.data, true, T::zero(), &mut d_cols);
        let mut d_in = Tensor::zeros(&input.shape);
        col2im(&d_cols, &g, &mut d_in.data);
        Some(d_in)
    } else {
        None
    };
    Ok((d_input, d_kernels, d_bias))
}

/// Output of a 2x2/stride-2 max pool together with the flat input index
/// that won each window.
#[derive(Clone, Debug)]
pub struct Pooled<T> {
    pub output: Tensor<T>,
    pub argmax: Vec<usize>,
}

/// Batched 2x2 max pool with stride 2 over `B x H x W x C`. Odd edges are
/// treated as padded with negative infinity; ties go to the first window
/// element in row-major order.
pub fn maxpool2_batch<T: Real>(input: &Tensor<T>) -> Result<Pooled<T>> {
    let (b, h, w, c) = match input.shape.as_slice() {
        &[b, h, w, c] => (b, h, w, c),
        s => return Err(Error::shape(format!("maxpool2 input must be B x H x W x C, got {s:?}"))),
    };
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Tensor::zeros(&[b, oh, ow, c]);
    let mut argmax = vec![0usize; out.len()];
    let mut o = 0;
    for n in 0..b {
        let base = n * h * w * c;
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (y, x) = (2 * oy + dy, 2 * ox + dx);
                            if y < h && x < w {
                                let idx = base + (y * w + x) * c + ch;
                                let v = input.data[idx];
                                if best_idx == usize::MAX || v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    out.data[o] = best;
                    argmax[o] = best_idx;
                    o += 1;
                }
            }
        }
    }
    Ok(Pooled { output: out, argmax })
}

/// Single-image max pool on `H x W x C`.
pub fn maxpool2<T: Real>(input: &Tensor<T>) -> Result<Pooled<T>> {
    let mut shape = vec![1];
    shape.extend_from_slice(&input.shape);
    if shape.len() != 4 {
        return Err(Error::shape(format!("maxpool2 input must be H x W x C, got {:?}", input.shape)));
    }
    let mut pooled = maxpool2_batch(&input.clone().reshape(&shape)?)?;
    let s = pooled.output.shape[1..].to_vec();
    pooled.output = pooled.output.reshape(&s)?;
    Ok(pooled)
}

/// Routes the pooled cotangent back to the winning input positions.
pub fn maxpool2_backward<T: Real>(input_shape: &[usize], argmax: &[usize], d_out: &Tensor<T>) -> Result<Tensor<T>> {
    if argmax.len() != d_out.len() {
        return Err(Error::shape(format!(
            "maxpool2 backward: {} indices for cotangent {:?}",
            argmax.len(),
            d_out.shape
        )));
    }
    let mut d_in = Tensor::zeros(input_shape);
    for (&idx, &g) in argmax.iter().zip(&d_out.data) {
        d_in.data[idx] += g;
    }
    Ok(d_in)
}

/// Central finite-difference gradient of a scalar function:
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for every element.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor<f64>) -> f64, x: &Tensor<f64>, eps: f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut grad = x.zeros_like();
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let up = f(&probe);
        probe.data[i] = orig - eps;
        let down = f(&probe);
        probe.data[i] = orig;
        grad.data[i] = (up - down) / (2.0 * eps);
    }
    grad
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`, falling back to the
/// absolute error when both are below `floor`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < floor {
        diff
    } else {
        diff / scale
    }
}
