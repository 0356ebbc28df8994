//! Low-level layer kernels with hand-written backward passes.
//!
//! Every kernel works on a whole batch. Convolutions lower to `im2col` and a
//! single GEMM per sample.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{matmul, Scalar, Tensor};

/// Learnable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    fn cast<U: Scalar>(&self) -> Param<U> {
        Param::new(self.value.cast())
    }
}

fn kaiming_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(normal.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

fn uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

pub(crate) fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return Err(Error::Shape(format!(
            "kernel {kernel} (stride {stride}, padding {padding}) does not fit input of size {size}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

pub(crate) fn deconv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let full = (size.saturating_sub(1)) * stride + kernel;
    if size == 0 || stride == 0 || full <= 2 * padding {
        return Err(Error::Shape(format!(
            "transposed conv (kernel {kernel}, stride {stride}, padding {padding}) collapses input of size {size}"
        )));
    }
    Ok(full - 2 * padding)
}

fn chw(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match shape {
        [c, h, w] => Ok((*c, *h, *w)),
        _ => Err(Error::Shape(format!("{what} expects a (C, H, W) input, got {shape:?}"))),
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
}

fn im2col<T: Scalar>(x: &[T], g: Geometry, cols: &mut [T]) {
    let plane = g.ho * g.wo;
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let out = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.s + ki) as isize - g.p as isize;
                    let dst = &mut out[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..(ci * g.h + iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.s + kj) as isize - g.p as isize;
                        *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: Geometry, x: &mut [T]) {
    let plane = g.ho * g.wo;
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.s + ki) as isize - g.p as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (ci * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.s + kj) as isize - g.p as isize;
                        if ix >= 0 && ix < g.w as isize {
                            x[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn add_channel_bias<T: Scalar>(y: &mut [T], bias: &[T], plane: usize) {
    for (c, &b) in bias.iter().enumerate() {
        y[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += b);
    }
}

fn accumulate_channel_bias_grad<T: Scalar>(grad: &[T], db: &mut [T], plane: usize) {
    for (c, d) in db.iter_mut().enumerate() {
        *d += grad[c * plane..(c + 1) * plane].iter().copied().sum::<T>();
    }
}

/// 2-D convolution, weight layout `[out, in, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let shape = [out_channels, in_channels, kernel, kernel];
        let weight = Param::new(kaiming_normal(&shape, out_channels * kernel * kernel, rng));
        let bias = bias.then(|| Param::new(Tensor::zeros(&[out_channels])));
        Self { in_channels, out_channels, kernel, stride, padding, weight, bias }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let (c, h, w) = chw(input, "conv")?;
        if c != self.in_channels {
            return Err(Error::Shape(format!("conv expects {} input channels, got {c}", self.in_channels)));
        }
        Ok(vec![
            self.out_channels,
            conv_out(h, self.kernel, self.stride, self.padding)?,
            conv_out(w, self.kernel, self.stride, self.padding)?,
        ])
    }

    fn geometry(&self, input: &[usize]) -> Result<Geometry> {
        let out = self.output_shape(input)?;
        Ok(Geometry {
            c: input[0],
            h: input[1],
            w: input[2],
            k: self.kernel,
            s: self.stride,
            p: self.padding,
            ho: out[1],
            wo: out[2],
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.geometry(x.sample_shape())?;
        let n = x.batch();
        let ckk = g.c * g.k * g.k;
        let plane = g.ho * g.wo;
        let mut y = Tensor::zeros(&[n, self.out_channels, g.ho, g.wo]);
        let mut cols = vec![T::zero(); ckk * plane];
        let out_numel = self.out_channels * plane;
        for i in 0..n {
            im2col(x.sample(i), g, &mut cols);
            let out = &mut y.data_mut()[i * out_numel..(i + 1) * out_numel];
            matmul(self.out_channels, ckk, plane, self.weight.value.data(), false, &cols, false, out, false);
            if let Some(b) = &self.bias {
                add_channel_bias(out, b.value.data(), plane);
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, x: &Tensor<T>, grad: &Tensor<T>, param_grads: bool) -> Result<Tensor<T>> {
        let g = self.geometry(x.sample_shape())?;
        let n = x.batch();
        let ckk = g.c * g.k * g.k;
        let plane = g.ho * g.wo;
        let mut dx = Tensor::zeros(x.shape());
        let mut cols = vec![T::zero(); ckk * plane];
        let in_numel = x.sample_numel();
        for i in 0..n {
            let gi = grad.sample(i);
            if param_grads {
                im2col(x.sample(i), g, &mut cols);
                matmul(self.out_channels, plane, ckk, gi, false, &cols, true, self.weight.grad.data_mut(), true);
                if let Some(b) = &mut self.bias {
                    accumulate_channel_bias_grad(gi, b.grad.data_mut(), plane);
                }
            }
            matmul(ckk, self.out_channels, plane, self.weight.value.data(), true, gi, false, &mut cols, false);
            col2im(&cols, g, &mut dx.data_mut()[i * in_numel..(i + 1) * in_numel]);
        }
        Ok(dx)
    }

    pub(crate) fn cast<U: Scalar>(&self) -> Conv2d<U> {
        Conv2d {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            weight: self.weight.cast(),
            bias: self.bias.as_ref().map(Param::cast),
        }
    }
}

/// Transposed convolution (deconvolution), weight layout `[in, out, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> ConvTranspose2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let shape = [in_channels, out_channels, kernel, kernel];
        let weight = Param::new(kaiming_normal(&shape, in_channels * kernel * kernel, rng));
        let bias = bias.then(|| Param::new(Tensor::zeros(&[out_channels])));
        Self { in_channels, out_channels, kernel, stride, padding, weight, bias }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let (c, h, w) = chw(input, "deconv")?;
        if c != self.in_channels {
            return Err(Error::Shape(format!("deconv expects {} input channels, got {c}", self.in_channels)));
        }
        Ok(vec![
            self.out_channels,
            deconv_out(h, self.kernel, self.stride, self.padding)?,
            deconv_out(w, self.kernel, self.stride, self.padding)?,
        ])
    }

    /// The equivalent forward-conv geometry mapping the output back onto the input grid.
    fn geometry(&self, input: &[usize]) -> Result<Geometry> {
        let out = self.output_shape(input)?;
        Ok(Geometry {
            c: self.out_channels,
            h: out[1],
            w: out[2],
            k: self.kernel,
            s: self.stride,
            p: self.padding,
            ho: input[1],
            wo: input[2],
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.geometry(x.sample_shape())?;
        let n = x.batch();
        let okk = self.out_channels * g.k * g.k;
        let plane_in = g.ho * g.wo;
        let plane_out = g.h * g.w;
        let mut y = Tensor::zeros(&[n, self.out_channels, g.h, g.w]);
        let mut cols = vec![T::zero(); okk * plane_in];
        let out_numel = self.out_channels * plane_out;
        for i in 0..n {
            matmul(okk, self.in_channels, plane_in, self.weight.value.data(), true, x.sample(i), false, &mut cols, false);
            let out = &mut y.data_mut()[i * out_numel..(i + 1) * out_numel];
            col2im(&cols, g, out);
            if let Some(b) = &self.bias {
                add_channel_bias(out, b.value.data(), plane_out);
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, x: &Tensor<T>, grad: &Tensor<T>, param_grads: bool) -> Result<Tensor<T>> {
        let g = self.geometry(x.sample_shape())?;
        let n = x.batch();
        let okk = self.out_channels * g.k * g.k;
        let plane_in = g.ho * g.wo;
        let plane_out = g.h * g.w;
        let mut dx = Tensor::zeros(x.shape());
        let mut cols = vec![T::zero(); okk * plane_in];
        let in_numel = x.sample_numel();
        for i in 0..n {
            let gi = grad.sample(i);
            im2col(gi, g, &mut cols);
            if param_grads {
                matmul(self.in_channels, plane_in, okk, x.sample(i), false, &cols, true, self.weight.grad.data_mut(), true);
                if let Some(b) = &mut self.bias {
                    accumulate_channel_bias_grad(gi, b.grad.data_mut(), plane_out);
                }
            }
            let dxi = &mut dx.data_mut()[i * in_numel..(i + 1) * in_numel];
            matmul(self.in_channels, okk, plane_in, self.weight.value.data(), false, &cols, false, dxi, false);
        }
        Ok(dx)
    }

    pub(crate) fn cast<U: Scalar>(&self) -> ConvTranspose2d<U> {
        ConvTranspose2d {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            weight: self.weight.cast(),
            bias: self.bias.as_ref().map(Param::cast),
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

/// Saved state of a batch-norm forward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub x_hat: Tensor<T>,
    pub inv_std: Vec<T>,
    /// Batch statistics, present only for training-mode passes.
    pub batch_stats: Option<(Vec<T>, Vec<T>)>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(Tensor::full(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.first() != Some(&self.channels) {
            return Err(Error::Shape(format!("batch norm over {} channels got {input:?}", self.channels)));
        }
        Ok(input.to_vec())
    }

    pub fn forward(&self, x: &Tensor<T>, train: bool) -> Result<(Tensor<T>, BnCache<T>)> {
        self.output_shape(x.sample_shape())?;
        let n = x.batch();
        let c = self.channels;
        let plane = x.sample_numel() / c;
        let count = T::from_usize(n * plane).expect("count");
        let eps = T::from_f64_lossy(BN_EPS);
        let (mean, var, batch_stats) = if train {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for i in 0..n {
                let s = x.sample(i);
                for ch in 0..c {
                    mean[ch] += s[ch * plane..(ch + 1) * plane].iter().copied().sum::<T>();
                }
            }
            mean.iter_mut().for_each(|m| *m = *m / count);
            for i in 0..n {
                let s = x.sample(i);
                for ch in 0..c {
                    let m = mean[ch];
                    var[ch] += s[ch * plane..(ch + 1) * plane].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
                }
            }
            var.iter_mut().for_each(|v| *v = *v / count);
            (mean.clone(), var.clone(), Some((mean, var)))
        } else {
            (self.running_mean.data().to_vec(), self.running_var.data().to_vec(), None)
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut x_hat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        let numel = x.sample_numel();
        for i in 0..n {
            let s = x.sample(i);
            for ch in 0..c {
                let (m, is) = (mean[ch], inv_std[ch]);
                let (gm, bt) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
                let range = i * numel + ch * plane..i * numel + (ch + 1) * plane;
                let src = &s[ch * plane..(ch + 1) * plane];
                for ((xh, yv), &v) in x_hat.data_mut()[range.clone()].iter_mut().zip(&mut y.data_mut()[range]).zip(src) {
                    *xh = (v - m) * is;
                    *yv = gm * *xh + bt;
                }
            }
        }
        Ok((y, BnCache { x_hat, inv_std, batch_stats }))
    }

    /// Folds batch statistics from a training pass into the running estimates.
    pub fn update_running(&mut self, cache: &BnCache<T>, count: usize) {
        let Some((mean, var)) = &cache.batch_stats else { return };
        let momentum = T::from_f64_lossy(BN_MOMENTUM);
        let keep = T::one() - momentum;
        let unbias = if count > 1 {
            T::from_usize(count).expect("count") / T::from_usize(count - 1).expect("count")
        } else {
            T::one()
        };
        for ch in 0..self.channels {
            let rm = &mut self.running_mean.data_mut()[ch];
            *rm = keep * *rm + momentum * mean[ch];
            let rv = &mut self.running_var.data_mut()[ch];
            *rv = keep * *rv + momentum * var[ch] * unbias;
        }
    }

    pub fn backward(&mut self, cache: &BnCache<T>, grad: &Tensor<T>, param_grads: bool) -> Tensor<T> {
        let n = grad.batch();
        let c = self.channels;
        let numel = grad.sample_numel();
        let plane = numel / c;
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for i in 0..n {
            for ch in 0..c {
                let r = i * numel + ch * plane..i * numel + (ch + 1) * plane;
                for (&g, &xh) in grad.data()[r.clone()].iter().zip(&cache.x_hat.data()[r]) {
                    sum_g[ch] += g;
                    sum_gx[ch] += g * xh;
                }
            }
        }
        if param_grads {
            for ch in 0..c {
                self.gamma.grad.data_mut()[ch] += sum_gx[ch];
                self.beta.grad.data_mut()[ch] += sum_g[ch];
            }
        }
        let mut dx = Tensor::zeros(grad.shape());
        let training = cache.batch_stats.is_some();
        let count = T::from_usize(n * plane).expect("count");
        for i in 0..n {
            for ch in 0..c {
                let scale = self.gamma.value.data()[ch] * cache.inv_std[ch];
                let r = i * numel + ch * plane..i * numel + (ch + 1) * plane;
                let (mg, mgx) = (sum_g[ch] / count, sum_gx[ch] / count);
                for ((d, &g), &xh) in dx.data_mut()[r.clone()].iter_mut().zip(&grad.data()[r.clone()]).zip(&cache.x_hat.data()[r]) {
                    *d = if training { scale * (g - mg - xh * mgx) } else { scale * g };
                }
            }
        }
        dx
    }

    pub(crate) fn cast<U: Scalar>(&self) -> BatchNorm2d<U> {
        BatchNorm2d {
            channels: self.channels,
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
        }
    }
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(output: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let data = output
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(grad.shape(), data).expect("same shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl MaxPool2d {
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let (c, h, w) = chw(input, "max pool")?;
        if 2 * self.padding > self.kernel {
            return Err(Error::Shape("max pool padding exceeds half the kernel".into()));
        }
        Ok(vec![c, conv_out(h, self.kernel, self.stride, self.padding)?, conv_out(w, self.kernel, self.stride, self.padding)?])
    }

    /// Returns the pooled tensor and, per output element, the flat input index it came from.
    pub fn forward<T: Scalar>(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
        let out = self.output_shape(x.sample_shape())?;
        let (c, h, w) = (x.sample_shape()[0], x.sample_shape()[1], x.sample_shape()[2]);
        let (ho, wo) = (out[1], out[2]);
        let n = x.batch();
        let mut y = Tensor::zeros(&[n, c, ho, wo]);
        let mut arg = vec![0usize; n * c * ho * wo];
        let mut o = 0;
        for i in 0..n {
            let s = x.sample(i);
            let base = i * c * h * w;
            for ch in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = T::neg_infinity();
                        let mut best_idx = usize::MAX;
                        for ki in 0..self.kernel {
                            let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kj in 0..self.kernel {
                                let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let idx = (ch * h + iy as usize) * w + ix as usize;
                                if best_idx == usize::MAX || s[idx] > best {
                                    best = s[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        y.data_mut()[o] = best;
                        arg[o] = base + best_idx;
                        o += 1;
                    }
                }
            }
        }
        Ok((y, arg))
    }

    pub fn backward<T: Scalar>(input_shape: &[usize], argmax: &[usize], grad: &Tensor<T>) -> Tensor<T> {
        let mut dx = Tensor::zeros(input_shape);
        for (&idx, &g) in argmax.iter().zip(grad.data()) {
            dx.data_mut()[idx] += g;
        }
        dx
    }
}

/// Average pooling without padding; a kernel equal to the spatial size is global pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AvgPool2d {
    pub kernel: usize,
    pub stride: usize,
}

impl AvgPool2d {
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let (c, h, w) = chw(input, "avg pool")?;
        Ok(vec![c, conv_out(h, self.kernel, self.stride, 0)?, conv_out(w, self.kernel, self.stride, 0)?])
    }

    pub fn forward<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.output_shape(x.sample_shape())?;
        let (c, h, w) = (x.sample_shape()[0], x.sample_shape()[1], x.sample_shape()[2]);
        let (ho, wo) = (out[1], out[2]);
        let n = x.batch();
        let norm = T::from_usize(self.kernel * self.kernel).expect("kernel");
        let mut y = Tensor::zeros(&[n, c, ho, wo]);
        let mut o = 0;
        for i in 0..n {
            let s = x.sample(i);
            for ch in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = T::zero();
                        for ki in 0..self.kernel {
                            let row = (ch * h + oy * self.stride + ki) * w + ox * self.stride;
                            acc += s[row..row + self.kernel].iter().copied().sum::<T>();
                        }
                        y.data_mut()[o] = acc / norm;
                        o += 1;
                    }
                }
            }
        }
        Ok(y)
    }

    pub fn backward<T: Scalar>(&self, input_shape: &[usize], grad: &Tensor<T>) -> Tensor<T> {
        let (c, h, w) = (input_shape[1], input_shape[2], input_shape[3]);
        let (ho, wo) = (grad.shape()[2], grad.shape()[3]);
        let norm = T::from_usize(self.kernel * self.kernel).expect("kernel");
        let mut dx = Tensor::zeros(input_shape);
        let mut o = 0;
        for i in 0..input_shape[0] {
            let base = i * c * h * w;
            for ch in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let g = grad.data()[o] / norm;
                        o += 1;
                        for ki in 0..self.kernel {
                            let row = base + (ch * h + oy * self.stride + ki) * w + ox * self.stride;
                            dx.data_mut()[row..row + self.kernel].iter_mut().for_each(|v| *v += g);
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Fully connected layer over the flattened sample, weight layout `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_features.max(1) as f64).sqrt();
        Self {
            in_features,
            out_features,
            weight: Param::new(uniform(&[out_features, in_features], bound, rng)),
            bias: Param::new(uniform(&[out_features], bound, rng)),
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let numel: usize = input.iter().product();
        if numel != self.in_features {
            return Err(Error::Shape(format!(
                "fully connected layer expects {} features, got {input:?}",
                self.in_features
            )));
        }
        Ok(vec![self.out_features])
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.output_shape(x.sample_shape())?;
        let n = x.batch();
        let mut y = Tensor::zeros(&[n, self.out_features]);
        for i in 0..n {
            y.data_mut()[i * self.out_features..(i + 1) * self.out_features].copy_from_slice(self.bias.value.data());
        }
        matmul(n, self.in_features, self.out_features, x.data(), false, self.weight.value.data(), true, y.data_mut(), true);
        Ok(y)
    }

    pub fn backward(&mut self, x: &Tensor<T>, grad: &Tensor<T>, param_grads: bool) -> Tensor<T> {
        let n = x.batch();
        if param_grads {
            matmul(self.out_features, n, self.in_features, grad.data(), true, x.data(), false, self.weight.grad.data_mut(), true);
            for i in 0..n {
                for (d, &g) in self.bias.grad.data_mut().iter_mut().zip(grad.sample(i)) {
                    *d += g;
                }
            }
        }
        let mut dx = Tensor::zeros(x.shape());
        matmul(n, self.out_features, self.in_features, grad.data(), false, self.weight.value.data(), false, dx.data_mut(), false);
        dx
    }

    pub(crate) fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear {
            in_features: self.in_features,
            out_features: self.out_features,
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution used as an independent oracle.
    fn naive_conv(x: &Tensor<f64>, conv: &Conv2d<f64>) -> Tensor<f64> {
        let out = conv.output_shape(x.sample_shape()).unwrap();
        let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
        let mut y = Tensor::zeros(&[x.batch(), out[0], out[1], out[2]]);
        let wt = conv.weight.value.data();
        let k = conv.kernel;
        let mut o = 0;
        for i in 0..x.batch() {
            for co in 0..out[0] {
                for oy in 0..out[1] {
                    for ox in 0..out[2] {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.value.data()[co]);
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * conv.stride + ki) as isize - conv.padding as isize;
                                    let ix = (ox * conv.stride + kj) as isize - conv.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += wt[((co * c + ci) * k + ki) * k + kj]
                                            * x.sample(i)[(ci * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                        }
                        y.data_mut()[o] = acc;
                        o += 1;
                    }
                }
            }
        }
        y
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        uniform(shape, 1.0, rng)
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::<f64>::new(3, 4, 3, 2, 1, true, &mut rng);
        let x = random(&[2, 3, 7, 7], &mut rng);
        let y = conv.forward(&x).unwrap();
        assert!(y.max_abs_diff(&naive_conv(&x, &conv)) < 1e-12);
    }

    #[test]
    fn deconv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, deconv(y)> when both share the same weights.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::<f64>::new(2, 3, 3, 2, 1, false, &mut rng);
        let mut deconv = ConvTranspose2d::<f64>::new(3, 2, 3, 2, 1, false, &mut rng);
        deconv.weight.value = conv.weight.value.clone();
        let x = random(&[1, 2, 7, 7], &mut rng);
        let cx = conv.forward(&x).unwrap();
        let y = random(cx.shape(), &mut rng);
        let dy = deconv.forward(&y).unwrap();
        assert_eq!(dy.shape(), x.shape());
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn output_size_arithmetic() {
        assert_eq!(conv_out(224, 3, 2, 1).unwrap(), 112);
        assert_eq!(conv_out(56, 2, 2, 1).unwrap(), 29);
        assert_eq!(deconv_out(14, 2, 2, 0).unwrap(), 28);
        assert!(conv_out(2, 5, 1, 0).is_err());
    }

    #[test]
    fn max_pool_picks_window_max() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f64, 4.0, 3.0, 2.0]).unwrap();
        let pool = MaxPool2d { kernel: 2, stride: 2, padding: 0 };
        let (y, arg) = pool.forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![1]);
    }

    #[test]
    fn batch_norm_train_normalizes() {
        let bn = BatchNorm2d::<f64>::new(1);
        let x = Tensor::from_vec(&[4, 1, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, _) = bn.forward(&x, true).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
}
