//! Dense, convolutional and normalization layers with explicit backward passes.
//!
//! Images are NHWC. Each layer's `forward` returns what its `backward` needs;
//! `backward` accumulates parameter gradients and returns the input gradient.

use ndarray::{Array1, Array2, Array4, ArrayView2, Axis, Ix1, Ix2, IxDyn, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::param::{join, Module, Param};
use super::Scalar;
use crate::error::{shape_err, Result};

pub const LEAKY_SLOPE: f64 = 0.2;

fn uniform_array<T: Scalar, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> ndarray::ArrayD<T> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    ndarray::ArrayD::from_shape_simple_fn(IxDyn(shape), || T::of(dist.sample(rng)))
}

pub(crate) fn view2<T: Scalar>(p: &Param<T>) -> ArrayView2<'_, T> {
    p.value.view().into_dimensionality::<Ix2>().expect("rank-2 parameter")
}

pub(crate) fn view1<T: Scalar>(p: &Param<T>) -> ndarray::ArrayView1<'_, T> {
    p.value.view().into_dimensionality::<Ix1>().expect("rank-1 parameter")
}

/// `y = x W + b` with `W` stored as (in, out).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    /// Uniform(±1/sqrt(fan_in)) weights, zero bias.
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self {
            weight: Param::new(uniform_array(&[in_dim, out_dim], bound, rng)),
            bias: Param::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, x: &Array2<T>) -> Result<Array2<T>> {
        if x.ncols() != self.in_dim() {
            return shape_err(format!(
                "linear layer expects {} inputs, got {}",
                self.in_dim(),
                x.ncols()
            ));
        }
        Ok(x.dot(&view2(&self.weight)) + &view1(&self.bias))
    }

    pub fn backward(&mut self, x: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
        let dw = x.t().dot(dy);
        self.weight.grad += &dw.into_dyn();
        self.bias.grad += &dy.sum_axis(Axis(0)).into_dyn();
        dy.dot(&view2(&self.weight).t())
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

pub fn leaky_relu<T: Scalar, D: ndarray::Dimension>(x: &ndarray::Array<T, D>) -> ndarray::Array<T, D> {
    let slope = T::of(LEAKY_SLOPE);
    x.mapv(|v| if v > T::zero() { v } else { v * slope })
}

/// Gradient of [`leaky_relu`] given its pre-activation input.
pub fn leaky_relu_backward<T: Scalar, D: ndarray::Dimension>(
    pre: &ndarray::Array<T, D>,
    dy: &ndarray::Array<T, D>,
) -> ndarray::Array<T, D> {
    let slope = T::of(LEAKY_SLOPE);
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(pre).for_each(|d, &p| {
        if p <= T::zero() {
            *d *= slope;
        }
    });
    dx
}

pub fn sigmoid<T: Scalar, D: ndarray::Dimension>(x: &ndarray::Array<T, D>) -> ndarray::Array<T, D> {
    x.mapv(|v| T::one() / (T::one() + (-v).exp()))
}

/// Chain rule through a sigmoid, given its output.
pub fn sigmoid_backward<T: Scalar, D: ndarray::Dimension>(
    out: &ndarray::Array<T, D>,
    dy: &ndarray::Array<T, D>,
) -> ndarray::Array<T, D> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(out).for_each(|d, &s| *d *= s * (T::one() - s));
    dx
}

/// 3x3 convolution, stride 1, zero padding 1. Weights are (9 * in, out) in
/// (ky, kx, channel) row order so the forward pass is one matrix product.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Conv3x3<T> {
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((9 * in_ch) as f64).sqrt();
        Self {
            weight: Param::new(uniform_array(&[9 * in_ch, out_ch], bound, rng)),
            bias: Param::zeros(&[out_ch]),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[0] / 9
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    /// Returns the output and the im2col matrix needed by `backward`.
    pub fn forward(&self, x: &Array4<T>) -> Result<(Array4<T>, Array2<T>)> {
        let (n, h, w, c) = x.dim();
        if c != self.in_channels() {
            return shape_err(format!(
                "conv expects {} channels, got {c}",
                self.in_channels()
            ));
        }
        let cols = im2col(x);
        let out = cols.dot(&view2(&self.weight)) + &view1(&self.bias);
        let out = out
            .into_shape_with_order((n, h, w, self.out_channels()))
            .expect("contiguous conv output");
        Ok((out, cols))
    }

    pub fn backward(&mut self, cols: &Array2<T>, input_dim: (usize, usize, usize, usize), dy: &Array4<T>) -> Array4<T> {
        let (n, h, w, _) = input_dim;
        let dy2 = dy
            .view()
            .into_shape_with_order((n * h * w, self.out_channels()))
            .expect("contiguous conv gradient");
        self.weight.grad += &cols.t().dot(&dy2).into_dyn();
        self.bias.grad += &dy2.sum_axis(Axis(0)).into_dyn();
        let dcols = dy2.dot(&view2(&self.weight).t());
        col2im(&dcols, input_dim)
    }
}

impl<T: Scalar> Module<T> for Conv3x3<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

fn im2col<T: Scalar>(x: &Array4<T>) -> Array2<T> {
    let (n, h, w, c) = x.dim();
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let row_len = 9 * c;
    let mut cols = vec![T::zero(); n * h * w * row_len];
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let row = ((b * h + i) * w + j) * row_len;
                for ky in 0..3 {
                    let yy = i + ky;
                    if yy == 0 || yy > h {
                        continue;
                    }
                    for kx in 0..3 {
                        let xx = j + kx;
                        if xx == 0 || xx > w {
                            continue;
                        }
                        let src = ((b * h + yy - 1) * w + xx - 1) * c;
                        let dst = row + (ky * 3 + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((n * h * w, row_len), cols).expect("im2col shape")
}

fn col2im<T: Scalar>(dcols: &Array2<T>, dim: (usize, usize, usize, usize)) -> Array4<T> {
    let (n, h, w, c) = dim;
    let dcols = dcols.as_standard_layout();
    let ds = dcols.as_slice().expect("standard layout");
    let row_len = 9 * c;
    let mut dx = vec![T::zero(); n * h * w * c];
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let row = ((b * h + i) * w + j) * row_len;
                for ky in 0..3 {
                    let yy = i + ky;
                    if yy == 0 || yy > h {
                        continue;
                    }
                    for kx in 0..3 {
                        let xx = j + kx;
                        if xx == 0 || xx > w {
                            continue;
                        }
                        let dst = ((b * h + yy - 1) * w + xx - 1) * c;
                        let src = row + (ky * 3 + kx) * c;
                        for k in 0..c {
                            dx[dst + k] += ds[src + k];
                        }
                    }
                }
            }
        }
    }
    Array4::from_shape_vec(dim, dx).expect("col2im shape")
}

/// Per-sample normalization over (H, W, C) with a per-channel affine map.
/// Train and eval behave identically, so there are no running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

pub struct SampleNormCache<T> {
    xhat: Array4<T>,
    inv_std: Array1<T>,
}

const NORM_EPS: f64 = 1e-5;

impl<T: Scalar> SampleNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(ndarray::ArrayD::ones(IxDyn(&[channels]))),
            beta: Param::zeros(&[channels]),
        }
    }

    pub fn forward(&self, x: &Array4<T>) -> (Array4<T>, SampleNormCache<T>) {
        let n = x.dim().0;
        let per = x.len() / n.max(1);
        let mut xhat = x.as_standard_layout().into_owned();
        let mut inv_std = Array1::zeros(n);
        let denom = T::of(per as f64);
        for (b, mut sample) in xhat.outer_iter_mut().enumerate() {
            let mean = sample.sum() / denom;
            let var = sample.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / denom;
            let inv = T::one() / (var + T::of(NORM_EPS)).sqrt();
            sample.mapv_inplace(|v| (v - mean) * inv);
            inv_std[b] = inv;
        }
        let gamma = view1(&self.gamma);
        let beta = view1(&self.beta);
        let y = &xhat * &gamma + &beta;
        (y, SampleNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &SampleNormCache<T>, dy: &Array4<T>) -> Array4<T> {
        let c = dy.dim().3;
        let dy_flat = dy.view().into_shape_with_order((dy.len() / c, c)).expect("contiguous");
        let xhat_flat = cache.xhat.view().into_shape_with_order((dy.len() / c, c)).expect("contiguous");
        self.gamma.grad += &(&dy_flat * &xhat_flat).sum_axis(Axis(0)).into_dyn();
        self.beta.grad += &dy_flat.sum_axis(Axis(0)).into_dyn();

        let gamma = view1(&self.gamma).to_owned();
        let dxhat = dy * &gamma;
        let mut dx = Array4::zeros(dy.raw_dim());
        let per = T::of((dy.len() / dy.dim().0.max(1)) as f64);
        for b in 0..dy.dim().0 {
            let g = dxhat.index_axis(Axis(0), b);
            let xh = cache.xhat.index_axis(Axis(0), b);
            let mean_g = g.sum() / per;
            let mean_gx = (&g * &xh).sum() / per;
            let inv = cache.inv_std[b];
            let mut out = dx.index_axis_mut(Axis(0), b);
            Zip::from(&mut out).and(&g).and(&xh).for_each(|o, &gv, &xv| {
                *o = inv * (gv - mean_g - xv * mean_gx);
            });
        }
        dx
    }
}

impl<T: Scalar> Module<T> for SampleNorm<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
    }
}

/// 2x2 max pooling, stride 2. Returns the flat argmax index per output cell.
pub fn max_pool2<T: Scalar>(x: &Array4<T>) -> (Array4<T>, Vec<usize>) {
    let (n, h, w, c) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut arg = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                for k in 0..c {
                    let mut best_idx = ((b * h + 2 * i) * w + 2 * j) * c + k;
                    let mut best = xs[best_idx];
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ((b * h + 2 * i + di) * w + 2 * j + dj) * c + k;
                        if xs[idx] > best {
                            best = xs[idx];
                            best_idx = idx;
                        }
                    }
                    out.push(best);
                    arg.push(best_idx);
                }
            }
        }
    }
    (
        Array4::from_shape_vec((n, oh, ow, c), out).expect("pool shape"),
        arg,
    )
}

pub fn max_pool2_backward<T: Scalar>(
    argmax: &[usize],
    input_dim: (usize, usize, usize, usize),
    dy: &Array4<T>,
) -> Array4<T> {
    let (n, h, w, c) = input_dim;
    let mut dx = vec![T::zero(); n * h * w * c];
    for (&idx, &g) in argmax.iter().zip(dy.iter()) {
        dx[idx] += g;
    }
    Array4::from_shape_vec(input_dim, dx).expect("pool grad shape")
}

/// Non-overlapping `factor` x `factor` average pooling.
pub fn avg_pool<T: Scalar>(x: &Array4<T>, factor: usize) -> Array4<T> {
    let (n, h, w, c) = x.dim();
    let (oh, ow) = (h / factor, w / factor);
    let scale = T::of(1.0 / (factor * factor) as f64);
    let mut out = Array4::zeros((n, oh, ow, c));
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                for di in 0..factor {
                    for dj in 0..factor {
                        let src = x.slice(ndarray::s![b, factor * i + di, factor * j + dj, ..]);
                        let mut dst = out.slice_mut(ndarray::s![b, i, j, ..]);
                        dst.scaled_add(scale, &src);
                    }
                }
            }
        }
    }
    out
}

pub fn avg_pool_backward<T: Scalar>(dy: &Array4<T>, factor: usize) -> Array4<T> {
    let (n, oh, ow, c) = dy.dim();
    let scale = T::of(1.0 / (factor * factor) as f64);
    let mut dx = Array4::zeros((n, oh * factor, ow * factor, c));
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                let g = dy.slice(ndarray::s![b, i, j, ..]);
                for di in 0..factor {
                    for dj in 0..factor {
                        let mut dst = dx.slice_mut(ndarray::s![b, factor * i + di, factor * j + dj, ..]);
                        dst.scaled_add(scale, &g);
                    }
                }
            }
        }
    }
    dx
}
