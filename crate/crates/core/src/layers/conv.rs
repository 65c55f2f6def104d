use super::chw;
use super::gemm::{gemm, Mat};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Spatial output extent `(input + 2 * padding - kernel) / stride + 1`, or `None` on collapse.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 {
        return None;
    }
    let padded = input + 2 * padding;
    (padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

/// Stride and symmetric zero-padding of a 2-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub stride: usize,
    pub padding: usize,
}

/// What the backward pass needs from the forward pass.
#[derive(Clone, Debug)]
pub struct ConvCache {
    input_shape: [usize; 3],
    out_hw: (usize, usize),
    kernel: (usize, usize),
    /// im2col matrix, `(C_in * kH * kW) x (H' * W')`.
    cols: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Input `[C, H, W]`, weights `[O, C, kH, kW]` and output `(oH, oW)`.
type Geometry = ([usize; 3], [usize; 4], (usize, usize));

impl Conv2d {
    fn geometry(&self, input: &Tensor, weights: &Tensor) -> Result<Geometry> {
        let (c, h, w) = chw(input, "conv2d")?;
        let &[o, ci, kh, kw] = weights.shape() else {
            return Err(Error::Shape(format!(
                "conv2d weights must be [C_out, C_in, kH, kW], got {:?}",
                weights.shape()
            )));
        };
        if ci != c {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input has {c}, weights expect {ci}"
            )));
        }
        let oh = conv_output_extent(h, kh, self.stride, self.padding);
        let ow = conv_output_extent(w, kw, self.stride, self.padding);
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok(([c, h, w], [o, ci, kh, kw], (oh, ow))),
            _ => Err(Error::Shape(format!(
                "conv2d output collapses: input {h}x{w}, kernel {kh}x{kw}, stride {}, padding {}",
                self.stride, self.padding
            ))),
        }
    }

    /// Output plus the cache for [`Conv2d::backward`].
    pub fn forward(&self, input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(Tensor, ConvCache)> {
        let ([c, h, w], [o, _, kh, kw], (oh, ow)) = self.geometry(input, weights)?;
        bias.expect_shape(&[o])?;
        let rows = c * kh * kw;
        let npix = oh * ow;
        let mut cols = vec![0.0; rows * npix];
        let x = input.data();
        let pad = self.padding as isize;
        for ch in 0..c {
            for i in 0..kh {
                for j in 0..kw {
                    let row = &mut cols[((ch * kh + i) * kw + j) * npix..][..npix];
                    for y in 0..oh {
                        let iy = (y * self.stride + i) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &x[(ch * h + iy as usize) * w..][..w];
                        let dst = &mut row[y * ow..][..ow];
                        for (xo, d) in dst.iter_mut().enumerate() {
                            let ix = (xo * self.stride + j) as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        let mut out = vec![0.0; o * npix];
        for (oc, chunk) in out.chunks_exact_mut(npix).enumerate() {
            chunk.fill(bias.data()[oc]);
        }
        gemm(
            o,
            rows,
            npix,
            Mat::rows(weights.data(), rows),
            Mat::rows(&cols, npix),
            1.0,
            &mut out,
        );
        let out = Tensor::from_vec(&[o, oh, ow], out)?;
        let cache = ConvCache {
            input_shape: [c, h, w],
            out_hw: (oh, ow),
            kernel: (kh, kw),
            cols,
        };
        Ok((out, cache))
    }

    pub fn backward(&self, cache: &ConvCache, weights: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
        let [c, h, w] = cache.input_shape;
        let (oh, ow) = cache.out_hw;
        let (kh, kw) = cache.kernel;
        let o = weights.shape()[0];
        grad_out.expect_shape(&[o, oh, ow])?;
        let rows = c * kh * kw;
        let npix = oh * ow;
        let g = grad_out.data();

        let mut gw = vec![0.0; o * rows];
        gemm(
            o,
            npix,
            rows,
            Mat::rows(g, npix),
            Mat::transposed(&cache.cols, npix),
            0.0,
            &mut gw,
        );
        let gb: Vec<f64> = g.chunks_exact(npix).map(|r| r.iter().sum()).collect();

        let mut gcols = vec![0.0; rows * npix];
        gemm(
            rows,
            o,
            npix,
            Mat::transposed(weights.data(), rows),
            Mat::rows(g, npix),
            0.0,
            &mut gcols,
        );

        let mut gx = vec![0.0; c * h * w];
        let pad = self.padding as isize;
        for ch in 0..c {
            for i in 0..kh {
                for j in 0..kw {
                    let row = &gcols[((ch * kh + i) * kw + j) * npix..][..npix];
                    for y in 0..oh {
                        let iy = (y * self.stride + i) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut gx[(ch * h + iy as usize) * w..][..w];
                        for (xo, &v) in row[y * ow..][..ow].iter().enumerate() {
                            let ix = (xo * self.stride + j) as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
        Ok(ConvGrads {
            input: Tensor::from_vec(&[c, h, w], gx)?,
            weights: Tensor::from_vec(weights.shape(), gw)?,
            bias: Tensor::from_vec(&[o], gb)?,
        })
    }
}

/// Owned convolution parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// `[C_out, C_in, kH, kW]`
    pub weights: Tensor,
    /// `[C_out]`
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    pub fn new(weights: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        if weights.rank() != 4 || bias.shape() != [weights.shape()[0]] {
            return Err(Error::Shape(format!(
                "conv weights {:?} and bias {:?} do not agree",
                weights.shape(),
                bias.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::Domain("conv stride must be positive".into()));
        }
        Ok(ConvParams {
            weights,
            bias,
            stride,
            padding,
        })
    }

    pub fn op(&self) -> Conv2d {
        Conv2d {
            stride: self.stride,
            padding: self.padding,
        }
    }
}

pub fn conv2d(input: &Tensor, p: &ConvParams) -> Result<Tensor> {
    Ok(p.op().forward(input, &p.weights, &p.bias)?.0)
}

/// Gradients with respect to input, weights and bias given `grad_out = dL/d(out)`.
pub fn conv2d_backward(input: &Tensor, p: &ConvParams, grad_out: &Tensor) -> Result<ConvGrads> {
    let (_, cache) = p.op().forward(input, &p.weights, &p.bias)?;
    p.op().backward(&cache, &p.weights, grad_out)
}
