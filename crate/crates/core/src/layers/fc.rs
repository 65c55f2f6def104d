use super::gemm::{gemm, Mat};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Dense classifier `out = W x + b` over the flattened input.
#[derive(Clone, Debug, PartialEq)]
pub struct FcParams {
    /// `[num_classes, feature_dim]`
    pub weights: Tensor,
    /// `[num_classes]`
    pub bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct FcGrads {
    /// Same shape as the (unflattened) input.
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

fn dims(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    let &[k, d] = weights.shape() else {
        return Err(Error::Shape(format!(
            "fc weights must be rank 2, got {:?}",
            weights.shape()
        )));
    };
    bias.expect_shape(&[k])?;
    if input.len() != d {
        return Err(Error::Shape(format!(
            "fc expects {d} features, input has {}",
            input.len()
        )));
    }
    Ok((k, d))
}

pub(crate) fn fc_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (k, d) = dims(input, weights, bias)?;
    let mut out = bias.data().to_vec();
    gemm(
        k,
        d,
        1,
        Mat::rows(weights.data(), d),
        Mat::rows(input.data(), 1),
        1.0,
        &mut out,
    );
    Tensor::from_vec(&[k], out)
}

pub(crate) fn fc_backward(input: &Tensor, weights: &Tensor, grad_out: &Tensor) -> Result<FcGrads> {
    let &[k, d] = weights.shape() else {
        return Err(Error::Shape(format!(
            "fc weights must be rank 2, got {:?}",
            weights.shape()
        )));
    };
    if input.len() != d || grad_out.len() != k {
        return Err(Error::Shape(format!(
            "fc backward: input {} / grad {} vs weights {k}x{d}",
            input.len(),
            grad_out.len()
        )));
    }
    let g = grad_out.data();
    let x = input.data();
    let mut gx = vec![0.0; d];
    gemm(
        d,
        k,
        1,
        Mat::transposed(weights.data(), d),
        Mat::rows(g, 1),
        0.0,
        &mut gx,
    );
    let mut gw = Vec::with_capacity(k * d);
    for &gi in g {
        gw.extend(x.iter().map(|&xj| gi * xj));
    }
    Ok(FcGrads {
        input: Tensor::from_vec(input.shape(), gx)?,
        weights: Tensor::from_vec(&[k, d], gw)?,
        bias: Tensor::from_vec(&[k], g.to_vec())?,
    })
}

pub fn fully_connected(input: &Tensor, p: &FcParams) -> Result<Tensor> {
    fc_forward(input, &p.weights, &p.bias)
}

pub fn fully_connected_backward(input: &Tensor, p: &FcParams, grad_out: &Tensor) -> Result<FcGrads> {
    dims(input, &p.weights, &p.bias)?;
    fc_backward(input, &p.weights, grad_out)
}
