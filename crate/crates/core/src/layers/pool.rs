use super::chw;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn pool_output_extent(input: usize, window: usize, stride: usize) -> Option<usize> {
    (window >= 1 && stride >= 1 && input >= window).then(|| (input - window) / stride + 1)
}

/// Max-pooling with a square window and no padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaxPool {
    pub window: usize,
    pub stride: usize,
}

/// Winner offsets (into the flat input) for each output cell.
#[derive(Clone, Debug)]
pub struct PoolCache {
    input_shape: [usize; 3],
    argmax: Vec<usize>,
}

impl MaxPool {
    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, PoolCache)> {
        let (c, h, w) = chw(input, "maxpool")?;
        let (Some(oh), Some(ow)) = (
            pool_output_extent(h, self.window, self.stride),
            pool_output_extent(w, self.window, self.stride),
        ) else {
            return Err(Error::Shape(format!(
                "maxpool window {} (stride {}) does not fit a {h}x{w} input",
                self.window, self.stride
            )));
        };
        let x = input.data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for y in 0..oh {
                for xo in 0..ow {
                    let (y0, x0) = (y * self.stride, xo * self.stride);
                    let mut best = (ch * h + y0) * w + x0;
                    for i in 0..self.window {
                        for j in 0..self.window {
                            let off = (ch * h + y0 + i) * w + x0 + j;
                            // strict '>' keeps the first winner in scan order
                            if x[off] > x[best] {
                                best = off;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        Ok((
            Tensor::from_vec(&[c, oh, ow], out)?,
            PoolCache {
                input_shape: [c, h, w],
                argmax,
            },
        ))
    }

    pub fn backward(&self, cache: &PoolCache, grad_out: &Tensor) -> Result<Tensor> {
        if grad_out.len() != cache.argmax.len() {
            return Err(Error::Shape(format!(
                "maxpool upstream gradient has {} elements, expected {}",
                grad_out.len(),
                cache.argmax.len()
            )));
        }
        let mut gx = Tensor::zeros(&cache.input_shape)?;
        let dst = gx.data_mut();
        for (&off, &g) in cache.argmax.iter().zip(grad_out.data()) {
            dst[off] += g;
        }
        Ok(gx)
    }
}

pub fn maxpool(input: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    Ok(MaxPool { window, stride }.forward(input)?.0)
}

pub fn maxpool_backward(input: &Tensor, window: usize, stride: usize, grad_out: &Tensor) -> Result<Tensor> {
    let op = MaxPool { window, stride };
    let (_, cache) = op.forward(input)?;
    op.backward(&cache, grad_out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_field() {
        let x = Tensor::new(&[2, 5, 5], 1.5).unwrap();
        let y = maxpool(&x, 3, 2).unwrap();
        assert_eq!(y.shape(), &[2, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn two_by_two_routes_to_max() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = maxpool(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let g = maxpool_backward(&x, 2, 2, &Tensor::from_vec(&[1, 1, 1], vec![7.0]).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 7.0]);
    }

    #[test]
    fn ties_go_to_first_in_scan_order() {
        let x = Tensor::new(&[1, 2, 2], 3.0).unwrap();
        let g = maxpool_backward(&x, 2, 2, &Tensor::new(&[1, 1, 1], 1.0).unwrap()).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn positive_homogeneity() {
        let x = Tensor::from_vec(&[1, 4, 4], (1..=16).map(|v| f64::from(v) * 0.3).collect()).unwrap();
        let a = maxpool(&x, 3, 1).unwrap();
        let b = maxpool(&x.scale(2.0), 3, 1).unwrap();
        assert_eq!(a.scale(2.0), b);
    }

    #[test]
    fn oversized_window() {
        let x = Tensor::zeros(&[1, 2, 3]).unwrap();
        assert!(matches!(maxpool(&x, 3, 1), Err(Error::Shape(_))));
    }
}
