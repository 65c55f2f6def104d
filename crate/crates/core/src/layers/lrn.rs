use super::chw;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cross-channel local response normalization constants.
///
/// `out[c] = in[c] / (k + alpha * sum_{|c' - c| <= n} in[c']^2)^beta`
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrnParams {
    /// Half-width of the channel window.
    pub n: usize,
    pub k: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LrnParams {
    fn default() -> Self {
        LrnParams {
            n: 2,
            k: 2.0,
            alpha: 1e-4,
            beta: 0.75,
        }
    }
}

impl LrnParams {
    pub fn validate(&self) -> Result<()> {
        if self.k > 0.0 && self.beta > 0.0 && self.alpha >= 0.0 && self.k.is_finite() && self.alpha.is_finite() {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "LRN needs k > 0, beta > 0, alpha >= 0; got {self:?}"
            )))
        }
    }

    fn window(&self, c: usize, channels: usize) -> std::ops::Range<usize> {
        c.saturating_sub(self.n)..(c + self.n + 1).min(channels)
    }

    /// Denominator base `k + alpha * windowed sum of squares`, per element.
    fn scale(&self, x: &[f64], c: usize, plane: usize) -> Vec<f64> {
        let mut s = vec![self.k; x.len()];
        for ch in 0..c {
            for src in self.window(ch, c) {
                let (dst, from) = (&mut s[ch * plane..][..plane], &x[src * plane..][..plane]);
                for (d, &v) in dst.iter_mut().zip(from) {
                    *d += self.alpha * v * v;
                }
            }
        }
        s
    }
}

pub fn lrn(input: &Tensor, p: &LrnParams) -> Result<Tensor> {
    let (c, h, w) = chw(input, "lrn")?;
    let x = input.data();
    let s = p.scale(x, c, h * w);
    let out = x.iter().zip(&s).map(|(&v, &s)| v * s.powf(-p.beta)).collect();
    Tensor::from_vec(input.shape(), out)
}

/// `dL/d(in)` given `dL/d(out)`.
///
/// `d out[c] / d in[j] = [c == j] S_c^-b - 2 a b in[c] in[j] S_c^(-b-1)` for `j` in c's window.
pub fn lrn_backward(input: &Tensor, p: &LrnParams, grad_out: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw(input, "lrn")?;
    grad_out.expect_shape(input.shape())?;
    let plane = h * w;
    let x = input.data();
    let g = grad_out.data();
    let s = p.scale(x, c, plane);
    // t[c] = g[c] * in[c] * S_c^(-beta - 1)
    let t: Vec<f64> = (0..x.len()).map(|i| g[i] * x[i] * s[i].powf(-p.beta - 1.0)).collect();
    let mut gx: Vec<f64> = (0..x.len()).map(|i| g[i] * s[i].powf(-p.beta)).collect();
    let coef = 2.0 * p.alpha * p.beta;
    for j in 0..c {
        // the window is symmetric, so channels whose window holds j are j's own window
        for src in p.window(j, c) {
            for i in 0..plane {
                gx[j * plane + i] -= coef * x[j * plane + i] * t[src * plane + i];
            }
        }
    }
    Tensor::from_vec(input.shape(), gx)
}
