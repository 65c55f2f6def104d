//! Central finite differences, used to check analytic gradients.

use crate::error::Result;
use crate::layers::{
    conv2d_backward, fully_connected, fully_connected_backward, lrn, lrn_backward, maxpool, maxpool_backward, relu,
    relu_backward, softmax_xent, ConvParams, FcParams, LrnParams,
};
use crate::tensor::{Rng, Tensor};

/// Numerical gradient of scalar `f` at `x`, `(f(x + h e_i) - f(x - h e_i)) / 2h` per element.
pub fn central_difference(x: &Tensor, step: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = x.zeros_like();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Largest elementwise `|a - n| / max(|a|, |n|, floor)`.
///
/// `floor` keeps components that are zero in both from dividing by zero.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Dot product of two equal-length tensors; turns a tensor output into a scalar loss.
pub fn project(t: &Tensor, weights: &Tensor) -> f64 {
    t.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}

/// Finite-difference step used by [`layer_suite`].
pub const SUITE_STEP: f64 = 1e-3;
/// Denominator floor used by [`layer_suite`].
pub const SUITE_FLOOR: f64 = 1e-8;

/// Worst agreement between analytic and numeric gradients for one layer kind.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCheck {
    pub layer: &'static str,
    pub configs: usize,
    pub max_rel_error: f64,
}

fn random(shape: &[usize], rng: &mut Rng) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.uniform() * 2.0 - 1.0).collect())
}

/// Values at least 0.04 apart, so a step of 1e-3 never reorders a pooling window.
fn spread(shape: &[usize], rng: &mut Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut ranks: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut ranks);
    Tensor::from_vec(
        shape,
        ranks
            .iter()
            .map(|&r| r as f64 * 0.05 - 1.0 + rng.uniform() * 0.01)
            .collect(),
    )
}

/// Values kept at least 0.05 away from the ReLU kink.
fn off_kink(shape: &[usize], rng: &mut Rng) -> Result<Tensor> {
    let t = random(shape, rng)?;
    Ok(t.map(|v| if v >= 0.0 { v + 0.05 } else { v - 0.05 }))
}

fn dims(rng: &mut Rng, lo: usize) -> (usize, usize, usize) {
    (1 + rng.below(3), lo + rng.below(7 - lo), lo + rng.below(7 - lo))
}

/// Checks every layer kind against central differences over `configs`
/// random configurations each (channels <= 3, spatial extent <= 6).
///
/// Tensor-valued layers are reduced to a scalar by projecting onto a random
/// direction, so the analytic side is the backward pass fed that direction.
pub fn layer_suite(configs: usize, seed: u64) -> Result<Vec<LayerCheck>> {
    let mut rng = Rng::new(seed);
    let mut worst = [0.0f64; 6];
    let h = SUITE_STEP;
    let err = |a: &Tensor, n: &Tensor| max_relative_error(a, n, SUITE_FLOOR);
    for _ in 0..configs {
        // conv2d: input, weight and bias gradients
        let (c, ih, iw) = dims(&mut rng, 1);
        let padding = rng.below(2);
        let kernel = 1 + rng.below(3.min(ih.min(iw) + 2 * padding));
        let stride = 1 + rng.below(2);
        let o = 1 + rng.below(3);
        let x = random(&[c, ih, iw], &mut rng)?;
        let p = ConvParams::new(
            random(&[o, c, kernel, kernel], &mut rng)?,
            random(&[o], &mut rng)?,
            stride,
            padding,
        )?;
        let out = crate::layers::conv2d(&x, &p)?;
        let dir = random(out.shape(), &mut rng)?;
        let g = conv2d_backward(&x, &p, &dir)?;
        let nx = central_difference(&x, h, |t| project(&crate::layers::conv2d(t, &p).unwrap(), &dir));
        let nw = central_difference(&p.weights, h, |w| {
            let q = ConvParams {
                weights: w.clone(),
                ..p.clone()
            };
            project(&crate::layers::conv2d(&x, &q).unwrap(), &dir)
        });
        let nb = central_difference(&p.bias, h, |b| {
            let q = ConvParams {
                bias: b.clone(),
                ..p.clone()
            };
            project(&crate::layers::conv2d(&x, &q).unwrap(), &dir)
        });
        worst[0] = worst[0]
            .max(err(&g.input, &nx))
            .max(err(&g.weights, &nw))
            .max(err(&g.bias, &nb));

        // maxpool
        let (c, ih, iw) = dims(&mut rng, 2);
        let window = 1 + rng.below(3.min(ih).min(iw));
        let stride = 1 + rng.below(2);
        let x = spread(&[c, ih, iw], &mut rng)?;
        let dir = random(maxpool(&x, window, stride)?.shape(), &mut rng)?;
        let a = maxpool_backward(&x, window, stride, &dir)?;
        let n = central_difference(&x, h, |t| project(&maxpool(t, window, stride).unwrap(), &dir));
        worst[1] = worst[1].max(err(&a, &n));

        // lrn, with constants large enough that the normalizer matters
        let (c, ih, iw) = dims(&mut rng, 1);
        let lp = LrnParams {
            n: 1 + rng.below(2),
            k: 1.0 + rng.uniform(),
            alpha: 0.05 + 0.5 * rng.uniform(),
            beta: 0.75,
        };
        let x = random(&[c, ih, iw], &mut rng)?.scale(2.0);
        let dir = random(x.shape(), &mut rng)?;
        let a = lrn_backward(&x, &lp, &dir)?;
        let n = central_difference(&x, h, |t| project(&lrn(t, &lp).unwrap(), &dir));
        worst[2] = worst[2].max(err(&a, &n));

        // relu
        let (c, ih, iw) = dims(&mut rng, 1);
        let x = off_kink(&[c, ih, iw], &mut rng)?;
        let dir = random(x.shape(), &mut rng)?;
        let a = relu_backward(&x, &dir)?;
        let n = central_difference(&x, h, |t| project(&relu(t), &dir));
        worst[3] = worst[3].max(err(&a, &n));

        // fully connected
        let (c, ih, iw) = dims(&mut rng, 1);
        let k = 1 + rng.below(3);
        let x = random(&[c, ih, iw], &mut rng)?;
        let p = FcParams {
            weights: random(&[k, x.len()], &mut rng)?,
            bias: random(&[k], &mut rng)?,
        };
        let dir = random(&[k], &mut rng)?;
        let g = fully_connected_backward(&x, &p, &dir)?;
        let nx = central_difference(&x, h, |t| project(&fully_connected(t, &p).unwrap(), &dir));
        let nw = central_difference(&p.weights, h, |w| {
            let q = FcParams {
                weights: w.clone(),
                bias: p.bias.clone(),
            };
            project(&fully_connected(&x, &q).unwrap(), &dir)
        });
        let nb = central_difference(&p.bias, h, |b| {
            let q = FcParams {
                weights: p.weights.clone(),
                bias: b.clone(),
            };
            project(&fully_connected(&x, &q).unwrap(), &dir)
        });
        worst[4] = worst[4]
            .max(err(&g.input, &nx))
            .max(err(&g.weights, &nw))
            .max(err(&g.bias, &nb));

        // softmax cross-entropy
        let classes = 2 + rng.below(4);
        let label = rng.below(classes);
        let z = random(&[classes], &mut rng)?.scale(3.0);
        let (_, a) = softmax_xent(&z, label)?;
        let n = central_difference(&z, h, |t| softmax_xent(t, label).unwrap().0);
        worst[5] = worst[5].max(err(&a, &n));
    }
    let names = ["conv2d", "maxpool", "lrn", "relu", "fully_connected", "softmax_xent"];
    Ok(names
        .iter()
        .zip(worst)
        .map(|(&layer, max_rel_error)| LayerCheck {
            layer,
            configs,
            max_rel_error,
        })
        .collect())
}
