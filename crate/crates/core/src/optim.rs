//! Mini-batch SGD with momentum and weight decay, the epoch loop,
//! evaluation, and the per-epoch training curve.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::arch::PdcnnSpec;
use crate::data::{sample_patch, PatchMode, Sample};
use crate::error::{Error, Result};
use crate::model::{argmax, Network};
use crate::tensor::{Rng, Tensor};

/// Multiply the learning rate by `drop_factor` after `patience` epochs without a new best test error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub drop_factor: f64,
    pub patience: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr_schedule: LrSchedule,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 32,
            max_epochs: 100,
            lr_schedule: LrSchedule {
                drop_factor: 0.1,
                patience: 20,
            },
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite()
            && self.batch_size > 0
            && self.lr_schedule.drop_factor > 0.0
            && self.lr_schedule.patience > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("invalid optimizer settings: {self:?}")))
        }
    }
}

/// One parameter update: `v <- momentum * v - lr * (g + decay * w); w <- w + v`.
pub fn sgd_update(w: &mut Tensor, v: &mut Tensor, g: &Tensor, lr: f64, momentum: f64, decay: f64) -> Result<()> {
    if w.shape() != v.shape() || w.shape() != g.shape() {
        return Err(Error::Contract(format!(
            "sgd shapes differ: weight {:?}, velocity {:?}, gradient {:?}",
            w.shape(),
            v.shape(),
            g.shape()
        )));
    }
    for ((wi, vi), &gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
        *vi = momentum * *vi - lr * (gi + decay * *wi);
        *wi += *vi;
    }
    Ok(())
}

/// Parameters, their velocities, the epoch counter, and the shuffling stream.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub net: Network,
    pub velocities: Vec<Tensor>,
    pub epoch: usize,
    pub rng: Rng,
    /// Current learning rate after schedule drops.
    pub learning_rate: f64,
}

impl TrainState {
    pub fn new(net: Network, rng: Rng, cfg: &SgdConfig) -> Self {
        let velocities = net.params().iter().map(|p| p.value.zeros_like()).collect();
        TrainState {
            net,
            velocities,
            epoch: 0,
            rng,
            learning_rate: cfg.learning_rate,
        }
    }
}

/// Applies `grads` to every parameter; biases skip weight decay.
pub fn sgd_step(state: &mut TrainState, grads: &[Tensor], cfg: &SgdConfig) -> Result<()> {
    if grads.len() != state.velocities.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            state.velocities.len()
        )));
    }
    let lr = state.learning_rate;
    for ((p, v), g) in state.net.params_mut().iter_mut().zip(&mut state.velocities).zip(grads) {
        let decay = if p.decay { cfg.weight_decay } else { 0.0 };
        sgd_update(&mut p.value, v, g, lr, cfg.momentum, decay)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub train_error: f64,
    pub steps: usize,
}

/// Stream for the augmentation of one sample in one epoch.
pub fn sample_rng(seed: u64, epoch: usize, sample: usize) -> Rng {
    Rng::derive(seed, &[2, epoch as u64, sample as u64])
}

/// One pass over `train` in a shuffled order, one SGD step per mini-batch
/// (the last batch may be short).
///
/// Per-sample work runs in parallel; gradients are summed in batch order so
/// the result does not depend on thread scheduling.
pub fn train_epoch(state: &mut TrainState, train: &[Sample], cfg: &SgdConfig, seed: u64) -> Result<EpochStats> {
    if train.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    cfg.validate()?;
    state.epoch += 1;
    let crop = state.net.input_shape()[1];
    let mut order: Vec<usize> = (0..train.len()).collect();
    state.rng.shuffle(&mut order);

    let (mut loss_sum, mut wrong, mut steps) = (0.0, 0usize, 0usize);
    for batch in order.chunks(cfg.batch_size) {
        let net = &state.net;
        let epoch = state.epoch;
        let results: Vec<_> = batch
            .par_iter()
            .map(|&i| {
                let s = &train[i];
                let mut rng = sample_rng(seed, epoch, i);
                let x = sample_patch(&s.image, crop, &mut rng, PatchMode::Train)?;
                let g = net.loss_and_grads(&x, s.label)?;
                let miss = argmax(g.logits.data()) != s.label;
                Ok::<_, Error>((g, miss))
            })
            .collect();
        let mut sum: Option<Vec<Tensor>> = None;
        for r in results {
            let (g, miss) = r?;
            loss_sum += g.loss;
            wrong += usize::from(miss);
            match sum.as_mut() {
                None => sum = Some(g.grads),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g.grads) {
                        a.axpy(1.0, b)?;
                    }
                }
            }
        }
        let inv = 1.0 / batch.len() as f64;
        let mean: Vec<Tensor> = sum.unwrap_or_default().iter().map(|t| t.scale(inv)).collect();
        sgd_step(state, &mean, cfg)?;
        steps += 1;
    }
    let n = train.len() as f64;
    Ok(EpochStats {
        mean_loss: loss_sum / n,
        train_error: wrong as f64 / n,
        steps,
    })
}

/// Misclassified fraction on center crops.
pub fn evaluate(net: &Network, test: &[Sample]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Domain("evaluation set is empty".into()));
    }
    let crop = net.input_shape()[1];
    let wrong: Vec<bool> = test
        .par_iter()
        .map(|s| {
            let x = sample_patch(&s.image, crop, &mut Rng::new(0), PatchMode::Test)?;
            Ok(net.predict(&x)? != s.label)
        })
        .collect::<Result<_>>()?;
    Ok(wrong.iter().filter(|&&w| w).count() as f64 / test.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_error: f64,
    pub test_error: f64,
    pub seconds: f64,
}

pub const CURVE_HEADER: &str = "epoch,train_loss,train_error,test_error,seconds";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainCurve {
    pub records: Vec<EpochRecord>,
}

impl TrainCurve {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn test_errors(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.test_error).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CURVE_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.train_error, r.test_error, r.seconds
            ));
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == CURVE_HEADER => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("expected header {CURVE_HEADER}"),
                })
            }
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Parse { line: i + 1, msg };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(format!("expected 5 columns, found {}", f.len())));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
            let epoch = f[0].trim().parse::<usize>().map_err(|e| bad(e.to_string()))?;
            if records.last().is_some_and(|r: &EpochRecord| r.epoch >= epoch) {
                return Err(bad("epochs must increase".into()));
            }
            records.push(EpochRecord {
                epoch,
                train_loss: num(f[1])?,
                train_error: num(f[2])?,
                test_error: num(f[3])?,
                seconds: num(f[4])?,
            });
        }
        Ok(TrainCurve { records })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        TrainCurve::parse_csv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Record wall-clock seconds per epoch; when false the column is 0 so
    /// curves are byte-reproducible.
    pub wall_clock: bool,
    pub on_epoch: Option<&'a (dyn Fn(&EpochRecord) + Sync)>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest test error (initial ones if no epoch ran).
    pub net: Network,
    pub curve: TrainCurve,
    pub best_epoch: Option<usize>,
    pub best_test_error: Option<f64>,
    /// Mean seconds per optimizer step, when wall-clock timing was on.
    pub seconds_per_batch: Option<f64>,
}

/// Initializes `spec`, runs `cfg.max_epochs` epochs, and keeps the best-test-error parameters.
pub fn train(
    spec: PdcnnSpec,
    train_set: &[Sample],
    test_set: &[Sample],
    cfg: &SgdConfig,
    seed: u64,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut init_rng = Rng::derive(seed, &[0]);
    let net = Network::init(spec, &mut init_rng)?;
    let [c, crop, _] = net.input_shape();
    for s in train_set.iter().chain(test_set) {
        let sh = s.image.shape();
        if sh.len() != 3 || sh[0] != c || sh[1] < crop || sh[2] < crop {
            return Err(Error::Shape(format!(
                "image {sh:?} cannot yield a {c}x{crop}x{crop} input"
            )));
        }
    }
    let mut state = TrainState::new(net, Rng::derive(seed, &[1]), cfg);
    let mut curve = TrainCurve::default();
    let mut best: Option<(usize, f64, Network)> = None;
    let mut stale = 0;
    let mut total_time = 0.0;
    let mut total_steps = 0;
    for _ in 0..cfg.max_epochs {
        let t0 = Instant::now();
        let stats = train_epoch(&mut state, train_set, cfg, seed)?;
        total_time += t0.elapsed().as_secs_f64();
        total_steps += stats.steps;
        let test_error = evaluate(&state.net, test_set)?;
        let rec = EpochRecord {
            epoch: state.epoch,
            train_loss: stats.mean_loss,
            train_error: stats.train_error,
            test_error,
            seconds: if opts.wall_clock {
                t0.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        if let Some(cb) = opts.on_epoch {
            cb(&rec);
        }
        curve.records.push(rec);
        if best.as_ref().is_none_or(|(_, e, _)| test_error < *e) {
            best = Some((state.epoch, test_error, state.net.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.lr_schedule.patience {
                state.learning_rate *= cfg.lr_schedule.drop_factor;
                stale = 0;
            }
        }
    }
    let seconds_per_batch = (opts.wall_clock && total_steps > 0).then(|| total_time / total_steps as f64);
    Ok(match best {
        Some((epoch, err, net)) => TrainOutcome {
            net,
            curve,
            best_epoch: Some(epoch),
            best_test_error: Some(err),
            seconds_per_batch,
        },
        None => TrainOutcome {
            net: state.net,
            curve,
            best_epoch: None,
            best_test_error: None,
            seconds_per_batch,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    #[test]
    fn fixed_point() {
        let mut w = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = w.clone();
        let mut v = w.zeros_like();
        sgd_update(&mut w, &mut v, &before.zeros_like(), 0.1, 0.9, 0.0).unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn two_step_trajectory() {
        let (mut w, mut v, g) = (scalar(1.0), scalar(0.0), scalar(1.0));
        sgd_update(&mut w, &mut v, &g, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(v.data()[0], -0.1);
        assert_eq!(w.data()[0], 0.9);
        sgd_update(&mut w, &mut v, &g, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(v.data()[0], 0.9 * -0.1 - 0.1 * 1.0);
        assert_eq!(w.data()[0], 0.71);
    }

    #[test]
    fn plain_gradient_descent() {
        let (mut w, mut v, g) = (scalar(0.3), scalar(0.0), scalar(-1.7));
        sgd_update(&mut w, &mut v, &g, 0.05, 0.0, 0.0).unwrap();
        assert_eq!(w.data()[0].to_bits(), (0.3 - 0.05 * -1.7f64).to_bits());
    }

    #[test]
    fn decay_shrinks() {
        let (mut w, mut v, g) = (scalar(2.0), scalar(0.0), scalar(0.0));
        let mut last = 2.0f64;
        for _ in 0..10 {
            sgd_update(&mut w, &mut v, &g, 0.1, 0.0, 0.5).unwrap();
            let now = w.data()[0].abs();
            assert!(now < last);
            assert!((now - last * (1.0 - 0.05)).abs() < 1e-12);
            last = now;
        }
    }

    #[test]
    fn quadratic_converges() {
        // L(w) = w^2, g = 2w
        let (mut w, mut v) = (scalar(1.0), scalar(0.0));
        for _ in 0..200 {
            let g = w.scale(2.0);
            sgd_update(&mut w, &mut v, &g, 0.1, 0.9, 0.0).unwrap();
        }
        assert!(w.data()[0].abs() < 1e-3, "{}", w.data()[0]);
    }

    #[test]
    fn shape_mismatch() {
        let (mut w, mut v) = (scalar(1.0), scalar(0.0));
        assert!(matches!(
            sgd_update(&mut w, &mut v, &Tensor::zeros(&[2]).unwrap(), 0.1, 0.9, 0.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn curve_csv_round_trip() {
        let curve = TrainCurve {
            records: vec![
                EpochRecord {
                    epoch: 1,
                    train_loss: 0.69,
                    train_error: 0.5,
                    test_error: 0.45,
                    seconds: 0.0,
                },
                EpochRecord {
                    epoch: 2,
                    train_loss: 0.1,
                    train_error: 0.03125,
                    test_error: 0.1,
                    seconds: 1.5,
                },
            ],
        };
        let text = curve.to_csv();
        assert!(text.starts_with("epoch,train_loss,train_error,test_error,seconds\n1,0.69,0.5,0.45,0\n"));
        assert_eq!(TrainCurve::parse_csv(&text).unwrap(), curve);
        assert!(TrainCurve::parse_csv("epoch,x\n").is_err());
    }
}
