//! First-layer filter variance, convergence detection, the `T = t * n * e`
//! convergence-time model, and CSV report emission.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Network;
use crate::optim::TrainCurve;
use crate::search::SearchTrace;
use crate::tensor::Tensor;

/// Formats like C's `%.6g`: six significant digits, trailing zeros dropped.
pub fn sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.5e}");
    let (mant, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-4..6).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mant), exp.abs())
    } else {
        trim(&format!("{x:.*}", (5 - exp) as usize))
    }
}

/// Something that serializes to a deterministic CSV document.
pub trait CsvReport {
    fn to_csv(&self) -> String;
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterVarianceEntry {
    pub branch: String,
    pub layer: String,
    pub variance: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FilterVarianceReport {
    pub entries: Vec<FilterVarianceEntry>,
    /// Mean over entries; `None` when there are none.
    pub mean: Option<f64>,
}

impl FilterVarianceReport {
    pub fn from_weights<'a>(weights: impl IntoIterator<Item = (String, String, &'a Tensor)>) -> Result<Self> {
        let entries = weights
            .into_iter()
            .map(|(branch, layer, w)| {
                Ok(FilterVarianceEntry {
                    branch,
                    layer,
                    variance: w.variance()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mean =
            (!entries.is_empty()).then(|| entries.iter().map(|e| e.variance).sum::<f64>() / entries.len() as f64);
        Ok(FilterVarianceReport { entries, mean })
    }
}

impl CsvReport for FilterVarianceReport {
    fn to_csv(&self) -> String {
        let mut s = String::from("branch,layer,variance\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{}\n", e.branch, e.layer, sig6(e.variance)));
        }
        if let Some(m) = self.mean {
            s.push_str(&format!("mean,,{}\n", sig6(m)));
        }
        s
    }
}

/// Population variance of each branch's conv1 weights (biases excluded), plus their mean.
pub fn filter_variance(net: &Network) -> Result<FilterVarianceReport> {
    FilterVarianceReport::from_weights(net.first_conv_weights())
}

/// `t * n * e` before rounding.
pub fn convergence_seconds(t: f64, n: u64, e: u64) -> f64 {
    t.max(0.0) * n as f64 * e as f64
}

/// Total convergence time `T = t * n * e`, rounded to the nearest second.
///
/// `t` is the mean time of one batch iteration, `n` the number of training
/// batches, `e` the number of epochs to convergence.
pub fn convergence_time(t: f64, n: u64, e: u64) -> u64 {
    convergence_seconds(t, n, e).round() as u64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvergenceReport {
    pub t: f64,
    pub n: u64,
    pub e: u64,
    pub total: u64,
}

impl ConvergenceReport {
    pub fn new(t: f64, n: u64, e: u64) -> Self {
        ConvergenceReport {
            t,
            n,
            e,
            total: convergence_time(t, n, e),
        }
    }
}

impl CsvReport for ConvergenceReport {
    fn to_csv(&self) -> String {
        format!("t,n,e,T\n{},{},{},{}\n", sig6(self.t), self.n, self.e, self.total)
    }
}

impl CsvReport for SearchTrace {
    fn to_csv(&self) -> String {
        SearchTrace::to_csv(self)
    }
}

/// Default moving-range window, in epochs.
pub const CONVERGENCE_WINDOW: usize = 10;
/// Default moving-range tolerance.
pub const CONVERGENCE_TOL: f64 = 0.005;

/// First epoch (1-based) from which every `window`-epoch span of `errors`
/// has a range (max - min) below `tol`; `None` if there is no such epoch.
pub fn detect_convergence_in(errors: &[f64], window: usize, tol: f64) -> Option<usize> {
    if window == 0 || window > errors.len() {
        return None;
    }
    let range = |s: &[f64]| {
        let (lo, hi) = s.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        hi - lo
    };
    let mut first = None;
    for start in (0..=errors.len() - window).rev() {
        if range(&errors[start..start + window]) < tol {
            first = Some(start + 1);
        } else {
            break;
        }
    }
    first
}

/// [`detect_convergence_in`] over a curve's test errors.
pub fn detect_convergence(curve: &TrainCurve, window: usize, tol: f64) -> Option<usize> {
    let errors = curve.test_errors();
    detect_convergence_in(&errors, window, tol).map(|i| curve.records[i - 1].epoch)
}

pub fn emit_report(report: &dyn CsvReport, path: &Path) -> Result<()> {
    fs::write(path, report.to_csv()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig6_matches_printf_g() {
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(1.25), "1.25");
        assert_eq!(sig6(8.32633), "8.32633");
        assert_eq!(sig6(0.079832), "0.079832");
        assert_eq!(sig6(0.0076421234), "0.00764212");
        assert_eq!(sig6(1.25e-5), "1.25e-05");
        assert_eq!(sig6(24155.0), "24155");
        assert_eq!(sig6(1234567.0), "1.23457e+06");
        assert_eq!(sig6(-0.5), "-0.5");
        assert_eq!(sig6(999999.5), "1e+06");
    }

    #[test]
    fn reference_convergence_times() {
        assert_eq!(convergence_time(8.32633, 3, 967), 24155);
        assert_eq!(convergence_time(10.78233, 3, 988), 31959);
        assert_eq!(convergence_time(6.26900, 3, 923), 17359);
        assert_eq!(convergence_time(0.0, 7, 1000), 0);
    }

    #[test]
    fn convergence_time_scales() {
        for e in [1u64, 10, 923, 5000] {
            assert_eq!(
                convergence_seconds(6.269, 3, 2 * e),
                2.0 * convergence_seconds(6.269, 3, e)
            );
        }
        assert!(convergence_time(1.0, 3, 10) <= convergence_time(1.5, 3, 10));
    }

    #[test]
    fn convergence_detection_examples() {
        assert_eq!(detect_convergence_in(&[0.2; 6], 3, 0.01), Some(1));
        assert_eq!(detect_convergence_in(&[0.5, 0.4, 0.3, 0.2, 0.1], 2, 0.0), None);
        assert_eq!(detect_convergence_in(&[0.5, 0.3, 0.2, 0.2, 0.2], 3, 0.01), Some(3));
        assert_eq!(detect_convergence_in(&[0.5, 0.3], 3, 0.01), None);
        // a late excursion resets the answer
        assert_eq!(
            detect_convergence_in(&[0.2, 0.2, 0.2, 0.4, 0.2, 0.2, 0.2], 2, 0.01),
            Some(5)
        );
    }

    #[test]
    fn reports_csv() {
        assert_eq!(FilterVarianceReport::default().to_csv(), "branch,layer,variance\n");
        let r = ConvergenceReport::new(8.32633, 3, 967);
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines, ["t,n,e,T", "8.32633,3,967,24155"]);
    }

    #[test]
    fn variance_report() {
        let w = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = FilterVarianceReport::from_weights([("arch2".to_string(), "conv1".to_string(), &w)]).unwrap();
        assert_eq!(r.entries[0].variance, 1.25);
        assert_eq!(r.mean, Some(1.25));
        assert_eq!(r.to_csv(), "branch,layer,variance\narch2,conv1,1.25\nmean,,1.25\n");
    }
}
