//! Order-stable reductions and least-squares fits.
//!
//! Parallel floating-point reductions are split into fixed-size chunks whose
//! partial results are combined sequentially, so a result never depends on
//! the number of worker threads or on work-stealing order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const CHUNK: usize = 4096;

/// Sum of `values` with a reduction order fixed by the slice length.
pub fn det_sum(values: &[f64]) -> f64 {
    let partial: Vec<f64> = values.par_chunks(CHUNK).map(|c| c.iter().sum()).collect();
    partial.iter().sum()
}

/// Dot product with a reduction order fixed by the slice length.
pub fn det_dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let partial: Vec<f64> = a
        .par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
        .collect();
    partial.iter().sum()
}

/// Sum of `f(i)` for `i < n`, chunked deterministically.
pub fn det_sum_by<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    let partial: Vec<f64> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let end = ((c + 1) * CHUNK).min(n);
            (c * CHUNK..end).map(&f).sum()
        })
        .collect();
    partial.iter().sum()
}

/// Maximum of `f(i)` for `i < n` (NaN-free input assumed); `-inf` when empty.
pub fn det_max_by<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    (0..n).into_par_iter().map(&f).reduce(|| f64::NEG_INFINITY, f64::max)
}

/// Result of an ordinary least-squares line fit `y = slope * x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Standard error of the slope (0 when only two points are fitted).
    pub slope_stderr: f64,
}

/// Least-squares line through `(x, y)`; `None` with fewer than two points or
/// degenerate abscissae.
pub fn fit_line(x: &[f64], y: &[f64]) -> Option<LineFit> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - slope * a - intercept).powi(2)).sum();
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    let slope_stderr = if n > 2 { (sse / (nf - 2.0) / sxx).sqrt() } else { 0.0 };
    Some(LineFit {
        slope,
        intercept,
        r2,
        slope_stderr,
    })
}

/// Fit of `ln y` against `ln x`. Non-positive entries are skipped.
pub fn fit_loglog(x: &[f64], y: &[f64]) -> Option<LineFit> {
    let (lx, ly): (Vec<f64>, Vec<f64>) = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .unzip();
    fit_line(&lx, &ly)
}

/// Observed orders `ln(e_i / e_{i+1}) / ln(h_i / h_{i+1})` between consecutive levels.
pub fn observed_orders(h: &[f64], err: &[f64]) -> Vec<f64> {
    h.windows(2)
        .zip(err.windows(2))
        .map(|(hw, ew)| (ew[0] / ew[1]).ln() / (hw[0] / hw[1]).ln())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line_has_unit_r2() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v - 1.0).collect();
        let f = fit_line(&x, &y).unwrap();
        assert!((f.slope - 3.0).abs() < 1e-12);
        assert!((f.intercept + 1.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
        assert!(f.slope_stderr < 1e-12);
    }

    #[test]
    fn loglog_recovers_power() {
        let x = [0.5, 0.25, 0.125];
        let y: Vec<f64> = x.iter().map(|v: &f64| 7.0 * v.powf(1.5)).collect();
        let f = fit_loglog(&x, &y).unwrap();
        assert!((f.slope - 1.5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_fit_is_none() {
        assert!(fit_line(&[1.0], &[2.0]).is_none());
        assert!(fit_line(&[1.0, 1.0], &[2.0, 3.0]).is_none());
    }

    #[test]
    fn chunked_sum_matches_serial() {
        let v: Vec<f64> = (0..10_000).map(|i| (i as f64).sin()).collect();
        let serial: f64 = v.iter().sum();
        assert!((det_sum(&v) - serial).abs() < 1e-9);
        assert_eq!(det_sum(&v), det_sum(&v));
        assert!((det_sum_by(v.len(), |i| v[i]) - serial).abs() < 1e-9);
        assert!((det_dot(&v, &v) - v.iter().map(|x| x * x).sum::<f64>()).abs() < 1e-9);
    }
}
