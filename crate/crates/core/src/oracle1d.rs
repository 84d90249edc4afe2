//! Closed-form solution of the one-dimensional problem
//! `-(a(x/ε) u')' = f` on `(0, 1)` with `u(0) = u(1) = 0`.
//!
//! With `F(x) = ∫_0^x f` the flux is `a(x/ε) u' = -F + C^ε` where
//! `C^ε = ∫ a^{-1} F / ∫ a^{-1}` enforces `u(1) = 0`; likewise
//! `a* (u*)' = -F + C*` with `C* = ∫_0^1 F`. The corrector is
//! `w(y) = -y + a* ∫_0^y 1/a`, split into `w_per(y) = -y + a* ∫_0^y 1/a_per`
//! and `w̃(y) = -a* ∫_0^y ã / (a_per (a_per + ã))`.
//!
//! Every integral is a composite Simpson sum on one uniform node set per ε,
//! fine enough to resolve both the period and the profile scale.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::{Coefficient, PeriodicCoefficient, PerturbedCoefficient};
use crate::error::{Error, Result};
use crate::numeric::{fit_line, fit_loglog, LineFit};
use crate::quadrature::{cumulative_simpson, simpson};
use crate::source::Source;

/// Largest node count of a single quadrature grid.
const MAX_NODES: usize = 1 << 27;

#[derive(Debug, Clone)]
pub struct Oracle1D {
    pub coef: PerturbedCoefficient,
    pub source: Source,
    /// Quadrature nodes per `min(1, ρ)` in the fast variable; at least 32.
    pub samples_per_period: usize,
}

impl Oracle1D {
    pub fn new(coef: PerturbedCoefficient, source: Source) -> Result<Self> {
        if coef.per.dim != 1 {
            return Err(Error::InvalidConfig(format!(
                "the 1D oracle needs a 1D coefficient, got d = {}",
                coef.per.dim
            )));
        }
        source.validate(1)?;
        Ok(Self {
            coef,
            source,
            samples_per_period: 32,
        })
    }

    fn fast_step(&self) -> Result<f64> {
        if self.samples_per_period < 32 {
            return Err(Error::Unresolved(format!(
                "{} samples per period; at least 32 are needed",
                self.samples_per_period
            )));
        }
        Ok(self.coef.profile.scale().min(1.0) / self.samples_per_period as f64)
    }

    /// `a* = (∫_0^1 1/a_per)^{-1}`.
    pub fn a_star(&self) -> Result<f64> {
        let n = (1.0 / self.fast_step()?).ceil() as usize;
        Ok(harmonic_mean(&self.coef.per, n.max(64)))
    }

    /// Cell average of `a* ∫_0^y 1/a_per − y`, the constant removed to make
    /// `w_per` mean-zero like the correctors of the cell solver.
    pub fn w_per_mean(&self) -> Result<f64> {
        let n = ((1.0 / self.fast_step()?).ceil() as usize).max(64).next_multiple_of(2);
        let h = 1.0 / n as f64;
        let a_star = self.a_star()?;
        let inv: Vec<f64> = (0..=n)
            .map(|i| 1.0 / self.coef.per.entry(0, 0, &[i as f64 * h]))
            .collect();
        let w: Vec<f64> = cumulative_simpson(&inv, h)
            .iter()
            .enumerate()
            .map(|(i, c)| a_star * c - i as f64 * h)
            .collect();
        Ok(simpson(&w, h))
    }
}

/// Harmonic mean of a 1D periodic coefficient by Simpson with `intervals` panels.
pub fn harmonic_mean(per: &PeriodicCoefficient, intervals: usize) -> f64 {
    let n = intervals.max(2).next_multiple_of(2);
    let h = 1.0 / n as f64;
    let inv: Vec<f64> = (0..=n).map(|i| 1.0 / per.entry(0, 0, &[i as f64 * h])).collect();
    1.0 / simpson(&inv, h)
}

/// Oracle fields on the uniform nodes `x_i = i h` of `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Oracle1DSolution {
    pub eps: f64,
    pub h: f64,
    pub a_star: f64,
    pub c_eps: f64,
    pub c_star: f64,
    pub f: Vec<f64>,
    /// `F(x) = ∫_0^x f`.
    pub big_f: Vec<f64>,
    /// `a(x/ε)`.
    pub a: Vec<f64>,
    pub du_eps: Vec<f64>,
    pub du_star: Vec<f64>,
    pub u_eps: Vec<f64>,
    pub u_star: Vec<f64>,
    /// `ε w(x/ε)`.
    pub eps_w: Vec<f64>,
    /// `ε w_per(x/ε)`, with `w_per` mean-zero on the cell.
    pub eps_w_per: Vec<f64>,
    /// `ε w̃(x/ε)`.
    pub eps_w_tilde: Vec<f64>,
}

impl Oracle1DSolution {
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn x(&self, i: usize) -> f64 {
        i as f64 * self.h
    }

    /// Piecewise-linear interpolation of a node array at `x ∈ [0, 1]`.
    pub fn interpolate(&self, values: &[f64], x: f64) -> f64 {
        let t = (x / self.h).clamp(0.0, (self.len() - 1) as f64);
        let i = (t.floor() as usize).min(self.len() - 2);
        let s = t - i as f64;
        (1.0 - s) * values[i] + s * values[i + 1]
    }

    /// `R^ε = u^ε − u* − ε w(x/ε) (u*)'`.
    pub fn remainder(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| self.u_eps[i] - self.u_star[i] - self.eps_w[i] * self.du_star[i])
            .collect()
    }

    /// `(R^ε)' = (u^ε)' − (u*)' (1 + w'(x/ε)) − ε w(x/ε) (u*)''` with
    /// `w' = a*/a − 1` and `(u*)'' = −f / a*`.
    pub fn remainder_derivative(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| {
                let w_prime = self.a_star / self.a[i] - 1.0;
                let d2 = -self.f[i] / self.a_star;
                self.du_eps[i] - self.du_star[i] * (1.0 + w_prime) - self.eps_w[i] * d2
            })
            .collect()
    }

    /// `(‖R^ε‖_{L²}, ‖(R^ε)'‖_{L²})`.
    pub fn remainder_norms(&self) -> (f64, f64) {
        let sq = |v: Vec<f64>| -> f64 {
            let s: Vec<f64> = v.iter().map(|x| x * x).collect();
            simpson(&s, self.h).max(0.0).sqrt()
        };
        (sq(self.remainder()), sq(self.remainder_derivative()))
    }

    /// `max |a(x/ε) (u^ε)' − (−F + C^ε)|` over the nodes.
    pub fn flux_identity_defect(&self) -> f64 {
        (0..self.len())
            .map(|i| (self.a[i] * self.du_eps[i] - (self.c_eps - self.big_f[i])).abs())
            .fold(0.0, f64::max)
    }

    /// `|u^ε(1)| + |u*(1)|`.
    pub fn boundary_defect(&self) -> f64 {
        self.u_eps.last().copied().unwrap_or(0.0).abs() + self.u_star.last().copied().unwrap_or(0.0).abs()
    }
}

/// Number of even intervals on `[0, 1]` for scale `ε`.
fn intervals(oracle: &Oracle1D, eps: f64) -> Result<usize> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::InvalidConfig(format!("ε must lie in (0, 1], got {eps}")));
    }
    let n = (1.0 / (eps * oracle.fast_step()?)).ceil() as usize;
    let n = n.max(64).next_multiple_of(2);
    if n + 1 > MAX_NODES {
        return Err(Error::Unresolved(format!(
            "ε = {eps} needs {n} quadrature intervals (limit {MAX_NODES})"
        )));
    }
    Ok(n)
}

pub fn exact_fields(oracle: &Oracle1D, eps: f64) -> Result<Oracle1DSolution> {
    let n = intervals(oracle, eps)?;
    let h = 1.0 / n as f64;
    let a_star = oracle.a_star()?;
    let w_mean = oracle.w_per_mean()?;
    let coef = &oracle.coef;
    let samples: Vec<(f64, f64, f64)> = (0..=n)
        .into_par_iter()
        .map(|i| {
            let x = i as f64 * h;
            let y = [x / eps];
            let a_per = coef.per.entry(0, 0, &y);
            let a = coef.eval(&y)[0][0];
            (oracle.source.eval(&[x]), a_per, a)
        })
        .collect();
    if let Some(bad) = samples.iter().position(|s| !(s.2 > 0.0)) {
        return Err(Error::Ellipticity {
            eigenvalue: samples[bad].2,
            floor: 0.0,
            at: vec![bad as f64 * h / eps],
        });
    }
    let f: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let a: Vec<f64> = samples.iter().map(|s| s.2).collect();
    let inv_a: Vec<f64> = a.iter().map(|v| 1.0 / v).collect();
    let inv_per: Vec<f64> = samples.iter().map(|s| 1.0 / s.1).collect();
    let big_f = cumulative_simpson(&f, h);
    let inv_a_f: Vec<f64> = inv_a.iter().zip(&big_f).map(|(p, q)| p * q).collect();
    let c_eps = simpson(&inv_a_f, h) / simpson(&inv_a, h);
    let c_star = simpson(&big_f, h);
    let du_eps: Vec<f64> = inv_a.iter().zip(&big_f).map(|(ia, ff)| ia * (c_eps - ff)).collect();
    let du_star: Vec<f64> = big_f.iter().map(|ff| (c_star - ff) / a_star).collect();
    let u_eps = cumulative_simpson(&du_eps, h);
    let u_star = cumulative_simpson(&du_star, h);
    let int_inv_a = cumulative_simpson(&inv_a, h);
    let int_inv_per = cumulative_simpson(&inv_per, h);
    let x = |i: usize| i as f64 * h;
    let eps_w: Vec<f64> = (0..=n).map(|i| a_star * int_inv_a[i] - x(i) - eps * w_mean).collect();
    let eps_w_per: Vec<f64> = (0..=n).map(|i| a_star * int_inv_per[i] - x(i) - eps * w_mean).collect();
    // ã / (a_per (a_per + ã)) = 1/a_per − 1/a, integrated directly
    let tilde_integrand: Vec<f64> = samples
        .iter()
        .map(|s| {
            let at = s.2 - s.1;
            at / (s.1 * s.2)
        })
        .collect();
    let eps_w_tilde: Vec<f64> = cumulative_simpson(&tilde_integrand, h)
        .into_iter()
        .map(|v| -a_star * v)
        .collect();
    Ok(Oracle1DSolution {
        eps,
        h,
        a_star,
        c_eps,
        c_star,
        f,
        big_f,
        a,
        du_eps,
        du_star,
        u_eps,
        u_star,
        eps_w,
        eps_w_per,
        eps_w_tilde,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub epsilon: f64,
    pub l2_r: f64,
    pub h1_r: f64,
    /// `‖(R^ε)'‖ / (ε^{1/2} |log ε|^{1/2})`.
    pub ratio_vs_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateStudy {
    pub rows: Vec<RateRow>,
    pub l2_fit: Option<LineFit>,
    pub h1_fit: Option<LineFit>,
    /// `max / min` of the bound ratios.
    pub ratio_band: f64,
}

pub fn rate_study_1d(oracle: &Oracle1D, eps_list: &[f64]) -> Result<RateStudy> {
    let rows: Vec<RateRow> = eps_list
        .par_iter()
        .map(|&eps| {
            let sol = exact_fields(oracle, eps)?;
            let (l2, h1) = sol.remainder_norms();
            Ok(RateRow {
                epsilon: eps,
                l2_r: l2,
                h1_r: h1,
                ratio_vs_bound: h1 / (eps.sqrt() * eps.ln().abs().sqrt()),
            })
        })
        .collect::<Result<_>>()?;
    let e: Vec<f64> = rows.iter().map(|r| r.epsilon).collect();
    let l2: Vec<f64> = rows.iter().map(|r| r.l2_r).collect();
    let h1: Vec<f64> = rows.iter().map(|r| r.h1_r).collect();
    let ratios = rows.iter().map(|r| r.ratio_vs_bound);
    let (lo, hi) = ratios.fold((f64::INFINITY, 0.0f64), |(a, b), v| (a.min(v), b.max(v)));
    Ok(RateStudy {
        l2_fit: fit_loglog(&e, &l2),
        h1_fit: fit_loglog(&e, &h1),
        ratio_band: hi / lo,
        rows,
    })
}

/// Dyadic exponents `ε = 2^{-k}` for `k` in `k_min..=k_max`.
pub fn dyadic_eps(k_min: u32, k_max: u32) -> Vec<f64> {
    (k_min..=k_max).map(|k| 2f64.powi(-(k as i32))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthRow1D {
    pub n: u32,
    /// `sup_{[0, 2^n]} |w̃|`.
    pub sup_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectorGrowth1D {
    pub rows: Vec<GrowthRow1D>,
    /// Fit of `sup |w̃|` against `n`.
    pub fit: Option<LineFit>,
}

impl CorrectorGrowth1D {
    pub fn increments(&self) -> Vec<f64> {
        self.rows.windows(2).map(|w| w[1].sup_abs - w[0].sup_abs).collect()
    }
}

/// `sup |w̃|` over `[0, 2^n]` for `n = 0..=n_max`, integrating only over the
/// defect supports, where the integrand of `w̃` is nonzero.
pub fn corrector_growth_1d(oracle: &Oracle1D, n_max: u32) -> Result<CorrectorGrowth1D> {
    if n_max > 24 {
        return Err(Error::InvalidConfig(format!("n_max must be at most 24, got {n_max}")));
    }
    let a_star = oracle.a_star()?;
    let coef = &oracle.coef;
    let step = oracle.fast_step()?;
    let top = 2f64.powi(n_max as i32);
    let s = coef.profile.support_radius();
    let mut pieces: Vec<(f64, f64)> = if coef.profile.amplitude_norm() == 0.0 {
        Vec::new()
    } else {
        coef.sites_near(&[0.5 * top], 0.5 * top + s)
            .iter()
            .map(|site| ((site.center[0] - s).max(0.0), (site.center[0] + s).min(top)))
            .filter(|(a, b)| b > a)
            .collect()
    };
    pieces.sort_by(|p, q| p.0.total_cmp(&q.0));
    let mut merged: Vec<(f64, f64)> = Vec::new();
    for (a, b) in pieces {
        match merged.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => merged.push((a, b)),
        }
    }
    // split at the dyadic endpoints so every segment lies in one [2^{n-1}, 2^n]
    let marks: Vec<f64> = (0..=n_max).map(|n| 2f64.powi(n as i32)).collect();
    let mut segments = Vec::new();
    for (a, b) in merged {
        let mut lo = a;
        for &m in marks.iter().filter(|&&m| m > a && m < b) {
            segments.push((lo, m));
            lo = m;
        }
        segments.push((lo, b));
    }
    let total: f64 = segments.iter().map(|(a, b)| ((b - a) / step).ceil()).sum();
    if total > MAX_NODES as f64 {
        return Err(Error::Unresolved(format!(
            "defect supports up to 2^{n_max} need {total} quadrature nodes"
        )));
    }
    let mut value: f64 = 0.0;
    let mut seg_max: Vec<(f64, f64)> = Vec::with_capacity(segments.len());
    for (a, b) in segments {
        let n = (((b - a) / step).ceil() as usize).max(2).next_multiple_of(2);
        let h = (b - a) / n as f64;
        let integrand: Vec<f64> = (0..=n)
            .into_par_iter()
            .map(|i| {
                let y = [a + i as f64 * h];
                let ap = coef.per.entry(0, 0, &y);
                let full = coef.eval(&y)[0][0];
                1.0 / ap - 1.0 / full
            })
            .collect();
        let cum = cumulative_simpson(&integrand, h);
        let mut m: f64 = value.abs();
        for c in &cum {
            m = m.max((value - a_star * c).abs());
        }
        value -= a_star * cum[n];
        seg_max.push((b, m));
    }
    let rows: Vec<GrowthRow1D> = (0..=n_max)
        .map(|n| {
            let end = 2f64.powi(n as i32);
            let sup = seg_max
                .iter()
                .filter(|(b, _)| *b <= end + 1e-12)
                .map(|(_, m)| *m)
                .fold(0.0, f64::max);
            GrowthRow1D { n, sup_abs: sup }
        })
        .collect();
    let x: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.sup_abs).collect();
    Ok(CorrectorGrowth1D {
        fit: fit_line(&x, &y),
        rows,
    })
}
