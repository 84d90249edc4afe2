//! Composite Simpson quadrature on uniform nodes.

/// Composite Simpson rule for samples `f[0..=n]` on a uniform grid of spacing `h`.
/// An odd number of intervals is closed with a 3/8 panel on the last three.
pub fn simpson(f: &[f64], h: f64) -> f64 {
    let n = f.len().saturating_sub(1);
    match n {
        0 => 0.0,
        1 => 0.5 * h * (f[0] + f[1]),
        2 => h / 3.0 * (f[0] + 4.0 * f[1] + f[2]),
        3 => 3.0 * h / 8.0 * (f[0] + 3.0 * f[1] + 3.0 * f[2] + f[3]),
        _ if n.is_multiple_of(2) => {
            let mut odd = 0.0;
            let mut even = 0.0;
            for i in 1..n {
                if i % 2 == 1 {
                    odd += f[i];
                } else {
                    even += f[i];
                }
            }
            h / 3.0 * (f[0] + f[n] + 4.0 * odd + 2.0 * even)
        }
        _ => simpson(&f[..n - 2], h) + simpson(&f[n - 3..], h),
    }
}

/// Composite Simpson rule for `g` on `[a, b]` with `intervals` (rounded up to even) panels.
pub fn simpson_fn<F: Fn(f64) -> f64>(g: F, a: f64, b: f64, intervals: usize) -> f64 {
    let n = intervals.max(2).next_multiple_of(2);
    let h = (b - a) / n as f64;
    let vals: Vec<f64> = (0..=n).map(|i| g(a + i as f64 * h)).collect();
    simpson(&vals, h)
}

/// Running integral `F[i] = ∫_{x_0}^{x_i} f` on uniform nodes: Simpson panels at
/// even nodes, the matching half-panel formula `h/12 (5 f0 + 8 f1 - f2)` at odd nodes.
pub fn cumulative_simpson(f: &[f64], h: f64) -> Vec<f64> {
    let n = f.len();
    let mut out = vec![0.0; n];
    if n < 2 {
        return out;
    }
    if n == 2 {
        out[1] = 0.5 * h * (f[0] + f[1]);
        return out;
    }
    let mut i = 0;
    while i + 2 < n {
        let base = out[i];
        out[i + 1] = base + h / 12.0 * (5.0 * f[i] + 8.0 * f[i + 1] - f[i + 2]);
        out[i + 2] = base + h / 3.0 * (f[i] + 4.0 * f[i + 1] + f[i + 2]);
        i += 2;
    }
    if i + 1 < n {
        // last odd interval: integrate backwards from the three final nodes
        out[i + 1] = out[i] + h / 12.0 * (-f[i - 1] + 8.0 * f[i] + 5.0 * f[i + 1]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_is_exact_for_cubics() {
        let g = |x: f64| 2.0 * x * x * x - x + 0.5;
        let exact = |x: f64| 0.5 * x.powi(4) - 0.5 * x * x + 0.5 * x;
        for n in [2, 3, 4, 5, 8, 9] {
            let h = 2.0 / n as f64;
            let vals: Vec<f64> = (0..=n).map(|i| g(i as f64 * h)).collect();
            assert!((simpson(&vals, h) - (exact(2.0) - exact(0.0))).abs() < 1e-12, "n={n}");
        }
    }

    #[test]
    fn cumulative_matches_antiderivative() {
        let n = 101;
        let h = 1.0 / (n - 1) as f64;
        let vals: Vec<f64> = (0..n).map(|i| (3.0 * i as f64 * h).cos()).collect();
        let cum = cumulative_simpson(&vals, h);
        for (i, c) in cum.iter().enumerate() {
            let x = i as f64 * h;
            assert!((c - (3.0 * x).sin() / 3.0).abs() < 1e-7, "i={i}");
        }
    }

    #[test]
    fn simpson_fn_converges_fourth_order() {
        let e1 = (simpson_fn(f64::exp, 0.0, 1.0, 8) - (1f64.exp() - 1.0)).abs();
        let e2 = (simpson_fn(f64::exp, 0.0, 1.0, 16) - (1f64.exp() - 1.0)).abs();
        assert!((e1 / e2).log2() > 3.8);
    }
}
