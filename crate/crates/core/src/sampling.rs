//! Deterministic low-discrepancy sampling (no RNG anywhere).

use std::f64::consts::PI;

const PRIMES: [u64; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

/// Van der Corput radical inverse of `i` in base `b`.
pub fn radical_inverse(mut i: u64, b: u64) -> f64 {
    let inv = 1.0 / b as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % b) as f64;
        i /= b;
        f *= inv;
    }
    r
}

/// The `i`-th Halton point in `[0, 1)^dim` (index shifted by one to skip the origin).
pub fn halton(i: u64, dim: usize) -> Vec<f64> {
    assert!(dim <= PRIMES.len(), "Halton sampling supports up to 8 dimensions");
    (0..dim).map(|k| radical_inverse(i + 1, PRIMES[k])).collect()
}

/// `count` Halton points mapped into the axis-aligned box `[lo, hi]`.
pub fn box_points(lo: &[f64], hi: &[f64], count: usize) -> Vec<Vec<f64>> {
    let d = lo.len();
    (0..count as u64)
        .map(|i| {
            halton(i, d)
                .iter()
                .enumerate()
                .map(|(k, u)| lo[k] + u * (hi[k] - lo[k]))
                .collect()
        })
        .collect()
}

/// Roughly `count` Halton points inside the closed ball `B_radius(center)`
/// (rejection from the enclosing cube; deterministic).
pub fn ball_points(center: &[f64], radius: f64, count: usize) -> Vec<Vec<f64>> {
    let d = center.len();
    let mut out = Vec::with_capacity(count);
    let mut i = 0u64;
    let cap = (count as u64).saturating_mul(8).max(64);
    while out.len() < count && i < cap {
        let u = halton(i, d);
        i += 1;
        let z: Vec<f64> = u.iter().map(|v| 2.0 * v - 1.0).collect();
        if z.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
            out.push(center.iter().zip(&z).map(|(c, v)| c + radius * v).collect());
        }
    }
    out
}

/// Points on the sphere `|x - center| = radius`: both endpoints in 1D,
/// equispaced angles in 2D, a Fibonacci lattice in 3D, normalised Halton
/// directions otherwise.
pub fn sphere_points(center: &[f64], radius: f64, count: usize) -> Vec<Vec<f64>> {
    let d = center.len();
    let dirs: Vec<Vec<f64>> = match d {
        1 => vec![vec![-1.0], vec![1.0]],
        2 => (0..count)
            .map(|k| {
                let t = 2.0 * PI * (k as f64 + 0.5) / count as f64;
                vec![t.cos(), t.sin()]
            })
            .collect(),
        3 => {
            let golden = PI * (3.0 - 5f64.sqrt());
            (0..count)
                .map(|k| {
                    let z = 1.0 - 2.0 * (k as f64 + 0.5) / count as f64;
                    let r = (1.0 - z * z).sqrt();
                    let t = golden * k as f64;
                    vec![r * t.cos(), r * t.sin(), z]
                })
                .collect()
        }
        _ => (0..count as u64)
            .filter_map(|i| {
                let z: Vec<f64> = halton(i, d).iter().map(|v| 2.0 * v - 1.0).collect();
                let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                (n > 1e-9).then(|| z.iter().map(|v| v / n).collect())
            })
            .collect(),
    };
    dirs.into_iter()
        .map(|u| center.iter().zip(&u).map(|(c, v)| c + radius * v).collect())
        .collect()
}
