//! Discrete Fourier diagonalisation of periodic finite-difference operators.

use num_complex::Complex64;
use rustfft::FftPlanner;

use super::grid::{Bc, GridField, UniformGrid};
use crate::error::{Error, Result};

/// In-place `d`-dimensional FFT over a row-major array with equal extents
/// `n` per axis. The inverse transform is normalised by `1 / n^d`.
pub fn fft_nd(data: &mut [Complex64], dim: usize, n: usize, inverse: bool) {
    assert_eq!(data.len(), n.pow(dim as u32), "array does not match n^d");
    let mut planner = FftPlanner::new();
    let fft = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    let mut line = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for axis in 0..dim {
        let stride = n.pow((dim - 1 - axis) as u32);
        let outer = data.len() / n;
        for o in 0..outer {
            // base index with the axis coordinate set to zero
            let hi = o / stride;
            let lo = o % stride;
            let base = hi * stride * n + lo;
            for (k, v) in line.iter_mut().enumerate() {
                *v = data[base + k * stride];
            }
            fft.process_with_scratch(&mut line, &mut scratch);
            for (k, v) in line.iter().enumerate() {
                data[base + k * stride] = *v;
            }
        }
    }
    if inverse {
        let s = 1.0 / data.len() as f64;
        data.iter_mut().for_each(|v| *v *= s);
    }
}

/// Integer wave numbers `m_k` of a flat spectral index.
pub fn wave_numbers(dim: usize, n: usize, mut flat: usize) -> [usize; 3] {
    let mut m = [0; 3];
    for k in (0..dim).rev() {
        m[k] = flat % n;
        flat /= n;
    }
    m
}

/// Symbol `Σ_k 4 sin^2(π m_k / n) / h^2` of the negative 5/7-point Laplacian.
pub fn laplacian_symbol(grid: &UniformGrid, m: &[usize]) -> f64 {
    let h = grid.h();
    m.iter()
        .take(grid.dim)
        .map(|&mk| 4.0 * (std::f64::consts::PI * mk as f64 / grid.n as f64).sin().powi(2))
        .sum::<f64>()
        / (h * h)
}

/// Exact discrete inverse of the negative FD Laplacian on a periodic grid.
/// The right-hand side is projected to mean zero; the output has mean zero.
pub fn poisson_periodic_spectral(rhs: &GridField) -> Result<GridField> {
    let g = &rhs.grid;
    if g.bc != Bc::Periodic {
        return Err(Error::GridMismatch(
            "spectral Poisson solve needs a periodic grid".into(),
        ));
    }
    let mut data: Vec<Complex64> = rhs.values.iter().map(|v| Complex64::new(*v, 0.0)).collect();
    fft_nd(&mut data, g.dim, g.n, false);
    for (flat, v) in data.iter_mut().enumerate() {
        let m = wave_numbers(g.dim, g.n, flat);
        let s = laplacian_symbol(g, &m);
        *v = if flat == 0 { Complex64::new(0.0, 0.0) } else { *v / s };
    }
    fft_nd(&mut data, g.dim, g.n, true);
    GridField::new(g, data.into_iter().map(|c| c.re).collect())
}
