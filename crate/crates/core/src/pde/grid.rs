//! Uniform node grids on cubes and scalar node fields.
//!
//! A grid with `n` intervals per axis has `N = n` nodes per axis when
//! periodic and `N = n + 1` (boundary included) under homogeneous Dirichlet
//! conditions. Arrays always cover all `N^d` nodes in row-major order, last
//! axis fastest; Dirichlet boundary entries are kept at zero.

use serde::{Deserialize, Serialize};

use crate::coefficients::SampleLattice;
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bc {
    Dirichlet,
    Periodic,
}

impl Bc {
    pub fn code(self) -> u32 {
        match self {
            Bc::Dirichlet => 0,
            Bc::Periodic => 1,
        }
    }

    pub fn from_code(c: u32) -> Option<Self> {
        match c {
            0 => Some(Bc::Dirichlet),
            1 => Some(Bc::Periodic),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformGrid {
    pub dim: usize,
    /// Intervals per axis.
    pub n: usize,
    pub lo: f64,
    pub hi: f64,
    pub bc: Bc,
}

impl UniformGrid {
    pub fn new(dim: usize, n: usize, lo: f64, hi: f64, bc: Bc) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::InvalidConfig(format!("grid dimension must be 1..=3, got {dim}")));
        }
        if n < 4 {
            return Err(Error::InvalidConfig(format!(
                "grid needs at least 4 intervals per axis, got {n}"
            )));
        }
        if !(hi > lo) {
            return Err(Error::InvalidConfig(format!("empty grid box [{lo}, {hi}]")));
        }
        Ok(Self { dim, n, lo, hi, bc })
    }

    pub(crate) fn coarse_unchecked(&self) -> Self {
        Self {
            n: self.n / 2,
            ..self.clone()
        }
    }

    pub fn h(&self) -> f64 {
        (self.hi - self.lo) / self.n as f64
    }

    /// Nodes per axis.
    pub fn nodes_per_axis(&self) -> usize {
        match self.bc {
            Bc::Periodic => self.n,
            Bc::Dirichlet => self.n + 1,
        }
    }

    /// Total number of stored nodes `N^d`.
    pub fn len(&self) -> usize {
        self.nodes_per_axis().pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of free unknowns.
    pub fn unknowns(&self) -> usize {
        match self.bc {
            Bc::Periodic => self.len(),
            Bc::Dirichlet => (self.n - 1).pow(self.dim as u32),
        }
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.nodes_per_axis().pow((self.dim - 1 - axis) as u32)
    }

    pub fn coords(&self, mut flat: usize) -> [usize; 3] {
        let nn = self.nodes_per_axis();
        let mut c = [0; 3];
        for k in (0..self.dim).rev() {
            c[k] = flat % nn;
            flat /= nn;
        }
        c
    }

    pub fn flat(&self, c: &[usize]) -> usize {
        let nn = self.nodes_per_axis();
        c.iter().take(self.dim).fold(0, |acc, &v| acc * nn + v)
    }

    /// Position of node `flat`.
    pub fn node(&self, flat: usize) -> Vec<f64> {
        let c = self.coords(flat);
        let h = self.h();
        (0..self.dim).map(|k| self.lo + h * c[k] as f64).collect()
    }

    /// Whether node `flat` is a free unknown.
    pub fn is_active(&self, flat: usize) -> bool {
        match self.bc {
            Bc::Periodic => true,
            Bc::Dirichlet => {
                let c = self.coords(flat);
                (0..self.dim).all(|k| c[k] >= 1 && c[k] < self.n)
            }
        }
    }

    /// Neighbour of `flat` one step along `axis` in direction `dir` (±1),
    /// wrapping when periodic.
    #[inline]
    pub fn neighbor(&self, flat: usize, axis: usize, dir: isize) -> Option<usize> {
        let nn = self.nodes_per_axis();
        let s = self.stride(axis);
        let c = (flat / s) % nn;
        let t = c as isize + dir;
        if t >= 0 && (t as usize) < nn {
            Some((flat as isize + dir * s as isize) as usize)
        } else if self.bc == Bc::Periodic {
            let w = t.rem_euclid(nn as isize) as usize;
            Some(flat - c * s + w * s)
        } else {
            None
        }
    }

    /// Grid on the same box with half as many intervals, if `n` is even.
    pub fn coarsen(&self) -> Option<Self> {
        if !self.n.is_multiple_of(2) || self.n / 2 < 2 {
            return None;
        }
        Some(self.coarse_unchecked())
    }

    fn lattice(&self, shift: [f64; 3]) -> SampleLattice {
        let h = self.h();
        SampleLattice {
            lo: (0..self.dim).map(|k| self.lo + shift[k] * h).collect(),
            h,
            counts: vec![self.nodes_per_axis(); self.dim],
        }
    }

    pub fn node_lattice(&self) -> SampleLattice {
        self.lattice([0.0; 3])
    }

    /// Midpoints of the faces `(i, i + e_axis)`, indexed by `i`.
    pub fn face_lattice(&self, axis: usize) -> SampleLattice {
        let mut s = [0.0; 3];
        s[axis] = 0.5;
        self.lattice(s)
    }

    /// Centres of the cells `[i, i + 1]`, indexed by their lowest corner `i`.
    pub fn cell_lattice(&self) -> SampleLattice {
        self.lattice([0.5; 3])
    }

    /// Whether face `(flat, flat + e_axis)` exists.
    #[inline]
    pub fn face_valid(&self, flat: usize, axis: usize) -> bool {
        match self.bc {
            Bc::Periodic => true,
            Bc::Dirichlet => (flat / self.stride(axis)) % self.nodes_per_axis() < self.n,
        }
    }

    /// Whether the cell with lowest corner `flat` exists.
    #[inline]
    pub fn cell_valid(&self, flat: usize) -> bool {
        match self.bc {
            Bc::Periodic => true,
            Bc::Dirichlet => {
                let c = self.coords(flat);
                (0..self.dim).all(|k| c[k] < self.n)
            }
        }
    }

    pub fn bounding_box(&self) -> BoundingBox {
        BoundingBox {
            lo: vec![self.lo; self.dim],
            hi: vec![self.hi; self.dim],
        }
    }

    /// Node index ranges `[a, b]` per axis covering `sub`, which must be
    /// aligned with the grid.
    pub fn aligned_range(&self, sub: &BoundingBox) -> Result<Vec<(usize, usize)>> {
        if sub.lo.len() != self.dim || sub.hi.len() != self.dim {
            return Err(Error::GridMismatch("sub-box dimension differs from grid".into()));
        }
        let h = self.h();
        let last = match self.bc {
            Bc::Periodic => self.n - 1,
            Bc::Dirichlet => self.n,
        };
        let snap = |v: f64| -> Result<usize> {
            let t = (v - self.lo) / h;
            let r = t.round();
            if (t - r).abs() > 1e-8 || r < 0.0 || r as usize > self.n {
                return Err(Error::GridMismatch(format!(
                    "sub-box bound {v} is not a node of the grid (h = {h})"
                )));
            }
            Ok(r as usize)
        };
        (0..self.dim)
            .map(|k| {
                let a = snap(sub.lo[k])?;
                let b = snap(sub.hi[k])?.min(last);
                if b < a {
                    return Err(Error::GridMismatch("empty sub-box".into()));
                }
                Ok((a, b))
            })
            .collect()
    }
}

/// Scalar values at all nodes of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub grid: UniformGrid,
    pub values: Vec<f64>,
}

impl GridField {
    pub fn zeros(grid: &UniformGrid) -> Self {
        Self {
            values: vec![0.0; grid.len()],
            grid: grid.clone(),
        }
    }

    pub fn new(grid: &UniformGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "field has {} values, grid has {} nodes",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self {
            grid: grid.clone(),
            values,
        })
    }

    /// Samples `f` at the nodes; Dirichlet boundary nodes are set to zero.
    pub fn from_fn<F: Fn(&[f64]) -> f64 + Sync>(grid: &UniformGrid, f: F) -> Self {
        use rayon::prelude::*;
        let values = (0..grid.len())
            .into_par_iter()
            .map(|i| if grid.is_active(i) { f(&grid.node(i)) } else { 0.0 })
            .collect();
        Self {
            grid: grid.clone(),
            values,
        }
    }

    pub fn mean(&self) -> f64 {
        crate::numeric::det_sum(&self.values) / self.values.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Multilinear interpolation at `x` (periodic wrap; zero outside a
    /// Dirichlet box).
    pub fn interpolate(&self, x: &[f64]) -> f64 {
        let g = &self.grid;
        let h = g.h();
        let nn = g.nodes_per_axis();
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for k in 0..g.dim {
            let t = (x[k] - g.lo) / h;
            match g.bc {
                Bc::Periodic => {
                    let t = t.rem_euclid(g.n as f64);
                    let i = (t.floor() as usize).min(g.n - 1);
                    base[k] = i;
                    frac[k] = t - i as f64;
                }
                Bc::Dirichlet => {
                    if !(0.0..=g.n as f64).contains(&t) {
                        return 0.0;
                    }
                    let i = (t.floor() as usize).min(g.n - 1);
                    base[k] = i;
                    frac[k] = t - i as f64;
                }
            }
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << g.dim) {
            let mut w = 1.0;
            let mut flat = 0usize;
            for k in 0..g.dim {
                let bit = (corner >> k) & 1;
                let mut i = base[k] + bit;
                if i >= nn {
                    i -= nn;
                }
                w *= if bit == 1 { frac[k] } else { 1.0 - frac[k] };
                flat = flat * nn + i;
            }
            if w != 0.0 {
                acc += w * self.values[flat];
            }
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn periodic_neighbors_wrap() {
        let g = UniformGrid::new(2, 4, 0.0, 1.0, Bc::Periodic).unwrap();
        let f = g.flat(&[0, 3]);
        assert_eq!(g.neighbor(f, 1, 1), Some(g.flat(&[0, 0])));
        assert_eq!(g.neighbor(f, 0, -1), Some(g.flat(&[3, 3])));
    }

    #[test]
    fn dirichlet_counts() {
        let g = UniformGrid::new(3, 4, 0.0, 1.0, Bc::Dirichlet).unwrap();
        assert_eq!(g.len(), 125);
        assert_eq!(g.unknowns(), 27);
        assert_eq!((0..g.len()).filter(|&i| g.is_active(i)).count(), 27);
        assert_eq!(g.neighbor(g.flat(&[0, 2, 2]), 0, -1), None);
    }

    #[test]
    fn interpolation_reproduces_bilinear() {
        let g = UniformGrid::new(2, 8, -1.0, 1.0, Bc::Periodic).unwrap();
        let f = GridField {
            values: (0..g.len())
                .map(|i| {
                    let x = g.node(i);
                    1.0 + 2.0 * x[0] - x[1] + 0.5 * x[0] * x[1]
                })
                .collect(),
            grid: g,
        };
        let x = [0.13, -0.41];
        let exact = 1.0 + 2.0 * x[0] - x[1] + 0.5 * x[0] * x[1];
        assert!((f.interpolate(&x) - exact).abs() < 1e-12);
    }

    #[test]
    fn aligned_ranges() {
        let g = UniformGrid::new(2, 8, 0.0, 1.0, Bc::Dirichlet).unwrap();
        let sub = BoundingBox {
            lo: vec![0.25, 0.25],
            hi: vec![0.75, 0.75],
        };
        assert_eq!(g.aligned_range(&sub).unwrap(), vec![(2, 6), (2, 6)]);
        let bad = BoundingBox {
            lo: vec![0.2, 0.25],
            hi: vec![0.75, 0.75],
        };
        assert!(g.aligned_range(&bad).is_err());
    }
}
