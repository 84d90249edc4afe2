//! Conservative discretisation of `-div(a ∇u)`.
//!
//! The discrete energy is
//!
//! ```text
//! E(u, v) = Σ_faces a_kk (D_k u)(D_k v) + Σ_cells Σ_{i≠j} a_ij (G_i u)(G_j v)
//! ```
//!
//! where `D_k` is the face difference along axis `k` (divided by `h`) with
//! `a_kk` sampled at the face midpoint, and `G_i` is the cell-averaged
//! difference along axis `i` with `a_ij` sampled at the cell centre. The
//! operator is `A = D^T K D + G^T K_off G` and the divergence of a discrete
//! flux `g = (g_faces, g_cells)` is `-(D^T g_faces + G^T g_cells)`, so
//! summation by parts holds identically.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::csr::Csr;
use super::grid::{Bc, GridField, UniformGrid};
use crate::coefficients::{min_eigenvalue, Coefficient};
use crate::error::{Error, Result};
use crate::numeric::det_sum_by;
use crate::sampling;

/// Index pairs `(i, j)`, `i < j`, of the off-diagonal entries.
pub fn offdiag_pairs(d: usize) -> &'static [(usize, usize)] {
    match d {
        1 => &[],
        2 => &[(0, 1)],
        _ => &[(0, 1), (0, 2), (1, 2)],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssemblyMeta {
    /// SHA-256 of the sampled coefficient arrays.
    pub coefficient_hash: String,
    pub bc: Bc,
    pub h: f64,
    pub diagonal: bool,
}

/// Assembled (matrix-free) symmetric operator with its coefficient samples.
#[derive(Debug, Clone)]
pub struct DivFormSystem {
    pub grid: UniformGrid,
    /// `a_kk` at the midpoint of face `(i, i + e_k)`, stored at `i`.
    pub face_coef: Vec<Vec<f64>>,
    /// `a_ij` for the pairs of [`offdiag_pairs`] at cell centres.
    pub cell_coef: Option<Vec<Vec<f64>>>,
    pub meta: AssemblyMeta,
}

/// Discrete flux: face components plus optional cell-centred components
/// paired with the mixed stencil.
#[derive(Debug, Clone, PartialEq)]
pub struct FluxField {
    pub faces: Vec<Vec<f64>>,
    pub cells: Option<Vec<Vec<f64>>>,
}

impl FluxField {
    pub fn zeros(grid: &UniformGrid, with_cells: bool) -> Self {
        Self {
            faces: vec![vec![0.0; grid.len()]; grid.dim],
            cells: with_cells.then(|| vec![vec![0.0; grid.len()]; grid.dim]),
        }
    }

    /// Constant vector field `c` at every face (and cell).
    pub fn constant(grid: &UniformGrid, c: &[f64], with_cells: bool) -> Self {
        let mut f = Self::zeros(grid, with_cells);
        for k in 0..grid.dim {
            f.faces[k].iter_mut().for_each(|v| *v = c[k]);
        }
        f
    }
}

/// Samples the coefficient on the face and cell lattices of `grid`.
pub fn assemble_divform<C: Coefficient + ?Sized>(coef: &C, grid: &UniformGrid) -> Result<DivFormSystem> {
    let d = grid.dim;
    if coef.dim() != d {
        return Err(Error::GridMismatch(format!(
            "coefficient dimension {} differs from grid dimension {d}",
            coef.dim()
        )));
    }
    if grid.bc == Bc::Periodic {
        check_box_periodic(coef, grid)?;
    }
    let mut face_coef = Vec::with_capacity(d);
    for k in 0..d {
        let lat = grid.face_lattice(k);
        let vals = coef.sample_entry(&lat, k, k);
        if let Some(bad) = (0..vals.len()).find(|&i| grid.face_valid(i, k) && !(vals[i] > 0.0)) {
            return Err(Error::Ellipticity {
                eigenvalue: vals[bad],
                floor: 0.0,
                at: lat.point(bad),
            });
        }
        face_coef.push(vals);
    }
    let diagonal = coef.is_diagonal() || d == 1;
    let cell_coef = if diagonal {
        None
    } else {
        let lat = grid.cell_lattice();
        let arrays: Vec<Vec<f64>> = offdiag_pairs(d)
            .iter()
            .map(|&(i, j)| coef.sample_entry(&lat, i, j))
            .collect();
        // full-tensor ellipticity at cell centres
        let bad = (0..grid.len()).into_par_iter().find_first(|&c| {
            if !grid.cell_valid(c) {
                return false;
            }
            let x = lat.point(c);
            min_eigenvalue(&coef.eval(&x), d) <= 0.0
        });
        if let Some(c) = bad {
            let x = lat.point(c);
            return Err(Error::Ellipticity {
                eigenvalue: min_eigenvalue(&coef.eval(&x), d),
                floor: 0.0,
                at: x,
            });
        }
        Some(arrays)
    };
    let mut hasher = Sha256::new();
    for a in face_coef.iter().chain(cell_coef.iter().flatten()) {
        for v in a {
            hasher.update(v.to_le_bytes());
        }
    }
    let coefficient_hash = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
    Ok(DivFormSystem {
        meta: AssemblyMeta {
            coefficient_hash,
            bc: grid.bc,
            h: grid.h(),
            diagonal,
        },
        grid: grid.clone(),
        face_coef,
        cell_coef,
    })
}

fn check_box_periodic<C: Coefficient + ?Sized>(coef: &C, grid: &UniformGrid) -> Result<()> {
    let d = grid.dim;
    let len = grid.hi - grid.lo;
    let pts = sampling::box_points(&vec![grid.lo; d], &vec![grid.hi; d], 32);
    for x in pts {
        let a = coef.eval(&x);
        for k in 0..d {
            let mut y = x.clone();
            y[k] += len;
            let b = coef.eval(&y);
            for i in 0..d {
                for j in 0..d {
                    if (a[i][j] - b[i][j]).abs() > 1e-10 * (1.0 + a[i][j].abs()) {
                        return Err(Error::GridMismatch(format!(
                            "coefficient is not periodic with respect to the box [{}, {}]",
                            grid.lo, grid.hi
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}

impl DivFormSystem {
    pub fn dim(&self) -> usize {
        self.grid.dim
    }

    fn inv_h2(&self) -> f64 {
        let h = self.grid.h();
        1.0 / (h * h)
    }

    /// Differences of `u` across every cell along each axis, averaged over
    /// the cell (the `G_i u` of the module docs), for valid cells.
    fn cell_gradients(&self, u: &[f64]) -> Vec<Vec<f64>> {
        let g = &self.grid;
        let d = g.dim;
        let scale = 1.0 / ((1usize << (d - 1)) as f64 * g.h());
        (0..d)
            .map(|i| {
                (0..g.len())
                    .into_par_iter()
                    .map(|c| {
                        if !g.cell_valid(c) {
                            return 0.0;
                        }
                        let mut acc = 0.0;
                        for b in 0..(1usize << d) {
                            if (b >> i) & 1 == 1 {
                                continue;
                            }
                            let lo = corner(g, c, b);
                            let hi = corner(g, c, b | (1 << i));
                            acc += u[hi] - u[lo];
                        }
                        acc * scale
                    })
                    .collect()
            })
            .collect()
    }

    /// Applies `G^T` to cell vectors `q` (one per axis), accumulating into `out`
    /// at active nodes.
    fn apply_gt(&self, q: &[Vec<f64>], out: &mut [f64]) {
        let g = &self.grid;
        let d = g.dim;
        let scale = 1.0 / ((1usize << (d - 1)) as f64 * g.h());
        out.par_iter_mut().enumerate().for_each(|(m, o)| {
            if !g.is_active(m) {
                return;
            }
            let mut acc = 0.0;
            for b in 0..(1usize << d) {
                // cell whose corner b is node m
                let Some(c) = corner_back(g, m, b) else { continue };
                if !g.cell_valid(c) {
                    continue;
                }
                for (i, qi) in q.iter().enumerate() {
                    let s = if (b >> i) & 1 == 1 { 1.0 } else { -1.0 };
                    acc += s * qi[c];
                }
            }
            *o += acc * scale;
        });
    }

    /// `y = A u` (inactive entries of `y` are zero).
    pub fn apply(&self, u: &[f64], y: &mut [f64]) {
        let g = &self.grid;
        let d = g.dim;
        let ih2 = self.inv_h2();
        y.par_iter_mut().enumerate().for_each(|(m, out)| {
            if !g.is_active(m) {
                *out = 0.0;
                return;
            }
            let um = u[m];
            let mut acc = 0.0;
            for k in 0..d {
                let f = &self.face_coef[k];
                let up = g.neighbor(m, k, 1).expect("active node has neighbours");
                let dn = g.neighbor(m, k, -1).expect("active node has neighbours");
                acc += f[m] * (um - u[up]) + f[dn] * (um - u[dn]);
            }
            *out = acc * ih2;
        });
        if let Some(cc) = &self.cell_coef {
            let grads = self.cell_gradients(u);
            let q = self.mix(cc, &grads, None);
            self.apply_gt(&q, y);
        }
    }

    /// `q_i = Σ_{j≠i} a_ij (grad_j + δ_{j,shift})` at cells.
    fn mix(&self, cc: &[Vec<f64>], grads: &[Vec<f64>], shift: Option<usize>) -> Vec<Vec<f64>> {
        let g = &self.grid;
        let d = g.dim;
        let pairs = offdiag_pairs(d);
        (0..d)
            .map(|i| {
                (0..g.len())
                    .into_par_iter()
                    .map(|c| {
                        if !g.cell_valid(c) {
                            return 0.0;
                        }
                        let mut acc = 0.0;
                        for (p, &(a, b)) in pairs.iter().enumerate() {
                            let j = if a == i {
                                b
                            } else if b == i {
                                a
                            } else {
                                continue;
                            };
                            let gj = grads[j][c] + if shift == Some(j) { 1.0 } else { 0.0 };
                            acc += cc[p][c] * gj;
                        }
                        acc
                    })
                    .collect()
            })
            .collect()
    }

    /// Diagonal of `A` (1 at inactive nodes).
    pub fn diagonal(&self) -> Vec<f64> {
        let g = &self.grid;
        let d = g.dim;
        let ih2 = self.inv_h2();
        let mut diag: Vec<f64> = (0..g.len())
            .into_par_iter()
            .map(|m| {
                if !g.is_active(m) {
                    return 1.0;
                }
                let mut acc = 0.0;
                for k in 0..d {
                    let dn = g.neighbor(m, k, -1).expect("active node has neighbours");
                    acc += self.face_coef[k][m] + self.face_coef[k][dn];
                }
                acc * ih2
            })
            .collect();
        if let Some(cc) = &self.cell_coef {
            let scale = 1.0 / ((1usize << (d - 1)) as f64 * g.h());
            let pairs = offdiag_pairs(d);
            diag.par_iter_mut().enumerate().for_each(|(m, v)| {
                if !g.is_active(m) {
                    return;
                }
                let mut acc = 0.0;
                for b in 0..(1usize << d) {
                    let Some(c) = corner_back(g, m, b) else { continue };
                    if !g.cell_valid(c) {
                        continue;
                    }
                    for (p, &(i, j)) in pairs.iter().enumerate() {
                        let si = if (b >> i) & 1 == 1 { 1.0 } else { -1.0 };
                        let sj = if (b >> j) & 1 == 1 { 1.0 } else { -1.0 };
                        acc += 2.0 * cc[p][c] * si * sj;
                    }
                }
                *v += acc * scale * scale;
            });
        }
        diag
    }

    /// Discrete flux `a (e_shift + ∇u)` (`shift = None` gives `a ∇u`).
    pub fn flux(&self, u: &[f64], shift: Option<usize>) -> FluxField {
        let g = &self.grid;
        let d = g.dim;
        let h = g.h();
        let faces = (0..d)
            .map(|k| {
                let f = &self.face_coef[k];
                (0..g.len())
                    .into_par_iter()
                    .map(|i| {
                        if !g.face_valid(i, k) {
                            return 0.0;
                        }
                        let j = g.neighbor(i, k, 1).expect("valid face has an upper node");
                        let grad = (u[j] - u[i]) / h + if shift == Some(k) { 1.0 } else { 0.0 };
                        f[i] * grad
                    })
                    .collect()
            })
            .collect();
        let cells = self.cell_coef.as_ref().map(|cc| {
            let grads = self.cell_gradients(u);
            self.mix(cc, &grads, shift)
        });
        FluxField { faces, cells }
    }

    /// `-(D^T g_faces + G^T g_cells)` at active nodes.
    pub fn rhs_div(&self, flux: &FluxField) -> Vec<f64> {
        rhs_div(&self.grid, flux)
    }

    /// `u^T A v` with deterministic reduction.
    pub fn energy(&self, u: &[f64], v: &[f64]) -> f64 {
        let mut au = vec![0.0; u.len()];
        self.apply(u, &mut au);
        crate::numeric::det_dot(&au, v)
    }

    /// `Σ_faces (D_k u)^2`, the discrete squared gradient paired with the energy.
    pub fn gradient_energy(&self, u: &[f64]) -> f64 {
        let g = &self.grid;
        let h = g.h();
        (0..g.dim)
            .map(|k| {
                det_sum_by(g.len(), |i| {
                    if !g.face_valid(i, k) {
                        return 0.0;
                    }
                    let j = g.neighbor(i, k, 1).expect("valid face has an upper node");
                    ((u[j] - u[i]) / h).powi(2)
                })
            })
            .sum()
    }

    /// Explicit matrix over the active unknowns (row-major order of active
    /// nodes). Transposed entries are bitwise equal by construction.
    pub fn to_csr(&self) -> (Csr, Vec<usize>) {
        let g = &self.grid;
        let d = g.dim;
        let active: Vec<usize> = (0..g.len()).filter(|&i| g.is_active(i)).collect();
        let mut compact = vec![usize::MAX; g.len()];
        for (k, &i) in active.iter().enumerate() {
            compact[i] = k;
        }
        let ih2 = self.inv_h2();
        let mut trip: Vec<(usize, usize, f64)> = Vec::new();
        // face couplings, one symmetric pair per face
        for k in 0..d {
            for i in 0..g.len() {
                if !g.face_valid(i, k) {
                    continue;
                }
                let j = g.neighbor(i, k, 1).expect("valid face has an upper node");
                let w = self.face_coef[k][i] * ih2;
                let (ci, cj) = (compact[i], compact[j]);
                if ci != usize::MAX {
                    trip.push((ci, ci, w));
                }
                if cj != usize::MAX {
                    trip.push((cj, cj, w));
                }
                if ci != usize::MAX && cj != usize::MAX {
                    trip.push((ci, cj, -w));
                    trip.push((cj, ci, -w));
                }
            }
        }
        if let Some(cc) = &self.cell_coef {
            let scale = 1.0 / ((1usize << (d - 1)) as f64 * g.h());
            let pairs = offdiag_pairs(d);
            let nc = 1usize << d;
            for c in 0..g.len() {
                if !g.cell_valid(c) {
                    continue;
                }
                let nodes: Vec<usize> = (0..nc).map(|b| corner(g, c, b)).collect();
                for ba in 0..nc {
                    for bb in ba..nc {
                        let (ma, mb) = (compact[nodes[ba]], compact[nodes[bb]]);
                        if ma == usize::MAX || mb == usize::MAX {
                            continue;
                        }
                        let sgn = |b: usize, i: usize| if (b >> i) & 1 == 1 { 1.0 } else { -1.0 };
                        let mut v = 0.0;
                        for (p, &(i, j)) in pairs.iter().enumerate() {
                            v += cc[p][c] * (sgn(ba, i) * sgn(bb, j) + sgn(ba, j) * sgn(bb, i));
                        }
                        let v = v * scale * scale;
                        if ba == bb {
                            trip.push((ma, ma, v));
                        } else {
                            trip.push((ma, mb, v));
                            trip.push((mb, ma, v));
                        }
                    }
                }
            }
        }
        (Csr::from_triplets(active.len(), trip), active)
    }
}

/// Node reached from cell `c` by the corner offsets `bits`.
#[inline]
fn corner(g: &UniformGrid, c: usize, bits: usize) -> usize {
    let mut m = c;
    for k in 0..g.dim {
        if (bits >> k) & 1 == 1 {
            m = g.neighbor(m, k, 1).expect("cell corners exist");
        }
    }
    m
}

/// Cell whose corner `bits` is node `m`.
#[inline]
fn corner_back(g: &UniformGrid, m: usize, bits: usize) -> Option<usize> {
    let mut c = m;
    for k in 0..g.dim {
        if (bits >> k) & 1 == 1 {
            c = g.neighbor(c, k, -1)?;
        }
    }
    Some(c)
}

/// `-(D^T g_faces + G^T g_cells)` at the active nodes of `grid`.
pub fn rhs_div(grid: &UniformGrid, flux: &FluxField) -> Vec<f64> {
    let g = grid;
    let d = g.dim;
    let h = g.h();
    let mut out: Vec<f64> = (0..g.len())
        .into_par_iter()
        .map(|m| {
            if !g.is_active(m) {
                return 0.0;
            }
            let mut acc = 0.0;
            for k in 0..d {
                let dn = g.neighbor(m, k, -1).expect("active node has neighbours");
                acc += flux.faces[k][m] - flux.faces[k][dn];
            }
            acc / h
        })
        .collect();
    if let Some(cells) = &flux.cells {
        let scale = 1.0 / ((1usize << (d - 1)) as f64 * h);
        out.par_iter_mut().enumerate().for_each(|(m, o)| {
            if !g.is_active(m) {
                return;
            }
            let mut acc = 0.0;
            for b in 0..(1usize << d) {
                let Some(c) = corner_back(g, m, b) else { continue };
                if !g.cell_valid(c) {
                    continue;
                }
                for (i, qi) in cells.iter().enumerate() {
                    let s = if (b >> i) & 1 == 1 { 1.0 } else { -1.0 };
                    acc += s * qi[c];
                }
            }
            *o -= acc * scale;
        });
    }
    out
}

/// Face-difference gradient `D_k φ` of a node field, as a face flux.
pub fn face_gradient(field: &GridField) -> FluxField {
    let g = &field.grid;
    let h = g.h();
    let faces = (0..g.dim)
        .map(|k| {
            (0..g.len())
                .map(|i| {
                    if !g.face_valid(i, k) {
                        return 0.0;
                    }
                    let j = g.neighbor(i, k, 1).expect("valid face has an upper node");
                    (field.values[j] - field.values[i]) / h
                })
                .collect()
        })
        .collect();
    FluxField { faces, cells: None }
}
