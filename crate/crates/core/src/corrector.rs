//! Correctors: the periodic cell problem and `a*`, the perturbed corrector
//! on truncated boxes, the flux matrix `M` with its potential `B`, and
//! growth/decay diagnostics of solved correctors.
//!
//! All box grids share the spacing `1 / cells_per_unit` with the unit cell,
//! so periodic fields tile onto them node for node and integer defect
//! positions are grid translations.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::{Coefficient, PeriodicCoefficient, PerturbedCoefficient, SampleLattice, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, DefectPointSet, LatticeIndex};
use crate::numeric::{det_sum, det_sum_by, fit_line, LineFit};
use crate::pde::operator::offdiag_pairs;
use crate::pde::{
    assemble_divform, face_h1_seminorm, poisson_periodic_spectral, Bc, DivFormSystem, FluxField, GridField,
    SolveReport, Solver, SolverConfig, UniformGrid,
};
use crate::sampling;

/// Periodic grid on the unit cell with `m` intervals per axis.
pub fn cell_grid(dim: usize, m: usize) -> Result<UniformGrid> {
    UniformGrid::new(dim, m, 0.0, 1.0, Bc::Periodic)
}

/// `w_per,e_j` for every direction on the unit cell.
#[derive(Debug, Clone)]
pub struct PeriodicCorrector {
    pub system: DivFormSystem,
    /// Mean-zero fields, one per direction.
    pub fields: Vec<GridField>,
    pub reports: Vec<SolveReport>,
}

impl PeriodicCorrector {
    /// Solves `-div(a_per (e_j + ∇w)) = 0` for all `j` on an `m^d` cell grid.
    pub fn solve(per: &PeriodicCoefficient, m: usize, cfg: &SolverConfig) -> Result<Self> {
        let grid = cell_grid(per.dim, m)?;
        let system = assemble_divform(per, &grid)?;
        let solver = Solver::new(&system, *cfg)?;
        let zero = vec![0.0; grid.len()];
        let solved: Vec<(GridField, SolveReport)> = (0..per.dim)
            .into_par_iter()
            .map(|j| solver.solve(&system.rhs_div(&system.flux(&zero, Some(j)))))
            .collect::<Result<_>>()?;
        let (fields, reports) = solved.into_iter().unzip();
        Ok(Self {
            system,
            fields,
            reports,
        })
    }

    pub fn dim(&self) -> usize {
        self.system.dim()
    }

    pub fn grid(&self) -> &UniformGrid {
        &self.system.grid
    }

    pub fn cells_per_unit(&self) -> usize {
        self.system.grid.n
    }

    /// `(a*)_ij` = cell average of `e_i · a (e_j + ∇w_j)`.
    pub fn homogenized_tensor(&self) -> HomogenizedTensor {
        let d = self.dim();
        let bb = self.grid().bounding_box();
        let mut a = vec![vec![0.0; d]; d];
        for j in 0..d {
            let flux = self.system.flux(&self.fields[j].values, Some(j));
            let avg = flux_average(self.grid(), &flux, &bb);
            for i in 0..d {
                a[i][j] = avg[i];
            }
        }
        HomogenizedTensor { dim: d, a }
    }

    /// `(a*)_ij` from the energy form `∫(e_i + ∇w_i) · a (e_j + ∇w_j)`.
    pub fn energy_tensor(&self) -> HomogenizedTensor {
        let d = self.dim();
        let g = self.grid();
        let n = g.len() as f64;
        let mut a = vec![vec![0.0; d]; d];
        for i in 0..d {
            let fi = self.system.flux(&self.fields[i].values, Some(i));
            for j in 0..d {
                let gj = shifted_gradients(&self.system, &self.fields[j].values, j);
                a[i][j] = pair_flux(&fi, &gj) / n;
            }
        }
        HomogenizedTensor { dim: d, a }
    }

    /// `w_per,e_j` tiled onto an aligned grid.
    pub fn tiled(&self, j: usize, target: &UniformGrid) -> Result<GridField> {
        sample_aligned(&self.fields[j], target)
    }
}

/// Face and cell gradients of `u` plus `e_shift`, laid out like a flux.
fn shifted_gradients(sys: &DivFormSystem, u: &[f64], shift: usize) -> FluxField {
    let g = &sys.grid;
    let h = g.h();
    let faces = (0..g.dim)
        .map(|k| {
            (0..g.len())
                .map(|i| match g.neighbor(i, k, 1) {
                    Some(j) if g.face_valid(i, k) => (u[j] - u[i]) / h + if k == shift { 1.0 } else { 0.0 },
                    _ => 0.0,
                })
                .collect()
        })
        .collect();
    let cells = sys.cell_coef.as_ref().map(|_| {
        let d = g.dim;
        let scale = 1.0 / ((1usize << (d - 1)) as f64 * h);
        (0..d)
            .map(|i| {
                (0..g.len())
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
                        acc * scale + if i == shift { 1.0 } else { 0.0 }
                    })
                    .collect()
            })
            .collect()
    });
    FluxField { faces, cells }
}

fn corner(g: &UniformGrid, c: usize, bits: usize) -> usize {
    let mut m = c;
    for k in 0..g.dim {
        if (bits >> k) & 1 == 1 {
            m = g.neighbor(m, k, 1).expect("valid cell has all corners");
        }
    }
    m
}

/// `Σ faces f·g + Σ cells f·g` pairing a flux with a shifted gradient.
fn pair_flux(f: &FluxField, g: &FluxField) -> f64 {
    let mut total: f64 = f
        .faces
        .iter()
        .zip(&g.faces)
        .map(|(a, b)| crate::numeric::det_dot(a, b))
        .sum();
    if let (Some(fc), Some(gc)) = (&f.cells, &g.cells) {
        total += fc
            .iter()
            .zip(gc)
            .map(|(a, b)| crate::numeric::det_dot(a, b))
            .sum::<f64>();
    }
    total
}

/// Average of each flux component over the faces and cells whose midpoints
/// lie in `sub` (closed box). Faces lying in a boundary plane of `sub` carry
/// half weight, unless `sub` spans a periodic axis.
pub fn flux_average(grid: &UniformGrid, flux: &FluxField, sub: &BoundingBox) -> Vec<f64> {
    let d = grid.dim;
    let h = grid.h();
    let tol = 1e-9 * h;
    let wraps: Vec<bool> = (0..d)
        .map(|k| grid.bc == Bc::Periodic && sub.lo[k] <= grid.lo + tol && sub.hi[k] >= grid.hi - tol)
        .collect();
    let weight = |flat: usize, shift: &[f64]| -> f64 {
        let c = grid.coords(flat);
        let mut w = 1.0;
        for k in 0..d {
            let x = grid.lo + h * (c[k] as f64 + shift[k]);
            if x < sub.lo[k] - tol || x > sub.hi[k] + tol {
                return 0.0;
            }
            if !wraps[k] && ((x - sub.lo[k]).abs() <= tol || (x - sub.hi[k]).abs() <= tol) {
                w *= 0.5;
            }
        }
        w
    };
    let average = |valid: &(dyn Fn(usize) -> bool + Sync), shift: &[f64], values: &[f64]| -> f64 {
        let total = det_sum_by(grid.len(), |f| if valid(f) { weight(f, shift) } else { 0.0 });
        let sum = det_sum_by(
            grid.len(),
            |f| if valid(f) { weight(f, shift) * values[f] } else { 0.0 },
        );
        if total > 0.0 {
            sum / total
        } else {
            0.0
        }
    };
    (0..d)
        .map(|i| {
            let mut shift = vec![0.0; d];
            shift[i] = 0.5;
            let mut avg = average(&|f| grid.face_valid(f, i), &shift, &flux.faces[i]);
            if let Some(cells) = &flux.cells {
                avg += average(&|c| grid.cell_valid(c), &vec![0.5; d], &cells[i]);
            }
            avg
        })
        .collect()
}

/// Effective tensor `a*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomogenizedTensor {
    pub dim: usize,
    pub a: Vec<Vec<f64>>,
}

impl HomogenizedTensor {
    pub fn as_tensor(&self) -> Tensor {
        let mut t = [[0.0; 3]; 3];
        for i in 0..self.dim {
            for j in 0..self.dim {
                t[i][j] = self.a[i][j];
            }
        }
        t
    }

    /// `max |a_ij - a_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..self.dim {
            for j in 0..self.dim {
                m = m.max((self.a[i][j] - self.a[j][i]).abs());
            }
        }
        m
    }

    /// Ascending eigenvalues of the symmetric part.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let d = self.dim;
        let m = DMatrix::from_fn(d, d, |i, j| 0.5 * (self.a[i][j] + self.a[j][i]));
        let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// Frobenius distance to `other`, relative to the norm of `other`.
    pub fn relative_gap(&self, other: &HomogenizedTensor) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..self.dim {
            for j in 0..self.dim {
                num += (self.a[i][j] - other.a[i][j]).powi(2);
                den += other.a[i][j].powi(2);
            }
        }
        (num / den).sqrt()
    }
}

/// Smallest eigenvalue of the harmonic mean `(⟨a^{-1}⟩)^{-1}` and largest
/// eigenvalue of the arithmetic mean `⟨a⟩`, sampled at the `m^d` cell
/// centres of the unit cell.
pub fn mean_bounds<C: Coefficient + ?Sized>(coef: &C, m: usize) -> (f64, f64) {
    let d = coef.dim();
    let lat = SampleLattice {
        lo: vec![0.5 / m as f64; d],
        h: 1.0 / m as f64,
        counts: vec![m; d],
    };
    let n = lat.len();
    let samples: Vec<DMatrix<f64>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let t = coef.eval(&lat.point(k));
            DMatrix::from_fn(d, d, |i, j| t[i][j])
        })
        .collect();
    let mut arith = DMatrix::zeros(d, d);
    let mut harm = DMatrix::zeros(d, d);
    for s in &samples {
        arith += s;
        harm += s.clone().try_inverse().expect("elliptic sample is invertible");
    }
    arith /= n as f64;
    harm /= n as f64;
    let harm = harm.try_inverse().expect("mean of SPD inverses is invertible");
    let sym = |m: DMatrix<f64>| (&m + m.transpose()) * 0.5;
    let lo = SymmetricEigen::new(sym(harm)).eigenvalues.min();
    let hi = SymmetricEigen::new(sym(arith)).eigenvalues.max();
    (lo, hi)
}

/// Copies node values of `src` onto an aligned grid with the same spacing,
/// wrapping when `src` is periodic and zero outside a Dirichlet `src`.
/// Boundary nodes of a Dirichlet target keep their sampled values.
pub fn sample_aligned(src: &GridField, target: &UniformGrid) -> Result<GridField> {
    let s = &src.grid;
    if s.dim != target.dim {
        return Err(Error::GridMismatch("fields of different dimension".into()));
    }
    let h = s.h();
    if ((target.h() - h) / h).abs() > 1e-12 {
        return Err(Error::GridMismatch(format!(
            "spacings differ: {} vs {}",
            s.h(),
            target.h()
        )));
    }
    let off = (target.lo - s.lo) / h;
    if (off - off.round()).abs() > 1e-8 {
        return Err(Error::GridMismatch("grids are not node-aligned".into()));
    }
    let off = off.round() as i64;
    let nn = s.nodes_per_axis() as i64;
    let values = (0..target.len())
        .into_par_iter()
        .map(|t| {
            let c = target.coords(t);
            let mut flat = 0usize;
            for k in 0..target.dim {
                let mut i = c[k] as i64 + off;
                if s.bc == Bc::Periodic {
                    i = i.rem_euclid(nn);
                } else if i < 0 || i >= nn {
                    return 0.0;
                }
                flat = flat * nn as usize + i as usize;
            }
            src.values[flat]
        })
        .collect();
    GridField::new(target, values)
}

/// Truncation box `[-L, L]^d` with `cells_per_unit` intervals per unit length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub half_width: f64,
    pub cells_per_unit: usize,
}

impl BoxSpec {
    pub fn grid(&self, dim: usize, bc: Bc) -> Result<UniformGrid> {
        let l = self.half_width;
        let m = self.cells_per_unit as f64;
        let n = 2.0 * l * m;
        if !(l > 0.0) || (2.0 * l).fract() != 0.0 || n.fract() != 0.0 {
            return Err(Error::InvalidConfig(format!(
                "box half-width {l} must be a positive multiple of 1/2 and of 1/{m}"
            )));
        }
        UniformGrid::new(dim, n as usize, -l, l, bc)
    }

    pub fn doubled(&self) -> Self {
        Self {
            half_width: 2.0 * self.half_width,
            ..*self
        }
    }

    pub fn bounding_box(&self, dim: usize) -> BoundingBox {
        BoundingBox {
            lo: vec![-self.half_width; dim],
            hi: vec![self.half_width; dim],
        }
    }
}

/// The restriction of `inner` to `[lo, hi)^d`, extended periodically.
#[derive(Debug, Clone)]
pub struct BoxPeriodized<C> {
    pub inner: C,
    pub lo: f64,
    pub hi: f64,
}

impl<C: Coefficient> Coefficient for BoxPeriodized<C> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn eval(&self, x: &[f64]) -> Tensor {
        let len = self.hi - self.lo;
        let y: Vec<f64> = x.iter().map(|v| self.lo + (v - self.lo).rem_euclid(len)).collect();
        self.inner.eval(&y)
    }

    fn is_diagonal(&self) -> bool {
        self.inner.is_diagonal()
    }

    fn sample_entry(&self, lattice: &SampleLattice, i: usize, j: usize) -> Vec<f64> {
        let inside = lattice
            .lo
            .iter()
            .zip(&lattice.counts)
            .all(|(l, n)| *l >= self.lo && l + lattice.h * (*n as f64 - 1.0) < self.hi);
        if inside {
            self.inner.sample_entry(lattice, i, j)
        } else {
            (0..lattice.len())
                .into_par_iter()
                .map(|k| self.eval(&lattice.point(k))[i][j])
                .collect()
        }
    }

    fn probe_regions(&self) -> Vec<BoundingBox> {
        self.inner.probe_regions()
    }
}

/// Perturbed corrector `w̃_j` on a truncated box.
#[derive(Debug, Clone)]
pub struct PerturbedCorrector {
    pub direction: usize,
    pub spec: BoxSpec,
    pub field: GridField,
    pub report: SolveReport,
    /// `‖∇w̃_L − ∇w̃_{2L}‖_{L²(B_{L/2})}`, when computed.
    pub truncation_error: Option<f64>,
    /// Placed defects whose support crosses the box boundary.
    pub uncovered: Vec<LatticeIndex>,
}

impl PerturbedCorrector {
    pub fn grid(&self) -> &UniformGrid {
        &self.field.grid
    }
}

fn flux_difference(a: &FluxField, b: &FluxField) -> FluxField {
    let sub = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p - q).collect() };
    let faces = a.faces.iter().zip(&b.faces).map(|(x, y)| sub(x, y)).collect();
    let cells = match (&a.cells, &b.cells) {
        (None, None) => None,
        (Some(x), None) => Some(x.clone()),
        (None, Some(y)) => Some(y.iter().map(|v| v.iter().map(|t| -t).collect()).collect()),
        (Some(x), Some(y)) => Some(x.iter().zip(y).map(|(p, q)| sub(p, q)).collect()),
    };
    FluxField { faces, cells }
}

/// Defects whose support meets `[-L, L]^d` without being contained in it.
pub fn uncovered_defects(coef: &PerturbedCoefficient, half_width: f64) -> Vec<LatticeIndex> {
    let d = coef.per.dim;
    let s = coef.profile.support_radius();
    if coef.profile.amplitude_norm() == 0.0 {
        return Vec::new();
    }
    let reach = half_width * (d as f64).sqrt() + s;
    coef.sites_near(&vec![0.0; d], reach)
        .into_iter()
        .filter(|site| {
            let meets = site.center.iter().all(|c| c.abs() - s < half_width);
            let crosses = site.center.iter().any(|c| c.abs() + s > half_width);
            meets && crosses
        })
        .map(|site| site.index)
        .collect()
}

/// Systems for the perturbed problem on `grid`: full and periodic parts.
pub struct BoxSystems {
    pub full: DivFormSystem,
    pub per: DivFormSystem,
}

impl BoxSystems {
    pub fn assemble(coef: &PerturbedCoefficient, grid: &UniformGrid) -> Result<Self> {
        let full = match grid.bc {
            Bc::Dirichlet => assemble_divform(coef, grid)?,
            Bc::Periodic => assemble_divform(
                &BoxPeriodized {
                    inner: coef.clone(),
                    lo: grid.lo,
                    hi: grid.hi,
                },
                grid,
            )?,
        };
        let per = assemble_divform(&coef.per, grid)?;
        Ok(Self { full, per })
    }

    /// Discrete `div(ã (e_j + ∇w_per))`.
    pub fn rhs(&self, w_per: &GridField, j: usize) -> Vec<f64> {
        let diff = flux_difference(
            &self.full.flux(&w_per.values, Some(j)),
            &self.per.flux(&w_per.values, Some(j)),
        );
        self.full.rhs_div(&diff)
    }
}

/// Solves `-div(a ∇w̃) = div(ã (e_j + ∇w_per,e_j))` on `spec` with either
/// zero Dirichlet data or the periodic extension of the truncated
/// coefficient.
pub fn solve_perturbed_corrector(
    coef: &PerturbedCoefficient,
    cell: &PeriodicCorrector,
    j: usize,
    spec: BoxSpec,
    bc: Bc,
    cfg: &SolverConfig,
) -> Result<PerturbedCorrector> {
    if spec.cells_per_unit != cell.cells_per_unit() {
        return Err(Error::GridMismatch(format!(
            "box resolution {} differs from cell resolution {}",
            spec.cells_per_unit,
            cell.cells_per_unit()
        )));
    }
    let grid = spec.grid(coef.per.dim, bc)?;
    let systems = BoxSystems::assemble(coef, &grid)?;
    let w_per = cell.tiled(j, &grid)?;
    let rhs = systems.rhs(&w_per, j);
    let (field, report) = Solver::new(&systems.full, *cfg)?.solve(&rhs)?;
    let uncovered = uncovered_defects(coef, spec.half_width);
    if !uncovered.is_empty() {
        warn!(
            "{} defect supports cross the boundary of [-{L}, {L}]^d",
            uncovered.len(),
            L = spec.half_width
        );
    }
    Ok(PerturbedCorrector {
        direction: j,
        spec,
        field,
        report,
        truncation_error: None,
        uncovered,
    })
}

/// `‖∇u − ∇v‖_{L²(sub)}` for fields on aligned grids; `v` is sampled onto
/// the grid of `u`.
pub fn gradient_distance(u: &GridField, v: &GridField, sub: &BoundingBox) -> Result<f64> {
    let v = sample_aligned(v, &u.grid)?;
    let diff: Vec<f64> = u.values.iter().zip(&v.values).map(|(a, b)| a - b).collect();
    face_h1_seminorm(&u.grid, &diff, sub)
}

/// Solves on `spec` and on the doubled box, and records the truncation error
/// on `B_{L/2}` in the returned (smaller-box) corrector.
pub fn solve_with_truncation_estimate(
    coef: &PerturbedCoefficient,
    cell: &PeriodicCorrector,
    j: usize,
    spec: BoxSpec,
    bc: Bc,
    cfg: &SolverConfig,
) -> Result<PerturbedCorrector> {
    let mut small = solve_perturbed_corrector(coef, cell, j, spec, bc, cfg)?;
    let big = solve_perturbed_corrector(coef, cell, j, spec.doubled(), bc, cfg)?;
    let half = BoxSpec {
        half_width: spec.half_width / 2.0,
        ..spec
    }
    .bounding_box(coef.per.dim);
    small.truncation_error = Some(gradient_distance(&small.field, &big.field, &half)?);
    Ok(small)
}

/// Dirichlet vs periodic-extension truncations on `B_{L/2}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationConsistency {
    pub half_width: f64,
    pub dirichlet_error: f64,
    pub periodic_error: f64,
    /// `‖∇w̃_D − ∇w̃_P‖_{L²(B_{L/2})}`.
    pub difference: f64,
}

impl TruncationConsistency {
    /// The two solves agree within the sum of their truncation errors.
    pub fn holds(&self) -> bool {
        self.difference <= self.dirichlet_error + self.periodic_error
    }
}

pub fn truncation_consistency(
    coef: &PerturbedCoefficient,
    cell: &PeriodicCorrector,
    j: usize,
    spec: BoxSpec,
    cfg: &SolverConfig,
) -> Result<TruncationConsistency> {
    let dir = solve_with_truncation_estimate(coef, cell, j, spec, Bc::Dirichlet, cfg)?;
    let per = solve_with_truncation_estimate(coef, cell, j, spec, Bc::Periodic, cfg)?;
    let half = BoxSpec {
        half_width: spec.half_width / 2.0,
        ..spec
    }
    .bounding_box(coef.per.dim);
    Ok(TruncationConsistency {
        half_width: spec.half_width,
        dirichlet_error: dir.truncation_error.unwrap_or(f64::NAN),
        periodic_error: per.truncation_error.unwrap_or(f64::NAN),
        difference: gradient_distance(&dir.field, &per.field, &half)?,
    })
}

// ---------------------------------------------------------------------------
// Flux matrix and potential

/// Centred difference along `axis` at every node; zero where a neighbour
/// is missing.
pub fn centered_difference(field: &GridField, axis: usize) -> Vec<f64> {
    let g = &field.grid;
    let h = g.h();
    let u = &field.values;
    (0..g.len())
        .into_par_iter()
        .map(|i| match (g.neighbor(i, axis, -1), g.neighbor(i, axis, 1)) {
            (Some(a), Some(b)) => (u[b] - u[a]) / (2.0 * h),
            _ => 0.0,
        })
        .collect()
}

/// Nodes whose full centred stencil consists of active nodes.
fn deep_interior(g: &UniformGrid, i: usize) -> bool {
    match g.bc {
        Bc::Periodic => true,
        Bc::Dirichlet => {
            let c = g.coords(i);
            (0..g.dim).all(|k| c[k] >= 2 && c[k] + 2 <= g.n)
        }
    }
}

fn masked_l2(g: &UniformGrid, v: &[f64]) -> f64 {
    let hd = g.h().powi(g.dim as i32);
    (hd * det_sum_by(g.len(), |i| if deep_interior(g, i) { v[i] * v[i] } else { 0.0 })).sqrt()
}

/// Node values of each flux component: face pairs averaged along the
/// component axis plus the mean over the adjacent cells. Zero at inactive
/// nodes.
pub fn nodal_flux(grid: &UniformGrid, flux: &FluxField) -> Vec<Vec<f64>> {
    let g = grid;
    let d = g.dim;
    (0..d)
        .map(|i| {
            (0..g.len())
                .into_par_iter()
                .map(|m| {
                    if !g.is_active(m) {
                        return 0.0;
                    }
                    let dn = g.neighbor(m, i, -1).expect("active node has neighbours");
                    let mut v = 0.5 * (flux.faces[i][m] + flux.faces[i][dn]);
                    if let Some(cells) = &flux.cells {
                        let mut acc = 0.0;
                        for b in 0..(1usize << d) {
                            let mut c = m;
                            for k in 0..d {
                                if (b >> k) & 1 == 1 {
                                    c = g.neighbor(c, k, -1).expect("active node has neighbours");
                                }
                            }
                            acc += cells[i][c];
                        }
                        v += acc / (1usize << d) as f64;
                    }
                    v
                })
                .collect()
        })
        .collect()
}

/// `M_k^i` at the nodes, `m[k][i]`.
#[derive(Debug, Clone)]
pub struct MatrixField {
    pub grid: UniformGrid,
    pub m: Vec<Vec<GridField>>,
}

impl MatrixField {
    pub fn dim(&self) -> usize {
        self.grid.dim
    }

    /// `max_k ‖Σ_i δ_i M_k^i‖_{L²}` with centred differences over the deep
    /// interior.
    pub fn divergence_residual(&self) -> f64 {
        let g = &self.grid;
        (0..self.dim())
            .map(|k| {
                let mut div = vec![0.0; g.len()];
                for i in 0..self.dim() {
                    for (a, b) in div.iter_mut().zip(centered_difference(&self.m[k][i], i)) {
                        *a += b;
                    }
                }
                masked_l2(g, &div)
            })
            .fold(0.0, f64::max)
    }

    /// Cell averages of every entry (periodic grids).
    pub fn averages(&self) -> Vec<Vec<f64>> {
        self.m
            .iter()
            .map(|row| row.iter().map(|f| f.mean()).collect())
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.m.iter().flatten().map(|f| f.max_abs()).fold(0.0, f64::max)
    }
}

/// `M_k^i = a*_ik − [a (e_k + ∇w_k)]_i` on the grid of `sys`.
pub fn build_m(sys: &DivFormSystem, a_star: &HomogenizedTensor, w: &[GridField]) -> MatrixField {
    let g = &sys.grid;
    let d = g.dim;
    let m = (0..d)
        .map(|k| {
            let nodal = nodal_flux(g, &sys.flux(&w[k].values, Some(k)));
            nodal
                .into_iter()
                .enumerate()
                .map(|(i, v)| {
                    let values = v
                        .iter()
                        .enumerate()
                        .map(|(n, f)| if g.is_active(n) { a_star.a[i][k] - f } else { 0.0 })
                        .collect();
                    GridField {
                        grid: g.clone(),
                        values,
                    }
                })
                .collect()
        })
        .collect();
    MatrixField { grid: g.clone(), m }
}

/// `M̃ = M − M_per = −([a (e_k + ∇(w_per + w̃))] − [a_per (e_k + ∇w_per)])`
/// on a truncated box.
pub fn build_m_perturbation(systems: &BoxSystems, w_per: &[GridField], w_tilde: &[GridField]) -> MatrixField {
    let g = &systems.full.grid;
    let d = g.dim;
    let m = (0..d)
        .map(|k| {
            let total: Vec<f64> = w_per[k]
                .values
                .iter()
                .zip(&w_tilde[k].values)
                .map(|(a, b)| a + b)
                .collect();
            let diff = flux_difference(
                &systems.full.flux(&total, Some(k)),
                &systems.per.flux(&w_per[k].values, Some(k)),
            );
            nodal_flux(g, &diff)
                .into_iter()
                .map(|v| GridField {
                    grid: g.clone(),
                    values: v.into_iter().map(|x| -x).collect(),
                })
                .collect()
        })
        .collect();
    MatrixField { grid: g.clone(), m }
}

/// Potential `B_k^{i,j}` stored once per pair `i < j`.
#[derive(Debug, Clone)]
pub struct PotentialField {
    pub grid: UniformGrid,
    /// `b[k][p]` is `B_k^{i,j}` for the `p`-th pair of [`offdiag_pairs`].
    pub b: Vec<Vec<GridField>>,
}

impl PotentialField {
    pub fn dim(&self) -> usize {
        self.grid.dim
    }

    /// `B_k^{i,j}` at node `flat`; antisymmetric by construction.
    pub fn value(&self, k: usize, i: usize, j: usize, flat: usize) -> f64 {
        match self.pair(i, j) {
            None => 0.0,
            Some((s, p)) => s * self.b[k][p].values[flat],
        }
    }

    /// `B_k^{i,j}` at an arbitrary point by multilinear interpolation.
    pub fn interpolate(&self, k: usize, i: usize, j: usize, y: &[f64]) -> f64 {
        match self.pair(i, j) {
            None => 0.0,
            Some((s, p)) => s * self.b[k][p].interpolate(y),
        }
    }

    fn pair(&self, i: usize, j: usize) -> Option<(f64, usize)> {
        if i == j {
            return None;
        }
        let (a, b, s) = if i < j { (i, j, 1.0) } else { (j, i, -1.0) };
        offdiag_pairs(self.dim())
            .iter()
            .position(|&q| q == (a, b))
            .map(|p| (s, p))
    }

    fn component(&self, k: usize, i: usize, j: usize) -> Vec<f64> {
        match self.pair(i, j) {
            None => vec![0.0; self.grid.len()],
            Some((s, p)) => self.b[k][p].values.iter().map(|v| s * v).collect(),
        }
    }

    /// `max_{k,j} ‖Σ_i δ_i B_k^{i,j} − M_k^j‖_{L²}` over the deep interior.
    pub fn divergence_residual(&self, m: &MatrixField) -> f64 {
        let g = &self.grid;
        let d = self.dim();
        let mut worst: f64 = 0.0;
        for k in 0..d {
            for j in 0..d {
                let mut r: Vec<f64> = m.m[k][j].values.iter().map(|v| -v).collect();
                for i in 0..d {
                    let f = GridField {
                        grid: g.clone(),
                        values: self.component(k, i, j),
                    };
                    for (a, b) in r.iter_mut().zip(centered_difference(&f, i)) {
                        *a += b;
                    }
                }
                worst = worst.max(masked_l2(g, &r));
            }
        }
        worst
    }

    /// `max ‖−Σ_l δ_l δ_l B_k^{i,j} − (δ_j M_k^i − δ_i M_k^j)‖_{L²}`: the
    /// defining equation re-evaluated with the centred first differences
    /// used by the divergence check.
    pub fn curl_residual(&self, m: &MatrixField) -> f64 {
        let g = &self.grid;
        let d = self.dim();
        let mut worst: f64 = 0.0;
        for k in 0..d {
            for (p, &(i, j)) in offdiag_pairs(d).iter().enumerate() {
                let mut r = curl_rhs(m, k, i, j);
                r.iter_mut().for_each(|v| *v = -*v);
                for l in 0..d {
                    let first = GridField {
                        grid: g.clone(),
                        values: centered_difference(&self.b[k][p], l),
                    };
                    for (a, b) in r.iter_mut().zip(centered_difference(&first, l)) {
                        *a -= b;
                    }
                }
                worst = worst.max(masked_l2_inner(g, &r));
            }
        }
        worst
    }

    pub fn max_abs(&self) -> f64 {
        self.b.iter().flatten().map(|f| f.max_abs()).fold(0.0, f64::max)
    }
}

/// Like [`masked_l2`] with a two-node margin for nested centred stencils.
fn masked_l2_inner(g: &UniformGrid, v: &[f64]) -> f64 {
    if g.bc == Bc::Periodic {
        return masked_l2(g, v);
    }
    let hd = g.h().powi(g.dim as i32);
    (hd * det_sum_by(g.len(), |i| {
        let c = g.coords(i);
        if (0..g.dim).all(|k| c[k] >= 3 && c[k] + 3 <= g.n) {
            v[i] * v[i]
        } else {
            0.0
        }
    }))
    .sqrt()
}

/// `δ_j M_k^i − δ_i M_k^j` at the nodes.
fn curl_rhs(m: &MatrixField, k: usize, i: usize, j: usize) -> Vec<f64> {
    let a = centered_difference(&m.m[k][i], j);
    let b = centered_difference(&m.m[k][j], i);
    a.iter().zip(&b).map(|(x, y)| x - y).collect()
}

/// Solves `−Δ B_k^{i,j} = δ_j M_k^i − δ_i M_k^j` for `i < j`: spectrally on a
/// periodic grid, by a Dirichlet Laplacian solve on a box.
pub fn solve_potential(m: &MatrixField, cfg: &SolverConfig) -> Result<PotentialField> {
    let g = &m.grid;
    let d = g.dim;
    let pairs = offdiag_pairs(d);
    let laplace = if g.bc == Bc::Dirichlet {
        Some(assemble_divform(&PeriodicCoefficient::constant(d, 1.0)?, g)?)
    } else {
        None
    };
    let solver = laplace.as_ref().map(|s| Solver::new(s, *cfg)).transpose()?;
    let jobs: Vec<(usize, usize, usize)> = (0..d)
        .flat_map(|k| pairs.iter().map(move |&(i, j)| (k, i, j)))
        .collect();
    let fields: Vec<GridField> = jobs
        .par_iter()
        .map(|&(k, i, j)| {
            let rhs = curl_rhs(m, k, i, j);
            match &solver {
                None => poisson_periodic_spectral(&GridField::new(g, rhs)?),
                Some(s) => s.solve(&rhs).map(|(f, _)| f),
            }
        })
        .collect::<Result<_>>()?;
    let mut it = fields.into_iter();
    let b = (0..d)
        .map(|_| {
            (0..pairs.len())
                .map(|_| it.next().expect("one field per job"))
                .collect()
        })
        .collect();
    Ok(PotentialField { grid: g.clone(), b })
}

// ---------------------------------------------------------------------------
// Diagnostics

/// Sampled sublinearity quotients for one exponent `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SublinearityRow {
    pub s: f64,
    pub pairs: usize,
    pub max_ratio: f64,
    pub mean_ratio: f64,
}

/// `|w(x) − w(y)| / (|log|x−y||^{1/s} |x−y|^{1−d/s})` over Halton pairs in
/// `region` with `|x − y| ≥ 2`, for `s ∈ {d+1, 2d}`.
pub fn sublinearity_ratios<F>(w: F, region: &BoundingBox, samples: usize) -> Vec<SublinearityRow>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let d = region.lo.len();
    let pairs: Vec<(Vec<f64>, Vec<f64>, f64)> = (1..=samples as u64)
        .filter_map(|i| {
            let u = sampling::halton(i, 2 * d);
            let map = |t: &[f64]| -> Vec<f64> {
                t.iter()
                    .zip(region.lo.iter().zip(&region.hi))
                    .map(|(v, (a, b))| a + v * (b - a))
                    .collect()
            };
            let x = map(&u[..d]);
            let y = map(&u[d..]);
            let r = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            (r >= 2.0).then_some((x, y, r))
        })
        .collect();
    let diffs: Vec<(f64, f64)> = pairs.par_iter().map(|(x, y, r)| ((w(x) - w(y)).abs(), *r)).collect();
    let mut exps = vec![(d + 1) as f64, (2 * d) as f64];
    exps.dedup();
    exps.into_iter()
        .map(|s| {
            let ratios: Vec<f64> = diffs
                .iter()
                .map(|(dw, r)| dw / (r.ln().abs().powf(1.0 / s) * r.powf(1.0 - d as f64 / s)))
                .collect();
            SublinearityRow {
                s,
                pairs: ratios.len(),
                max_ratio: ratios.iter().copied().fold(0.0, f64::max),
                mean_ratio: if ratios.is_empty() {
                    0.0
                } else {
                    det_sum(&ratios) / ratios.len() as f64
                },
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthRow {
    pub half_width: f64,
    pub sup_abs: f64,
}

/// `sup |w|` over nested centred boxes with a fit against `log2` of the
/// half-width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthReport {
    pub rows: Vec<GrowthRow>,
    pub fit: Option<LineFit>,
}

pub fn sup_growth(w: &GridField, half_widths: &[f64]) -> GrowthReport {
    let g = &w.grid;
    let rows: Vec<GrowthRow> = half_widths
        .iter()
        .map(|&r| {
            let sup = (0..g.len())
                .into_par_iter()
                .filter(|&i| g.node(i).iter().all(|x| x.abs() <= r + 1e-12))
                .map(|i| w.values[i].abs())
                .reduce(|| 0.0, f64::max);
            GrowthRow {
                half_width: r,
                sup_abs: sup,
            }
        })
        .collect();
    let x: Vec<f64> = rows.iter().map(|r| r.half_width.log2()).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.sup_abs).collect();
    GrowthReport {
        fit: fit_line(&x, &y),
        rows,
    }
}

/// `‖∇w‖` and `‖∇w − τ_{−p}∇w_ref‖` over `V_p` within the grid box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCellRow {
    pub index: LatticeIndex,
    pub shell: u32,
    pub norm: f64,
    pub deviation: Option<f64>,
}

/// Per-cell gradient norms over cells of shell `≤ max_shell`. Nodal
/// centred gradients over the deep interior are attributed to the cell of
/// the nearest defect. The optional reference is a single-defect profile on
/// an aligned grid centred at the origin, translated to each `x_p`.
pub fn gradient_cell_table(
    w: &GridField,
    set: &DefectPointSet,
    max_shell: u32,
    reference: Option<&GridField>,
) -> Result<Vec<GradientCellRow>> {
    let g = &w.grid;
    let d = g.dim;
    let h = g.h();
    let grad: Vec<Vec<f64>> = (0..d).map(|k| centered_difference(w, k)).collect();
    let ref_grad: Option<(Vec<Vec<f64>>, &GridField)> =
        reference.map(|r| ((0..d).map(|k| centered_difference(r, k)).collect(), r));
    if let Some((_, r)) = &ref_grad {
        if ((r.grid.h() - h) / h).abs() > 1e-12 {
            return Err(Error::GridMismatch("reference spacing differs".into()));
        }
    }
    let owners: Vec<Option<(LatticeIndex, u32)>> = (0..g.len())
        .into_par_iter()
        .map(|i| {
            if !deep_interior(g, i) {
                return Ok(None);
            }
            let x = g.node(i);
            let nearest = set.nearest_defect(&x)?;
            let shell = nearest.index.norm();
            Ok((shell <= max_shell).then_some((nearest.index, shell)))
        })
        .collect::<Result<_>>()?;
    let hd = h.powi(d as i32);
    let mut acc: BTreeMap<LatticeIndex, (u32, f64, f64)> = BTreeMap::new();
    for (i, owner) in owners.into_iter().enumerate() {
        let Some((p, shell)) = owner else { continue };
        let norm2: f64 = (0..d).map(|k| grad[k][i].powi(2)).sum();
        let dev2 = match &ref_grad {
            None => 0.0,
            Some((rg, r)) => {
                let xp = set.generator().point(&p);
                let x = g.node(i);
                let rn = r.grid.nodes_per_axis();
                let mut flat = Some(0usize);
                for k in 0..d {
                    let t = (x[k] - xp[k] - r.grid.lo) / h;
                    let ti = t.round();
                    if (t - ti).abs() > 1e-6 || ti < 0.0 || ti as usize >= rn {
                        flat = None;
                        break;
                    }
                    flat = flat.map(|f| f * rn + ti as usize);
                }
                (0..d)
                    .map(|k| {
                        let rv = flat.map_or(0.0, |f| rg[k][f]);
                        (grad[k][i] - rv).powi(2)
                    })
                    .sum()
            }
        };
        let e = acc.entry(p).or_insert((shell, 0.0, 0.0));
        e.1 += norm2;
        e.2 += dev2;
    }
    Ok(acc
        .into_iter()
        .map(|(index, (shell, n2, d2))| GradientCellRow {
            index,
            shell,
            norm: (hd * n2).sqrt(),
            deviation: reference.map(|_| (hd * d2).sqrt()),
        })
        .collect())
}

/// Largest cell deviation (or norm, without a reference) per shell.
pub fn shell_maxima(rows: &[GradientCellRow]) -> Vec<(u32, f64)> {
    let mut out: BTreeMap<u32, f64> = BTreeMap::new();
    for r in rows {
        let v = r.deviation.unwrap_or(r.norm);
        let e = out.entry(r.shell).or_insert(0.0);
        *e = e.max(v);
    }
    out.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectorDiagnostics {
    pub sublinearity: Vec<SublinearityRow>,
    pub growth: GrowthReport,
    pub cells: Vec<GradientCellRow>,
}

/// Diagnostics of `w = w_per + w̃` for one direction.
pub fn corrector_diagnostics(
    cell: &PeriodicCorrector,
    tilde: &PerturbedCorrector,
    set: &DefectPointSet,
    max_shell: u32,
    samples: usize,
) -> Result<CorrectorDiagnostics> {
    let j = tilde.direction;
    let wp = &cell.fields[j];
    let wt = &tilde.field;
    let region = tilde.spec.bounding_box(wt.grid.dim);
    let sublinearity = sublinearity_ratios(|x| wp.interpolate(x) + wt.interpolate(x), &region, samples);
    let mut widths = Vec::new();
    let mut r = 1.0;
    while r <= tilde.spec.half_width {
        widths.push(r);
        r *= 2.0;
    }
    let growth = sup_growth(wt, &widths);
    let cells = gradient_cell_table(wt, set, max_shell, None)?;
    Ok(CorrectorDiagnostics {
        sublinearity,
        growth,
        cells,
    })
}
