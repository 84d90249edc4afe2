//! Periodic coefficients, defect profiles and the perturbed coefficient
//! `a = a_per + ã`, with the cell-norm and decay diagnostics.
//!
//! Every defect carries an identical copy of one profile, so the limit
//! profile `ã_∞` is the single-defect profile itself. Profiles are
//! nonnegative multiples of a fixed amplitude matrix `A`, hence
//! `|ã|_F = |A|_F Σ_p φ(x - x_p)` and all norms reduce to integrals of sums
//! of radial functions.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{Matrix2, Matrix3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, DefectPointSet, LatticeIndex};
use crate::numeric::{det_sum_by, fit_loglog, LineFit};
use crate::quadrature::simpson_fn;

/// Coefficient tensor; only the leading `d x d` block is meaningful.
pub type Tensor = [[f64; 3]; 3];

/// Largest dimension supported by coefficient evaluation.
pub const MAX_DIM: usize = 3;

pub fn identity_tensor(d: usize) -> Tensor {
    let mut t = [[0.0; 3]; 3];
    for (i, row) in t.iter_mut().enumerate().take(d) {
        row[i] = 1.0;
    }
    t
}

/// Smallest eigenvalue of the symmetric part of the leading `d x d` block.
pub fn min_eigenvalue(t: &Tensor, d: usize) -> f64 {
    let s = |i: usize, j: usize| 0.5 * (t[i][j] + t[j][i]);
    match d {
        1 => t[0][0],
        2 => {
            let m = Matrix2::new(s(0, 0), s(0, 1), s(1, 0), s(1, 1));
            m.symmetric_eigenvalues().min()
        }
        3 => {
            let m = Matrix3::from_fn(s);
            m.symmetric_eigenvalues().min()
        }
        _ => panic!("coefficient dimension {d} unsupported"),
    }
}

/// Regular sample lattice `lo + h * idx`, `idx < counts` componentwise,
/// flattened row-major with the last axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleLattice {
    pub lo: Vec<f64>,
    pub h: f64,
    pub counts: Vec<usize>,
}

impl SampleLattice {
    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, mut flat: usize) -> Vec<f64> {
        let d = self.counts.len();
        let mut x = vec![0.0; d];
        for k in (0..d).rev() {
            let i = flat % self.counts[k];
            flat /= self.counts[k];
            x[k] = self.lo[k] + self.h * i as f64;
        }
        x
    }

    fn strides(&self) -> Vec<usize> {
        let d = self.counts.len();
        let mut s = vec![1; d];
        for k in (0..d.saturating_sub(1)).rev() {
            s[k] = s[k + 1] * self.counts[k + 1];
        }
        s
    }
}

/// A (possibly non-symmetric in storage, symmetric in use) elliptic coefficient.
pub trait Coefficient: Send + Sync {
    fn dim(&self) -> usize;

    fn eval(&self, x: &[f64]) -> Tensor;

    /// Whether all off-diagonal entries vanish identically.
    fn is_diagonal(&self) -> bool {
        false
    }

    /// Entry `(i, j)` on a lattice. Implementations may splat sparse
    /// contributions instead of evaluating point by point.
    fn sample_entry(&self, lattice: &SampleLattice, i: usize, j: usize) -> Vec<f64> {
        (0..lattice.len())
            .into_par_iter()
            .map(|k| self.eval(&lattice.point(k))[i][j])
            .collect()
    }

    /// Boxes where ellipticity is probed.
    fn probe_regions(&self) -> Vec<BoundingBox> {
        vec![BoundingBox {
            lo: vec![0.0; self.dim()],
            hi: vec![1.0; self.dim()],
        }]
    }
}

impl<C: Coefficient + ?Sized> Coefficient for Arc<C> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, x: &[f64]) -> Tensor {
        (**self).eval(x)
    }
    fn is_diagonal(&self) -> bool {
        (**self).is_diagonal()
    }
    fn sample_entry(&self, lattice: &SampleLattice, i: usize, j: usize) -> Vec<f64> {
        (**self).sample_entry(lattice, i, j)
    }
    fn probe_regions(&self) -> Vec<BoundingBox> {
        (**self).probe_regions()
    }
}

/// One term `amplitude * cos(2π wave·y + phase)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrigTerm {
    pub amplitude: f64,
    pub wave: Vec<i32>,
    #[serde(default)]
    pub phase: f64,
}

/// Closed-form 1-periodic scalar symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Symbol {
    Constant {
        value: f64,
    },
    Trig {
        constant: f64,
        terms: Vec<TrigTerm>,
    },
    /// Piecewise constant in `y_axis`, equal-width layers over one period.
    Laminate {
        axis: usize,
        values: Vec<f64>,
    },
    Product {
        factors: Vec<Symbol>,
    },
}

impl Symbol {
    pub fn constant(value: f64) -> Self {
        Symbol::Constant { value }
    }

    /// `c + amp * cos(2π y_axis + phase)`.
    pub fn cosine(dim: usize, axis: usize, c: f64, amp: f64, phase: f64) -> Self {
        let mut wave = vec![0; dim];
        wave[axis] = 1;
        Symbol::Trig {
            constant: c,
            terms: vec![TrigTerm {
                amplitude: amp,
                wave,
                phase,
            }],
        }
    }

    pub fn eval(&self, y: &[f64]) -> f64 {
        match self {
            Symbol::Constant { value } => *value,
            Symbol::Trig { constant, terms } => {
                constant
                    + terms
                        .iter()
                        .map(|t| {
                            let arg: f64 = t.wave.iter().zip(y).map(|(k, v)| *k as f64 * v).sum();
                            t.amplitude * (2.0 * PI * arg + t.phase).cos()
                        })
                        .sum::<f64>()
            }
            Symbol::Laminate { axis, values } => {
                let u = y[*axis] - y[*axis].floor();
                let k = ((u * values.len() as f64) as usize).min(values.len() - 1);
                values[k]
            }
            Symbol::Product { factors } => factors.iter().map(|f| f.eval(y)).product(),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Symbol::Constant { value } if *value == 0.0)
    }

    fn validate(&self, dim: usize) -> Result<()> {
        match self {
            Symbol::Constant { .. } => Ok(()),
            Symbol::Trig { terms, .. } => {
                for t in terms {
                    if t.wave.len() != dim {
                        return Err(Error::InvalidConfig(format!(
                            "wave vector {:?} does not have dimension {dim}",
                            t.wave
                        )));
                    }
                }
                Ok(())
            }
            Symbol::Laminate { axis, values } => {
                if *axis >= dim || values.is_empty() {
                    return Err(Error::InvalidConfig(
                        "laminate needs a valid axis and at least one layer".into(),
                    ));
                }
                Ok(())
            }
            Symbol::Product { factors } => factors.iter().try_for_each(|f| f.validate(dim)),
        }
    }
}

/// 1-periodic coefficient given entrywise by closed-form symbols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodicCoefficient {
    pub dim: usize,
    pub entries: Vec<Vec<Symbol>>,
}

impl PeriodicCoefficient {
    pub fn new(dim: usize, entries: Vec<Vec<Symbol>>) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::InvalidConfig(format!(
                "coefficient dimension must be 1..=3, got {dim}"
            )));
        }
        if entries.len() != dim || entries.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidConfig(format!("coefficient needs {dim}x{dim} entries")));
        }
        for i in 0..dim {
            for j in 0..dim {
                entries[i][j].validate(dim)?;
                if entries[i][j] != entries[j][i] {
                    return Err(Error::InvalidConfig(format!("entries ({i},{j}) and ({j},{i}) differ")));
                }
            }
        }
        Ok(Self { dim, entries })
    }

    pub fn diagonal(diag: Vec<Symbol>) -> Result<Self> {
        let d = diag.len();
        let mut entries = vec![vec![Symbol::constant(0.0); d]; d];
        for (i, s) in diag.into_iter().enumerate() {
            entries[i][i] = s;
        }
        Self::new(d, entries)
    }

    /// `c I`.
    pub fn constant(dim: usize, c: f64) -> Result<Self> {
        Self::diagonal(vec![Symbol::constant(c); dim])
    }

    /// `(2 + sin 2πy_1) I`.
    pub fn sin_background(dim: usize) -> Result<Self> {
        Self::diagonal(vec![Symbol::cosine(dim, 0, 2.0, 1.0, -PI / 2.0); dim])
    }

    /// `diag(2 + cos 2πy_1, 3)`.
    pub fn laminate2d() -> Result<Self> {
        Self::diagonal(vec![Symbol::cosine(2, 0, 2.0, 1.0, 0.0), Symbol::constant(3.0)])
    }

    /// `Π_i (2 + cos 2πy_i) I`.
    pub fn checker(dim: usize) -> Result<Self> {
        let factors = (0..dim).map(|k| Symbol::cosine(dim, k, 2.0, 1.0, 0.0)).collect();
        Self::diagonal(vec![Symbol::Product { factors }; dim])
    }

    /// Named presets: `constant`, `sin`, `laminate2d`, `checker`.
    pub fn preset(name: &str, dim: usize) -> Result<Self> {
        match name {
            "constant" | "identity" => Self::constant(dim, 1.0),
            "sin" | "sin1d" => Self::sin_background(dim),
            "laminate2d" if dim == 2 => Self::laminate2d(),
            "checker" | "checker2d" | "checker3d" => Self::checker(dim),
            _ => Err(Error::InvalidConfig(format!(
                "unknown periodic preset '{name}' for d = {dim}"
            ))),
        }
    }

    pub fn entry(&self, i: usize, j: usize, y: &[f64]) -> f64 {
        self.entries[i][j].eval(y)
    }
}

impl Coefficient for PeriodicCoefficient {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64]) -> Tensor {
        let mut t = [[0.0; 3]; 3];
        for i in 0..self.dim {
            for j in 0..self.dim {
                t[i][j] = self.entries[i][j].eval(x);
            }
        }
        t
    }

    fn is_diagonal(&self) -> bool {
        (0..self.dim).all(|i| (0..self.dim).all(|j| i == j || self.entries[i][j].is_zero()))
    }

    fn sample_entry(&self, lattice: &SampleLattice, i: usize, j: usize) -> Vec<f64> {
        let s = &self.entries[i][j];
        (0..lattice.len())
            .into_par_iter()
            .map(|k| s.eval(&lattice.point(k)))
            .collect()
    }
}

/// Radial shape of a defect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProfileKind {
    /// `exp(1 - 1/(1 - (r/ρ)^2))` for `r < ρ`, zero outside; `φ(0) = 1`.
    Bump { rho: f64 },
    /// `(1 + r/ρ)^(-β)` for `r <= r_cut`, zero outside.
    Algebraic { rho: f64, beta: f64, r_cut: f64 },
}

/// Defect profile `φ(|z|) A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectProfile {
    pub kind: ProfileKind,
    /// Symmetric amplitude matrix (leading `d x d` block used).
    pub amplitude: Vec<Vec<f64>>,
}

impl DefectProfile {
    pub fn bump(dim: usize, rho: f64, amplitude: f64) -> Result<Self> {
        Self::new(dim, ProfileKind::Bump { rho }, scaled_identity(dim, amplitude))
    }

    pub fn algebraic(dim: usize, rho: f64, beta: f64, r_cut: f64, amplitude: f64) -> Result<Self> {
        Self::new(
            dim,
            ProfileKind::Algebraic { rho, beta, r_cut },
            scaled_identity(dim, amplitude),
        )
    }

    pub fn new(dim: usize, kind: ProfileKind, amplitude: Vec<Vec<f64>>) -> Result<Self> {
        match kind {
            ProfileKind::Bump { rho } if !(rho > 0.0 && rho <= 0.5) => {
                return Err(Error::InvalidConfig(format!(
                    "bump radius must lie in (0, 1/2], got {rho}"
                )))
            }
            ProfileKind::Algebraic { rho, beta, r_cut } if !(rho > 0.0 && beta > 0.0 && r_cut > 0.0) => {
                return Err(Error::InvalidConfig(
                    "algebraic profile needs positive rho, beta, r_cut".into(),
                ))
            }
            _ => {}
        }
        if amplitude.len() != dim || amplitude.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidConfig(format!("amplitude must be {dim}x{dim}")));
        }
        for i in 0..dim {
            for j in 0..dim {
                if amplitude[i][j] != amplitude[j][i] {
                    return Err(Error::InvalidConfig("amplitude matrix must be symmetric".into()));
                }
            }
        }
        Ok(Self { kind, amplitude })
    }

    pub fn dim(&self) -> usize {
        self.amplitude.len()
    }

    /// Radius beyond which the profile vanishes.
    pub fn support_radius(&self) -> f64 {
        match self.kind {
            ProfileKind::Bump { rho } => rho,
            ProfileKind::Algebraic { r_cut, .. } => r_cut,
        }
    }

    /// Radial scale `ρ` (sets quadrature resolution).
    pub fn scale(&self) -> f64 {
        match self.kind {
            ProfileKind::Bump { rho } => rho,
            ProfileKind::Algebraic { rho, .. } => rho,
        }
    }

    /// Scalar shape `φ(r)`.
    pub fn radial(&self, r: f64) -> f64 {
        match self.kind {
            ProfileKind::Bump { rho } => {
                let s = r / rho;
                if s >= 1.0 {
                    0.0
                } else {
                    (1.0 - 1.0 / (1.0 - s * s)).exp()
                }
            }
            ProfileKind::Algebraic { rho, beta, r_cut } => {
                if r > r_cut {
                    0.0
                } else {
                    (1.0 + r / rho).powf(-beta)
                }
            }
        }
    }

    pub fn shape(&self, z: &[f64]) -> f64 {
        self.radial(z.iter().map(|v| v * v).sum::<f64>().sqrt())
    }

    pub fn amplitude_norm(&self) -> f64 {
        self.amplitude.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Whether the uncut profile lies in `L^r(R^d)`.
    pub fn in_lr(&self, r: f64) -> bool {
        match self.kind {
            ProfileKind::Bump { .. } => r >= 1.0,
            ProfileKind::Algebraic { beta, .. } => beta * r > self.dim() as f64,
        }
    }

    /// `∫_{a <= |z| <= b} φ(|z|)^power dz` by radial Simpson quadrature.
    pub fn radial_integral(&self, power: f64, a: f64, b: f64) -> f64 {
        let b = b.min(self.support_radius());
        if b <= a {
            return 0.0;
        }
        let d = self.dim();
        let area = sphere_area(d);
        let intervals = (((b - a) / self.scale()) * 400.0).ceil().clamp(400.0, 200_000.0) as usize;
        simpson_fn(
            |r| area * r.powi(d as i32 - 1) * self.radial(r).powf(power),
            a,
            b,
            intervals,
        )
    }

    /// `|A|_F^r ∫ φ^r`, the `r`-th power of `||φ A||_{L^r}`.
    pub fn lr_norm_pow(&self, r: f64) -> f64 {
        self.amplitude_norm().powf(r) * self.radial_integral(r, 0.0, self.support_radius())
    }
}

fn scaled_identity(d: usize, c: f64) -> Vec<Vec<f64>> {
    (0..d)
        .map(|i| (0..d).map(|j| if i == j { c } else { 0.0 }).collect())
        .collect()
}

/// Surface measure of the unit sphere in `R^d` (2 in 1D).
pub fn sphere_area(d: usize) -> f64 {
    match d {
        1 => 2.0,
        2 => 2.0 * PI,
        3 => 4.0 * PI,
        _ => 2.0 * PI.powf(d as f64 / 2.0) / gamma_half(d),
    }
}

/// Volume of the unit ball in `R^d`.
pub fn ball_volume(d: usize) -> f64 {
    sphere_area(d) / d as f64
}

// Γ(d/2) for integer d.
fn gamma_half(d: usize) -> f64 {
    if d.is_multiple_of(2) {
        (1..d / 2).map(|k| k as f64).product()
    } else {
        let mut g = PI.sqrt();
        let mut x = 0.5;
        while x < d as f64 / 2.0 - 0.25 {
            g *= x;
            x += 1.0;
        }
        g
    }
}

/// Defect near a query: index and centre.
#[derive(Debug, Clone, PartialEq)]
pub struct Site {
    pub index: LatticeIndex,
    pub center: Vec<f64>,
}

/// `a = a_per + Σ_p φ(· - x_p) A` over the enumerated defects.
#[derive(Debug, Clone)]
pub struct PerturbedCoefficient {
    pub per: PeriodicCoefficient,
    pub profile: DefectProfile,
    pub set: DefectPointSet,
    /// Only defects with `|p| <= generations` are placed, if set.
    pub generations: Option<u32>,
    /// Certified ellipticity floor, filled by [`ellipticity_floor`].
    pub lambda_check: Option<f64>,
}

impl PerturbedCoefficient {
    pub fn new(per: PeriodicCoefficient, profile: DefectProfile, set: DefectPointSet) -> Result<Self> {
        if per.dim != profile.dim() || per.dim != set.dim() {
            return Err(Error::InvalidConfig(format!(
                "dimension mismatch: periodic {}, profile {}, point set {}",
                per.dim,
                profile.dim(),
                set.dim()
            )));
        }
        Ok(Self {
            per,
            profile,
            set,
            generations: None,
            lambda_check: None,
        })
    }

    pub fn with_generations(mut self, g: Option<u32>) -> Self {
        self.generations = g;
        self
    }

    /// Same coefficient with the profile amplitude set to zero.
    pub fn without_defects(&self) -> Self {
        let mut c = self.clone();
        c.profile.amplitude = scaled_identity(self.per.dim, 0.0);
        c
    }

    fn max_shell(&self) -> u32 {
        self.generations.unwrap_or(u32::MAX)
    }

    /// Placed defects with `|x_p - center| < radius`.
    pub fn sites_near(&self, center: &[f64], radius: f64) -> Vec<Site> {
        let r0 = center.iter().map(|v| v * v).sum::<f64>().sqrt();
        let gen = self.set.generator();
        let mut out = Vec::new();
        let mut n = 0u32;
        while n <= self.max_shell() {
            let (lo, hi) = gen.shell_norm_bounds(n);
            if lo >= r0 + radius {
                break;
            }
            if hi > r0 - radius {
                for p in self.set.shell(n) {
                    let x = gen.point(&p);
                    let d2: f64 = x.iter().zip(center).map(|(a, b)| (a - b).powi(2)).sum();
                    if d2 < radius * radius {
                        out.push(Site { index: p, center: x });
                    }
                }
            }
            n += 1;
        }
        out
    }

    /// Scalar defect density `Σ_p φ(x - x_p)`.
    pub fn defect_density(&self, x: &[f64]) -> f64 {
        if self.profile.amplitude_norm() == 0.0 {
            return 0.0;
        }
        self.sites_near(x, self.profile.support_radius())
            .iter()
            .map(|s| {
                let z: Vec<f64> = x.iter().zip(&s.center).map(|(a, b)| a - b).collect();
                self.profile.shape(&z)
            })
            .sum()
    }

    /// `ã(x)`.
    pub fn perturbation(&self, x: &[f64]) -> Tensor {
        let phi = self.defect_density(x);
        let mut t = [[0.0; 3]; 3];
        for i in 0..self.per.dim {
            for j in 0..self.per.dim {
                t[i][j] = phi * self.profile.amplitude[i][j];
            }
        }
        t
    }

    /// `a(x)`, checked against the certified floor when one is stored.
    pub fn eval_checked(&self, x: &[f64]) -> Result<Tensor> {
        let t = self.eval(x);
        if let Some(floor) = self.lambda_check {
            let ev = min_eigenvalue(&t, self.per.dim);
            if ev < floor * (1.0 - 1e-12) {
                return Err(Error::Ellipticity {
                    eigenvalue: ev,
                    floor,
                    at: x.to_vec(),
                });
            }
        }
        Ok(t)
    }

    /// Midpoint quadrature of `g(x)` over the union of defect supports
    /// meeting `region`, restricted by `keep`. Points inside several support
    /// boxes are counted once (by the first site).
    fn support_quadrature<G>(&self, region: &BoundingBox, sites: &[Site], resolution: f64, g: G) -> f64
    where
        G: Fn(&[f64]) -> f64 + Sync,
    {
        let d = self.per.dim;
        let s = self.profile.support_radius();
        let boxes: Vec<BoundingBox> = sites
            .iter()
            .map(|site| BoundingBox {
                lo: site
                    .center
                    .iter()
                    .zip(&region.lo)
                    .map(|(c, l)| (c - s).max(*l))
                    .collect(),
                hi: site
                    .center
                    .iter()
                    .zip(&region.hi)
                    .map(|(c, u)| (c + s).min(*u))
                    .collect(),
            })
            .collect();
        let cap = match d {
            1 => 1 << 20,
            2 => 1024,
            _ => 96,
        };
        let mut total = 0.0;
        for (k, b) in boxes.iter().enumerate() {
            if b.lo.iter().zip(&b.hi).any(|(l, u)| u <= l) {
                continue;
            }
            let counts: Vec<usize> =
                b.lo.iter()
                    .zip(&b.hi)
                    .map(|(l, u)| (((u - l) / resolution).ceil() as usize).clamp(1, cap))
                    .collect();
            let steps: Vec<f64> =
                b.lo.iter()
                    .zip(&b.hi)
                    .zip(&counts)
                    .map(|((l, u), n)| (u - l) / *n as f64)
                    .collect();
            let cell: f64 = steps.iter().product();
            let n: usize = counts.iter().product();
            let earlier = &boxes[..k];
            total += cell
                * det_sum_by(n, |flat| {
                    let mut rem = flat;
                    let mut y = [0.0; 3];
                    for a in (0..d).rev() {
                        let i = rem % counts[a];
                        rem /= counts[a];
                        y[a] = b.lo[a] + (i as f64 + 0.5) * steps[a];
                    }
                    let y = &y[..d];
                    if earlier.iter().any(|e| e.contains(y)) {
                        0.0
                    } else {
                        g(y)
                    }
                });
        }
        total
    }
}

impl Coefficient for PerturbedCoefficient {
    fn dim(&self) -> usize {
        self.per.dim
    }

    fn eval(&self, x: &[f64]) -> Tensor {
        let mut t = self.per.eval(x);
        let phi = self.defect_density(x);
        if phi != 0.0 {
            for i in 0..self.per.dim {
                for j in 0..self.per.dim {
                    t[i][j] += phi * self.profile.amplitude[i][j];
                }
            }
        }
        t
    }

    fn is_diagonal(&self) -> bool {
        let d = self.per.dim;
        self.per.is_diagonal() && (0..d).all(|i| (0..d).all(|j| i == j || self.profile.amplitude[i][j] == 0.0))
    }

    fn sample_entry(&self, lattice: &SampleLattice, i: usize, j: usize) -> Vec<f64> {
        let mut out = self.per.sample_entry(lattice, i, j);
        let amp = self.profile.amplitude[i][j];
        if amp == 0.0 || out.is_empty() {
            return out;
        }
        let d = self.per.dim;
        let s = self.profile.support_radius();
        let hi: Vec<f64> = lattice
            .lo
            .iter()
            .zip(&lattice.counts)
            .map(|(l, n)| l + lattice.h * (*n as f64 - 1.0))
            .collect();
        let center: Vec<f64> = lattice.lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect();
        let half_diag = lattice
            .lo
            .iter()
            .zip(&hi)
            .map(|(a, b)| 0.25 * (b - a).powi(2))
            .sum::<f64>()
            .sqrt();
        let strides = lattice.strides();
        for site in self.sites_near(&center, half_diag + s) {
            // index range of lattice points inside the support box
            let mut ranges = Vec::with_capacity(d);
            let mut empty = false;
            for k in 0..d {
                let a = ((site.center[k] - s - lattice.lo[k]) / lattice.h).ceil().max(0.0);
                let b = ((site.center[k] + s - lattice.lo[k]) / lattice.h).floor();
                let b = b.min(lattice.counts[k] as f64 - 1.0);
                if b < a {
                    empty = true;
                    break;
                }
                ranges.push((a as usize, b as usize));
            }
            if empty {
                continue;
            }
            let sizes: Vec<usize> = ranges.iter().map(|(a, b)| b - a + 1).collect();
            let total: usize = sizes.iter().product();
            for flat in 0..total {
                let mut rem = flat;
                let mut idx = 0usize;
                let mut z = [0.0; 3];
                for k in (0..d).rev() {
                    let i_k = ranges[k].0 + rem % sizes[k];
                    rem /= sizes[k];
                    idx += i_k * strides[k];
                    z[k] = lattice.lo[k] + lattice.h * i_k as f64 - site.center[k];
                }
                let phi = self.profile.shape(&z[..d]);
                if phi != 0.0 {
                    out[idx] += amp * phi;
                }
            }
        }
        out
    }

    fn probe_regions(&self) -> Vec<BoundingBox> {
        let d = self.per.dim;
        let mut regions = vec![BoundingBox {
            lo: vec![0.0; d],
            hi: vec![1.0; d],
        }];
        let s = self.profile.support_radius().min(4.0);
        let top = self.set.index_bound().min(self.max_shell()).min(3);
        for p in self.set.indices_up_to(top) {
            let x = self.set.generator().point(&p);
            regions.push(BoundingBox {
                lo: x.iter().map(|c| c - s).collect(),
                hi: x.iter().map(|c| c + s).collect(),
            });
        }
        regions
    }
}

/// `a(x / ε)`.
#[derive(Debug, Clone)]
pub struct Scaled<C> {
    pub inner: C,
    pub eps: f64,
}

impl<C: Coefficient> Coefficient for Scaled<C> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn eval(&self, x: &[f64]) -> Tensor {
        let y: Vec<f64> = x.iter().map(|v| v / self.eps).collect();
        self.inner.eval(&y)
    }

    fn is_diagonal(&self) -> bool {
        self.inner.is_diagonal()
    }

    fn sample_entry(&self, lattice: &SampleLattice, i: usize, j: usize) -> Vec<f64> {
        let inner = SampleLattice {
            lo: lattice.lo.iter().map(|v| v / self.eps).collect(),
            h: lattice.h / self.eps,
            counts: lattice.counts.clone(),
        };
        self.inner.sample_entry(&inner, i, j)
    }

    fn probe_regions(&self) -> Vec<BoundingBox> {
        self.inner
            .probe_regions()
            .into_iter()
            .map(|b| BoundingBox {
                lo: b.lo.iter().map(|v| v * self.eps).collect(),
                hi: b.hi.iter().map(|v| v * self.eps).collect(),
            })
            .collect()
    }
}

/// Minimum over probe points of the smallest eigenvalue of the symmetrised
/// coefficient; `density` points per axis in every probe region.
pub fn ellipticity_floor<C: Coefficient + ?Sized>(coef: &C, density: usize) -> Result<f64> {
    let d = coef.dim();
    let density = density.max(2);
    let mut worst = (f64::INFINITY, Vec::new());
    for region in coef.probe_regions() {
        let h: Vec<f64> = region
            .lo
            .iter()
            .zip(&region.hi)
            .map(|(a, b)| (b - a) / (density - 1) as f64)
            .collect();
        let n = density.pow(d as u32);
        let (ev, at) = (0..n)
            .into_par_iter()
            .map(|flat| {
                let mut rem = flat;
                let mut x = vec![0.0; d];
                for k in (0..d).rev() {
                    x[k] = region.lo[k] + h[k] * (rem % density) as f64;
                    rem /= density;
                }
                (min_eigenvalue(&coef.eval(&x), d), x)
            })
            .reduce(
                || (f64::INFINITY, Vec::new()),
                |a, b| if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a },
            );
        if ev < worst.0 {
            worst = (ev, at);
        }
    }
    if !(worst.0 > 0.0) {
        return Err(Error::Ellipticity {
            eigenvalue: worst.0,
            floor: 0.0,
            at: worst.1,
        });
    }
    Ok(worst.0)
}

/// Computes and stores the ellipticity floor.
pub fn certify_ellipticity(coef: &mut PerturbedCoefficient, density: usize) -> Result<f64> {
    let floor = ellipticity_floor(coef, density)?;
    coef.lambda_check = Some(floor);
    Ok(floor)
}

/// One row of a [`CellNormTable`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellNormEntry {
    pub index: LatticeIndex,
    pub r: f64,
    /// `||ã||_{L^r(V_p)}`.
    pub norm: f64,
    /// `||ã - τ_{-p} ã_∞||_{L^r(V_p)}`.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellNormTable {
    pub entries: Vec<CellNormEntry>,
    pub resolution: f64,
}

impl CellNormTable {
    pub fn sup_norm(&self) -> f64 {
        self.entries.iter().map(|e| e.norm).fold(0.0, f64::max)
    }
}

/// `||f||_{L^r(V_p)}` for a scalar field by midpoint quadrature over the
/// certified bounding box of `V_p`, keeping grid points whose nearest defect
/// is `p`. Intended for cells of moderate size.
pub fn cell_norm<F>(f: F, set: &DefectPointSet, p: &LatticeIndex, r: f64, resolution: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if !(r > 1.0) || !(resolution > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "cell norm needs r > 1 and positive resolution (r = {r}, resolution = {resolution})"
        )));
    }
    let bbox = set.cell_bounding_box(p)?;
    let d = set.dim();
    let counts: Vec<usize> = bbox
        .lo
        .iter()
        .zip(&bbox.hi)
        .map(|(a, b)| (((b - a) / resolution).ceil() as usize).max(1))
        .collect();
    let steps: Vec<f64> = bbox
        .lo
        .iter()
        .zip(&bbox.hi)
        .zip(&counts)
        .map(|((a, b), n)| (b - a) / *n as f64)
        .collect();
    let n: usize = counts.iter().product();
    let cell: f64 = steps.iter().product();
    let id = set.id_of(p);
    // classification errors are surfaced after the parallel sweep
    let failed = std::sync::atomic::AtomicBool::new(false);
    let sum = det_sum_by(n, |flat| {
        let mut rem = flat;
        let mut y = vec![0.0; d];
        for k in (0..d).rev() {
            y[k] = bbox.lo[k] + ((rem % counts[k]) as f64 + 0.5) * steps[k];
            rem /= counts[k];
        }
        match set.nearest_id(&y) {
            Ok((nid, _)) if Some(nid) == id => f(&y).abs().powf(r),
            Ok(_) => 0.0,
            Err(_) => {
                failed.store(true, std::sync::atomic::Ordering::Relaxed);
                0.0
            }
        }
    });
    if failed.into_inner() {
        return Err(Error::Uncertified {
            norm: bbox.hi.iter().map(|v| v * v).sum::<f64>().sqrt(),
            needed: p.norm() + 2,
            bound: set.index_bound(),
        });
    }
    Ok((sum * cell).powf(1.0 / r))
}

/// Cell norms of `ã` and of `ã - τ_{-p} ã_∞` over `V_p` for each index,
/// integrating only over defect supports.
pub fn cell_norm_table(
    coef: &PerturbedCoefficient,
    indices: &[LatticeIndex],
    r: f64,
    resolution: f64,
) -> Result<CellNormTable> {
    if !(r > 1.0) || !(resolution > 0.0) {
        return Err(Error::InvalidConfig(
            "cell norm needs r > 1 and positive resolution".into(),
        ));
    }
    let set = &coef.set;
    let amp = coef.profile.amplitude_norm();
    let s = coef.profile.support_radius();
    let mut entries = Vec::with_capacity(indices.len());
    for p in indices {
        let bbox = set.cell_bounding_box(p)?;
        let xp = set.point_of(p)?;
        let id = set.id_of(p);
        let center: Vec<f64> = bbox.lo.iter().zip(&bbox.hi).map(|(a, b)| 0.5 * (a + b)).collect();
        let sites = coef.sites_near(&center, 0.5 * bbox.diameter() + s);
        let in_cell = |y: &[f64]| matches!(set.nearest_id(y), Ok((nid, _)) if Some(nid) == id);
        let full = coef.support_quadrature(&bbox, &sites, resolution, |y| {
            if in_cell(y) {
                (amp * coef.defect_density(y)).powf(r)
            } else {
                0.0
            }
        });
        let placed = p.norm() <= coef.max_shell();
        let resid = coef.support_quadrature(&bbox, &sites, resolution, |y| {
            if in_cell(y) {
                let own = if placed {
                    let z: Vec<f64> = y.iter().zip(&xp).map(|(a, b)| a - b).collect();
                    coef.profile.shape(&z)
                } else {
                    0.0
                };
                (amp * (coef.defect_density(y) - own)).abs().powf(r)
            } else {
                0.0
            }
        });
        entries.push(CellNormEntry {
            index: p.clone(),
            r,
            norm: full.powf(1.0 / r),
            residual: resid.powf(1.0 / r),
        });
    }
    Ok(CellNormTable { entries, resolution })
}

/// Means of `|ã|` over balls and their fitted decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageDecay {
    pub radii: Vec<f64>,
    pub means: Vec<f64>,
    /// `mean / (log R / R^d)^{1/2}`.
    pub ratios: Vec<f64>,
    pub fit: Option<LineFit>,
    /// Smallest `C` with `mean <= C (log R / R^d)^{1/2}` at every radius.
    pub bound_constant: f64,
}

impl AverageDecay {
    fn from_means(d: usize, radii: &[f64], means: Vec<f64>) -> Self {
        let ratios: Vec<f64> = radii
            .iter()
            .zip(&means)
            .map(|(r, m)| m / (r.ln() / r.powi(d as i32)).sqrt())
            .collect();
        let bound_constant = ratios.iter().cloned().fold(0.0, f64::max);
        Self {
            radii: radii.to_vec(),
            fit: fit_loglog(radii, &means),
            means,
            ratios,
            bound_constant,
        }
    }

    /// Max/min of the ratios over the reported radii.
    pub fn ratio_band(&self) -> f64 {
        let lo = self.ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.ratios.iter().cloned().fold(0.0, f64::max);
        hi / lo
    }
}

/// `|B_R|^{-1} ∫_{B_R(x0)} |ã|` for each radius.
///
/// Since `|ã|_F = |A|_F Σ_p φ(· - x_p)`, the integral splits per defect:
/// supports inside the ball contribute the exact radial mass, supports
/// straddling the sphere are integrated by midpoint quadrature (exactly on
/// intervals in 1D).
pub fn average_decay(coef: &PerturbedCoefficient, x0: &[f64], radii: &[f64]) -> Result<AverageDecay> {
    if radii.windows(2).any(|w| w[1] <= w[0]) || radii.first().is_some_and(|r| *r <= 1.0) {
        return Err(Error::InvalidConfig(
            "radii must be increasing and larger than 1".into(),
        ));
    }
    let d = coef.per.dim;
    let prof = &coef.profile;
    let s = prof.support_radius();
    let amp = prof.amplitude_norm();
    let mass = prof.radial_integral(1.0, 0.0, s);
    let mut means = Vec::with_capacity(radii.len());
    for &radius in radii {
        let sites = coef.sites_near(x0, radius + s);
        let mut total = 0.0;
        for site in &sites {
            let dist = site
                .center
                .iter()
                .zip(x0)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            if dist + s <= radius {
                total += mass;
            } else if d == 1 {
                // exact interval intersection
                let (c, x) = (site.center[0], x0[0]);
                let lo = (x - radius).max(c - s) - c;
                let hi = (x + radius).min(c + s) - c;
                if hi > lo {
                    total += simpson_fn(|z| prof.radial(z.abs()), lo, hi, 2000);
                }
            } else {
                let region = BoundingBox {
                    lo: site.center.iter().map(|c| c - s).collect(),
                    hi: site.center.iter().map(|c| c + s).collect(),
                };
                let res = (2.0 * s / 256.0).max(prof.scale() / 32.0);
                total += coef.support_quadrature(&region, std::slice::from_ref(site), res, |y| {
                    let in_ball = y.iter().zip(x0).map(|(a, b)| (a - b).powi(2)).sum::<f64>() <= radius * radius;
                    if in_ball {
                        let z: Vec<f64> = y.iter().zip(&site.center).map(|(a, b)| a - b).collect();
                        prof.shape(&z)
                    } else {
                        0.0
                    }
                });
            }
        }
        means.push(amp * total / (ball_volume(d) * radius.powi(d as i32)));
    }
    Ok(AverageDecay::from_means(d, radii, means))
}

/// Mean of `|f|` over balls by midpoint quadrature with `per_axis` cells
/// across the ball's bounding cube.
pub fn average_decay_field<F>(f: F, x0: &[f64], radii: &[f64], per_axis: usize) -> AverageDecay
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let d = x0.len();
    let means = radii
        .iter()
        .map(|&radius| {
            let h = 2.0 * radius / per_axis as f64;
            let n = per_axis.pow(d as u32);
            let sum = det_sum_by(n, |flat| {
                let mut rem = flat;
                let mut y = vec![0.0; d];
                for k in (0..d).rev() {
                    y[k] = x0[k] - radius + ((rem % per_axis) as f64 + 0.5) * h;
                    rem /= per_axis;
                }
                let in_ball = y.iter().zip(x0).map(|(a, b)| (a - b).powi(2)).sum::<f64>() <= radius * radius;
                if in_ball {
                    f(&y).abs()
                } else {
                    0.0
                }
            });
            sum * h.powi(d as i32) / (ball_volume(d) * radius.powi(d as i32))
        })
        .collect();
    AverageDecay::from_means(d, radii, means)
}

/// `sup_{p != q} ||ã - τ_{-p} ã_∞||_{L^2(V_q \ B_R(x_q))}` over enumerated
/// `|p|, |q| <= index_bound`.
///
/// For a fixed `q` only defects `p` whose support reaches `V_q` change the
/// integrand; every other `p` gives `||ã||_{L^2(V_q \ B_R(x_q))}`.
pub fn tail_uniform(coef: &PerturbedCoefficient, radius: f64, index_bound: u32, resolution: f64) -> Result<f64> {
    if !(radius > 0.0) {
        return Err(Error::InvalidConfig("tail radius must be positive".into()));
    }
    let set = &coef.set;
    let amp = coef.profile.amplitude_norm();
    let s = coef.profile.support_radius();
    let bound = index_bound.min(set.index_bound().saturating_sub(1));
    let mut sup: f64 = 0.0;
    for q in set.indices_up_to(bound) {
        let bbox = set.cell_bounding_box(&q)?;
        let xq = set.point_of(&q)?;
        let far_corner = bbox
            .lo
            .iter()
            .zip(&bbox.hi)
            .zip(&xq)
            .map(|((a, b), c)| (a - c).abs().max((b - c).abs()).powi(2))
            .sum::<f64>()
            .sqrt();
        if far_corner <= radius {
            continue;
        }
        let id = set.id_of(&q);
        let center: Vec<f64> = bbox.lo.iter().zip(&bbox.hi).map(|(a, b)| 0.5 * (a + b)).collect();
        let sites = coef.sites_near(&center, 0.5 * bbox.diameter() + s);
        let outside = |y: &[f64]| {
            y.iter().zip(&xq).map(|(a, b)| (a - b).powi(2)).sum::<f64>() >= radius * radius
                && matches!(set.nearest_id(y), Ok((nid, _)) if Some(nid) == id)
        };
        let mut candidates: Vec<Option<&Site>> = vec![None];
        candidates.extend(sites.iter().filter(|site| site.index != q).map(Some));
        for cand in candidates {
            let v = coef.support_quadrature(&bbox, &sites, resolution, |y| {
                if !outside(y) {
                    return 0.0;
                }
                let sub = cand.map_or(0.0, |site| {
                    let z: Vec<f64> = y.iter().zip(&site.center).map(|(a, b)| a - b).collect();
                    coef.profile.shape(&z)
                });
                (amp * (coef.defect_density(y) - sub)).powi(2)
            });
            sup = sup.max(v.sqrt());
        }
    }
    Ok(sup)
}

/// Largest sampled Hölder quotient `|a(x) - a(y)|_F / |x - y|^α` over
/// neighbouring lattice points of `region` (diagnostic only).
pub fn holder_quotient<C: Coefficient + ?Sized>(coef: &C, region: &BoundingBox, per_axis: usize, alpha: f64) -> f64 {
    let d = coef.dim();
    let h: Vec<f64> = region
        .lo
        .iter()
        .zip(&region.hi)
        .map(|(a, b)| (b - a) / per_axis as f64)
        .collect();
    let n = per_axis.pow(d as u32);
    (0..n)
        .into_par_iter()
        .map(|flat| {
            let mut rem = flat;
            let mut x = vec![0.0; d];
            for k in (0..d).rev() {
                x[k] = region.lo[k] + h[k] * (rem % per_axis) as f64;
                rem /= per_axis;
            }
            let ax = coef.eval(&x);
            (0..d)
                .map(|k| {
                    let mut y = x.clone();
                    y[k] += h[k];
                    let ay = coef.eval(&y);
                    let diff: f64 = (0..d)
                        .flat_map(|i| (0..d).map(move |j| (i, j)))
                        .map(|(i, j)| (ax[i][j] - ay[i][j]).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    diff / h[k].powf(alpha)
                })
                .fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_set() -> DefectPointSet {
        DefectPointSet::dyadic(1, 2.0, 16).unwrap()
    }

    #[test]
    fn zero_amplitude_gives_periodic_part() {
        let per = PeriodicCoefficient::sin_background(1).unwrap();
        let coef =
            PerturbedCoefficient::new(per.clone(), DefectProfile::bump(1, 0.5, 0.0).unwrap(), line_set()).unwrap();
        for x in [0.1, 2.0, 3.3, 64.2] {
            assert_eq!(coef.eval(&[x])[0][0], per.eval(&[x])[0][0]);
        }
    }

    #[test]
    fn unit_bump_at_defect_centre() {
        let per = PeriodicCoefficient::constant(1, 1.0).unwrap();
        let coef = PerturbedCoefficient::new(per, DefectProfile::bump(1, 0.5, 1.0).unwrap(), line_set()).unwrap();
        assert_eq!(coef.eval(&[2.0])[0][0], 2.0);
        assert_eq!(coef.eval(&[3.0])[0][0], 1.0);
        assert_eq!(coef.eval(&[-8.0])[0][0], 2.0);
    }

    #[test]
    fn periodic_presets_are_periodic() {
        let c = PeriodicCoefficient::checker(3).unwrap();
        let x = [0.13, 0.71, 0.4];
        let a = c.eval(&x);
        for k in 0..3 {
            let mut y = x;
            y[k] += 1.0;
            let b = c.eval(&y);
            assert!((a[0][0] - b[0][0]).abs() < 1e-13);
        }
    }

    #[test]
    fn floors_of_presets() {
        let sin = PeriodicCoefficient::sin_background(1).unwrap();
        assert!((ellipticity_floor(&sin, 4001).unwrap() - 1.0).abs() < 1e-6);
        let lam = PeriodicCoefficient::laminate2d().unwrap();
        assert!((ellipticity_floor(&lam, 201).unwrap() - 1.0).abs() < 1e-6);
        let per = PeriodicCoefficient::constant(2, 1.0).unwrap();
        let set = DefectPointSet::dyadic(2, 2.0, 8).unwrap();
        let coef = PerturbedCoefficient::new(per, DefectProfile::bump(2, 0.4, 1.5).unwrap(), set).unwrap();
        assert!(ellipticity_floor(&coef, 41).unwrap() >= 1.0);
    }

    #[test]
    fn negative_floor_is_an_error() {
        let per = PeriodicCoefficient::constant(1, 1.0).unwrap();
        let coef = PerturbedCoefficient::new(per, DefectProfile::bump(1, 0.5, -2.0).unwrap(), line_set()).unwrap();
        assert!(matches!(ellipticity_floor(&coef, 101), Err(Error::Ellipticity { .. })));
    }

    #[test]
    fn lattice_splatting_matches_pointwise() {
        let per = PeriodicCoefficient::checker(2).unwrap();
        let set = DefectPointSet::dyadic(2, 2.0, 8).unwrap();
        let coef = PerturbedCoefficient::new(per, DefectProfile::bump(2, 0.5, 2.0).unwrap(), set).unwrap();
        let lat = SampleLattice {
            lo: vec![-3.0, -1.5],
            h: 0.125,
            counts: vec![80, 60],
        };
        let fast = coef.sample_entry(&lat, 0, 0);
        for (k, v) in fast.iter().enumerate() {
            let slow = coef.eval(&lat.point(k))[0][0];
            assert!((v - slow).abs() < 1e-13, "k={k}");
        }
    }

    #[test]
    fn scaled_lattice_matches_pointwise() {
        let per = PeriodicCoefficient::sin_background(2).unwrap();
        let sc = Scaled { inner: per, eps: 0.25 };
        let lat = SampleLattice {
            lo: vec![0.0, 0.0],
            h: 0.05,
            counts: vec![7, 9],
        };
        let v = sc.sample_entry(&lat, 1, 1);
        for (k, x) in v.iter().enumerate() {
            assert!((x - sc.eval(&lat.point(k))[1][1]).abs() < 1e-14);
        }
    }

    #[test]
    fn bump_l2_norm_matches_direct_quadrature() {
        let prof = DefectProfile::bump(1, 0.5, 1.0).unwrap();
        let direct = simpson_fn(|x| prof.radial(x.abs()).powi(2), -0.5, 0.5, 20_000);
        assert!((prof.lr_norm_pow(2.0) - direct).abs() < 1e-9);
    }

    #[test]
    fn algebraic_integrability_threshold() {
        let p = DefectProfile::algebraic(2, 1.0, 0.8, 100.0, 1.0).unwrap();
        assert!(!p.in_lr(2.0));
        assert!(p.in_lr(3.0));
    }

    #[test]
    fn ball_volumes() {
        assert!((ball_volume(1) - 2.0).abs() < 1e-15);
        assert!((ball_volume(2) - PI).abs() < 1e-15);
        assert!((ball_volume(3) - 4.0 * PI / 3.0).abs() < 1e-14);
        assert!((ball_volume(4) - PI * PI / 2.0).abs() < 1e-12);
        assert!((ball_volume(5) - 8.0 * PI * PI / 15.0).abs() < 1e-12);
    }
}
