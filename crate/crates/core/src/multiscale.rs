//! The two-scale pipeline on `Ω = (0, 1)^d`: oscillatory and homogenized
//! Dirichlet solves, the first-order expansion
//! `u^{ε,1} = u* + ε Σ_i ∂_i u* w_i(x/ε)`, remainder norms and rate fits.
//!
//! The Ω grid for scale `ε` has `nodes_per_period / ε` intervals and the
//! correctors are solved with `nodes_per_period` intervals per unit cell, so
//! when `1/ε` is an integer every Ω node maps onto a corrector node.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::{Coefficient, DefectProfile, PeriodicCoefficient, PerturbedCoefficient, Scaled, Symbol};
use crate::corrector::{
    build_m, build_m_perturbation, flux_average, solve_perturbed_corrector, solve_potential, BoxSpec, BoxSystems,
    HomogenizedTensor, PeriodicCorrector, PerturbedCorrector, PotentialField,
};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::numeric::{det_sum_by, fit_loglog, LineFit};
use crate::pde::{
    assemble_divform, face_h1_seminorm, gradient, l2_norm_on, solve, Bc, GridField, SolveReport, SolverConfig,
    UniformGrid,
};
use crate::source::Source;

pub const MIN_NODES_PER_PERIOD: usize = 16;

/// Resolution of the Ω grids and of the corrector grids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPolicy {
    /// Ω nodes per ε-period, also the corrector intervals per unit cell.
    pub nodes_per_period: usize,
    /// Lowest accepted `nodes_per_period`.
    pub min_nodes_per_period: usize,
}

impl Default for GridPolicy {
    fn default() -> Self {
        Self {
            nodes_per_period: MIN_NODES_PER_PERIOD,
            min_nodes_per_period: MIN_NODES_PER_PERIOD,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MultiscaleProblem {
    pub coef: PerturbedCoefficient,
    pub source: Source,
    pub eps_list: Vec<f64>,
    /// `Ω₁ ⊂⊂ Ω` for the interior gradient norm.
    pub interior: BoundingBox,
    pub grid: GridPolicy,
    pub solver: SolverConfig,
    /// Half-width of the box carrying `w̃`; by default the smallest integer
    /// box containing `Ω/ε` for the smallest `ε`, plus one.
    pub corrector_half_width: Option<f64>,
    /// Also assemble `H^ε`, which needs the potential `B`.
    pub with_h_eps: bool,
    /// Repeat every `ε` at twice the resolution and admit a row to the fits
    /// only if its norms change by at most 5 %.
    pub refinement_check: bool,
}

impl MultiscaleProblem {
    pub fn new(coef: PerturbedCoefficient, source: Source, eps_list: Vec<f64>) -> Result<Self> {
        let d = coef.per.dim;
        let p = Self {
            coef,
            source,
            eps_list,
            interior: BoundingBox {
                lo: vec![0.25; d],
                hi: vec![0.75; d],
            },
            grid: GridPolicy::default(),
            solver: SolverConfig::default(),
            corrector_half_width: None,
            with_h_eps: false,
            refinement_check: false,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.coef.per.dim
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        self.source.validate(d)?;
        self.solver.validate()?;
        if self.eps_list.is_empty() {
            return Err(Error::InvalidConfig("the ε list is empty".into()));
        }
        if self.interior.lo.len() != d
            || self.interior.hi.len() != d
            || (0..d).any(|k| {
                !(0.0 < self.interior.lo[k] && self.interior.lo[k] < self.interior.hi[k] && self.interior.hi[k] < 1.0)
            })
        {
            return Err(Error::InvalidConfig(format!(
                "Ω₁ = {:?}..{:?} must lie strictly inside (0, 1)^{d}",
                self.interior.lo, self.interior.hi
            )));
        }
        if self.grid.nodes_per_period < self.grid.min_nodes_per_period {
            return Err(Error::Unresolved(format!(
                "{} nodes per period, policy requires at least {}",
                self.grid.nodes_per_period, self.grid.min_nodes_per_period
            )));
        }
        for &eps in &self.eps_list {
            self.omega_grid(eps)?;
        }
        if let Some(l) = self.corrector_half_width {
            self.box_spec(l).grid(d, Bc::Dirichlet)?;
        }
        Ok(())
    }

    /// Dirichlet grid on Ω resolving `ε` with the policy's nodes per period.
    pub fn omega_grid(&self, eps: f64) -> Result<UniformGrid> {
        self.omega_grid_with(eps, self.grid.nodes_per_period)
    }

    fn omega_grid_with(&self, eps: f64, nodes_per_period: usize) -> Result<UniformGrid> {
        if !(eps > 0.0 && eps <= 1.0) {
            return Err(Error::InvalidConfig(format!("ε must lie in (0, 1], got {eps}")));
        }
        if nodes_per_period < self.grid.min_nodes_per_period {
            return Err(Error::Unresolved(format!(
                "ε = {eps}: {nodes_per_period} nodes per period, at least {} required",
                self.grid.min_nodes_per_period
            )));
        }
        let n = nodes_per_period as f64 / eps;
        if (n - n.round()).abs() > 1e-9 * n {
            return Err(Error::Unresolved(format!(
                "ε = {eps} does not give a whole number of grid intervals with {nodes_per_period} nodes per period"
            )));
        }
        UniformGrid::new(self.dim(), n.round() as usize, 0.0, 1.0, Bc::Dirichlet)
    }

    fn box_spec(&self, half_width: f64) -> BoxSpec {
        BoxSpec {
            half_width,
            cells_per_unit: self.grid.nodes_per_period,
        }
    }

    /// Default half-width of the `w̃` box.
    pub fn default_half_width(&self) -> f64 {
        let eps_min = self.eps_list.iter().cloned().fold(f64::INFINITY, f64::min);
        (1.0 / eps_min).ceil() + 1.0
    }

    fn has_defects(&self) -> bool {
        self.coef.profile.amplitude_norm() > 0.0
    }

    fn with_resolution(&self, nodes_per_period: usize) -> Self {
        let mut p = self.clone();
        p.grid.nodes_per_period = nodes_per_period;
        p
    }
}

/// Solves `−div(a(x/ε) ∇u^ε) = f` in Ω with `u^ε = 0` on `∂Ω`.
pub fn solve_oscillatory(problem: &MultiscaleProblem, eps: f64) -> Result<(GridField, SolveReport)> {
    let grid = problem.omega_grid(eps)?;
    solve_oscillatory_on(problem, eps, &grid)
}

/// [`solve_oscillatory`] on a caller-chosen grid of Ω.
pub fn solve_oscillatory_on(
    problem: &MultiscaleProblem,
    eps: f64,
    grid: &UniformGrid,
) -> Result<(GridField, SolveReport)> {
    let coef = Scaled {
        inner: problem.coef.clone(),
        eps,
    };
    let sys = assemble_divform(&coef, grid)?;
    let rhs = GridField::from_fn(grid, |x| problem.source.eval(x)).values;
    solve(&sys, &rhs, &problem.solver)
}

/// `u*` with its centred-difference gradient and Hessian.
#[derive(Debug, Clone)]
pub struct HomogenizedSolution {
    pub u: GridField,
    pub gradient: Vec<GridField>,
    /// `hessian[j][k] ≈ ∂_j ∂_k u*`.
    pub hessian: Vec<Vec<GridField>>,
    pub report: SolveReport,
}

impl HomogenizedSolution {
    /// `‖D²u*‖_{L²(Ω)}`.
    pub fn hessian_norm(&self) -> f64 {
        let g = &self.u.grid;
        let sq: f64 = self
            .hessian
            .iter()
            .flatten()
            .map(|f| l2_norm_on(g, &f.values, &g.bounding_box()).unwrap_or(0.0).powi(2))
            .sum();
        sq.sqrt()
    }
}

/// The constant coefficient `sym(a*)`.
pub fn constant_tensor_coefficient(a_star: &HomogenizedTensor) -> Result<PeriodicCoefficient> {
    let d = a_star.dim;
    let entries = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| Symbol::constant(0.5 * (a_star.a[i][j] + a_star.a[j][i])))
                .collect()
        })
        .collect();
    PeriodicCoefficient::new(d, entries)
}

/// Solves `−div(a* ∇u*) = f` on `grid` with zero Dirichlet data.
pub fn solve_homogenized(
    problem: &MultiscaleProblem,
    a_star: &HomogenizedTensor,
    grid: &UniformGrid,
) -> Result<HomogenizedSolution> {
    let coef = constant_tensor_coefficient(a_star)?;
    let sys = assemble_divform(&coef, grid)?;
    let rhs = GridField::from_fn(grid, |x| problem.source.eval(x)).values;
    let (u, report) = solve(&sys, &rhs, &problem.solver)?;
    let grad = gradient(&u);
    let hessian = grad.iter().map(gradient).collect::<Vec<_>>();
    // hessian[k][j] = ∂_j ∂_k u*; symmetrise the mixed entries
    let d = grid.dim;
    let hessian = (0..d)
        .map(|j| {
            (0..d)
                .map(|k| {
                    let values = hessian[k][j]
                        .values
                        .iter()
                        .zip(&hessian[j][k].values)
                        .map(|(a, b)| 0.5 * (a + b))
                        .collect();
                    GridField {
                        grid: grid.clone(),
                        values,
                    }
                })
                .collect()
        })
        .collect();
    Ok(HomogenizedSolution {
        u,
        gradient: grad,
        hessian,
        report,
    })
}

/// Periodic and perturbed correctors with their potentials, shared
/// read-only by every ε.
#[derive(Debug, Clone)]
pub struct CorrectorSet {
    pub cell: PeriodicCorrector,
    pub a_star: HomogenizedTensor,
    /// `w̃_j` on `[−L, L]^d`; empty without defects.
    pub tilde: Vec<PerturbedCorrector>,
    pub potential_per: Option<PotentialField>,
    pub potential_tilde: Option<PotentialField>,
}

impl CorrectorSet {
    /// `w_j(y) = w_per,j(y) + w̃_j(y)`; `w̃` is zero outside its box.
    pub fn w(&self, j: usize, y: &[f64]) -> f64 {
        let per = self.cell.fields[j].interpolate(y);
        per + self.tilde.get(j).map_or(0.0, |t| t.field.interpolate(y))
    }

    /// `B_k^{i,j}(y)`; requires the potentials.
    pub fn b(&self, k: usize, i: usize, j: usize, y: &[f64]) -> f64 {
        let per = self.potential_per.as_ref().map_or(0.0, |p| p.interpolate(k, i, j, y));
        per + self.potential_tilde.as_ref().map_or(0.0, |p| p.interpolate(k, i, j, y))
    }

    /// Half-width of the `w̃` box, if any.
    pub fn half_width(&self) -> Option<f64> {
        self.tilde.first().map(|t| t.spec.half_width)
    }

    /// Whether `Ω/ε = (0, 1/ε)^d` lies inside the `w̃` box.
    pub fn covers(&self, eps: f64) -> bool {
        self.half_width().is_none_or(|l| 1.0 / eps <= l + 1e-12)
    }
}

pub fn build_correctors(problem: &MultiscaleProblem) -> Result<CorrectorSet> {
    let d = problem.dim();
    let m = problem.grid.nodes_per_period;
    let cfg = &problem.solver;
    let cell = PeriodicCorrector::solve(&problem.coef.per, m, cfg)?;
    let a_star = cell.homogenized_tensor();
    let potential_per = if problem.with_h_eps {
        Some(solve_potential(&build_m(&cell.system, &a_star, &cell.fields), cfg)?)
    } else {
        None
    };
    let mut tilde = Vec::new();
    let mut potential_tilde = None;
    if problem.has_defects() {
        let spec = problem.box_spec(
            problem
                .corrector_half_width
                .unwrap_or_else(|| problem.default_half_width()),
        );
        tilde = (0..d)
            .into_par_iter()
            .map(|j| solve_perturbed_corrector(&problem.coef, &cell, j, spec, Bc::Dirichlet, cfg))
            .collect::<Result<_>>()?;
        if problem.with_h_eps {
            let grid = spec.grid(d, Bc::Dirichlet)?;
            let systems = BoxSystems::assemble(&problem.coef, &grid)?;
            let w_per: Vec<GridField> = (0..d).map(|j| cell.tiled(j, &grid)).collect::<Result<_>>()?;
            let w_tilde: Vec<GridField> = tilde.iter().map(|t| t.field.clone()).collect();
            potential_tilde = Some(solve_potential(&build_m_perturbation(&systems, &w_per, &w_tilde), cfg)?);
        }
    }
    Ok(CorrectorSet {
        cell,
        a_star,
        tilde,
        potential_per,
        potential_tilde,
    })
}

/// `u^{ε,1} = u* + ε Σ_i ∂_i u* w_i(x/ε)` on the grid of `u*`.
pub fn first_order_expansion(u_star: &HomogenizedSolution, correctors: &CorrectorSet, eps: f64) -> GridField {
    if !correctors.covers(eps) {
        warn!(
            "Ω/ε = (0, {})^d exceeds the corrector box [-{L}, {L}]^d; w̃ is taken as zero outside",
            1.0 / eps,
            L = correctors.half_width().unwrap_or(0.0)
        );
    }
    let g = &u_star.u.grid;
    let d = g.dim;
    let values = (0..g.len())
        .into_par_iter()
        .map(|n| {
            let y: Vec<f64> = g.node(n).iter().map(|v| v / eps).collect();
            let corr: f64 = (0..d).map(|i| u_star.gradient[i].values[n] * correctors.w(i, &y)).sum();
            u_star.u.values[n] + eps * corr
        })
        .collect();
    GridField {
        grid: g.clone(),
        values,
    }
}

/// `‖H^ε‖_{L²(Ω)}` with
/// `H_i = ε Σ_{j,k} (a_ij(x/ε) w_k(x/ε) − B_k^{i,j}(x/ε)) ∂_j ∂_k u*`.
pub fn h_eps_norm(
    problem: &MultiscaleProblem,
    u_star: &HomogenizedSolution,
    correctors: &CorrectorSet,
    eps: f64,
) -> f64 {
    let g = &u_star.u.grid;
    let d = g.dim;
    let coef = Scaled {
        inner: problem.coef.clone(),
        eps,
    };
    let lattice = g.node_lattice();
    let a: Vec<Vec<Vec<f64>>> = (0..d)
        .map(|i| (0..d).map(|j| coef.sample_entry(&lattice, i, j)).collect())
        .collect();
    let h_sq: Vec<f64> = (0..g.len())
        .into_par_iter()
        .map(|n| {
            let y: Vec<f64> = g.node(n).iter().map(|v| v / eps).collect();
            let w: Vec<f64> = (0..d).map(|k| correctors.w(k, &y)).collect();
            let mut sq = 0.0;
            for i in 0..d {
                let mut hi = 0.0;
                for j in 0..d {
                    for k in 0..d {
                        let coeff = a[i][j][n] * w[k] - correctors.b(k, i, j, &y);
                        hi += coeff * u_star.hessian[j][k].values[n];
                    }
                }
                sq += (eps * hi).powi(2);
            }
            sq
        })
        .collect();
    // trapezoid weights on the closed cube
    let hd = g.h().powi(d as i32);
    let nn = g.nodes_per_axis();
    (hd * det_sum_by(g.len(), |n| {
        let c = g.coords(n);
        let w: f64 = (0..d)
            .map(|k| if c[k] == 0 || c[k] == nn - 1 { 0.5 } else { 1.0 })
            .product();
        w * h_sq[n]
    }))
    .sqrt()
}

/// Rate exponents expected for the configured profile: `ν_r = min(1, d/r)`
/// and the log power `μ_r`, with `r` the smallest integrability exponent
/// of the profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpectedExponents {
    pub r: f64,
    pub nu: f64,
    pub mu: f64,
    /// Whether the rate estimate is established for the configuration (`d ≥ 3`, `r ≠ d`).
    pub covered: bool,
}

pub fn expected_exponents(profile: &DefectProfile, dim: usize) -> ExpectedExponents {
    use crate::coefficients::ProfileKind;
    let d = dim as f64;
    let r = match profile.kind {
        ProfileKind::Bump { .. } => 1.0,
        ProfileKind::Algebraic { beta, .. } => d / beta,
    };
    ExpectedExponents {
        r,
        nu: (d / r).min(1.0),
        mu: if r < d { 0.0 } else { 1.0 / r },
        covered: dim >= 3 && r != d,
    }
}

/// Remainder norms at one `ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub eps: f64,
    /// Ω grid intervals per axis.
    pub intervals: usize,
    /// `‖R^ε‖_{L²(Ω)}`.
    pub l2: f64,
    /// `‖∇R^ε‖_{L²(Ω₁)}`.
    pub h1_interior: f64,
    /// `‖∇R^ε‖_{L²(Ω)}`.
    pub h1_global: f64,
    pub h_eps: Option<f64>,
    /// `‖D²u*‖_{L²(Ω)}`.
    pub hessian_norm: f64,
    /// Largest relative change of the norms under grid doubling.
    pub refinement_change: Option<f64>,
    /// Whether the row enters the fits.
    pub admitted: bool,
    /// Whether the `w̃` box contains `Ω/ε`.
    pub box_covers: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub dim: usize,
    pub a_star: Vec<Vec<f64>>,
    pub rows: Vec<ConvergenceRow>,
    /// Log-log fits of the norms against `ε` over admitted rows; the slope
    /// is the observed rate.
    pub l2_fit: Option<LineFit>,
    pub h1_interior_fit: Option<LineFit>,
    pub h1_global_fit: Option<LineFit>,
    pub h_eps_fit: Option<LineFit>,
    /// `max ‖H^ε‖ / (ε ‖D²u*‖)` over admitted rows.
    pub h_eps_constant: Option<f64>,
    pub expected: ExpectedExponents,
}

impl ConvergenceReport {
    /// Ratios `l2(ε_k) / l2(ε_{k+1})` between consecutive rows.
    pub fn l2_decrease_factors(&self) -> Vec<f64> {
        self.rows.windows(2).map(|w| w[0].l2 / w[1].l2).collect()
    }
}

struct Norms {
    intervals: usize,
    l2: f64,
    h1_interior: f64,
    h1_global: f64,
    h_eps: Option<f64>,
    hessian_norm: f64,
}

fn remainder_norms(problem: &MultiscaleProblem, correctors: &CorrectorSet, eps: f64) -> Result<Norms> {
    let grid = problem.omega_grid(eps)?;
    let (u_eps, _) = solve_oscillatory_on(problem, eps, &grid)?;
    let u_star = solve_homogenized(problem, &correctors.a_star, &grid)?;
    let u1 = first_order_expansion(&u_star, correctors, eps);
    let r: Vec<f64> = u_eps.values.iter().zip(&u1.values).map(|(a, b)| a - b).collect();
    let omega = grid.bounding_box();
    Ok(Norms {
        intervals: grid.n,
        l2: l2_norm_on(&grid, &r, &omega)?,
        h1_interior: face_h1_seminorm(&grid, &r, &problem.interior)?,
        h1_global: face_h1_seminorm(&grid, &r, &omega)?,
        h_eps: problem
            .with_h_eps
            .then(|| h_eps_norm(problem, &u_star, correctors, eps)),
        hessian_norm: u_star.hessian_norm(),
    })
}

fn relative_change(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Runs the pipeline for every `ε` of the problem and fits rates.
pub fn remainder_study(problem: &MultiscaleProblem) -> Result<ConvergenceReport> {
    problem.validate()?;
    let correctors = build_correctors(problem)?;
    let fine = if problem.refinement_check {
        let p = problem.with_resolution(2 * problem.grid.nodes_per_period);
        let c = build_correctors(&p)?;
        Some((p, c))
    } else {
        None
    };
    let rows: Vec<ConvergenceRow> = problem
        .eps_list
        .par_iter()
        .map(|&eps| {
            let n = remainder_norms(problem, &correctors, eps)?;
            let refinement_change = match &fine {
                None => None,
                Some((p, c)) => {
                    let f = remainder_norms(p, c, eps)?;
                    Some(
                        [
                            relative_change(n.l2, f.l2),
                            relative_change(n.h1_interior, f.h1_interior),
                            relative_change(n.h1_global, f.h1_global),
                        ]
                        .into_iter()
                        .fold(0.0, f64::max),
                    )
                }
            };
            Ok(ConvergenceRow {
                eps,
                intervals: n.intervals,
                l2: n.l2,
                h1_interior: n.h1_interior,
                h1_global: n.h1_global,
                h_eps: n.h_eps,
                hessian_norm: n.hessian_norm,
                admitted: refinement_change.is_none_or(|c| c <= 0.05),
                refinement_change,
                box_covers: correctors.covers(eps),
            })
        })
        .collect::<Result<_>>()?;
    let admitted: Vec<&ConvergenceRow> = rows.iter().filter(|r| r.admitted).collect();
    let eps: Vec<f64> = admitted.iter().map(|r| r.eps).collect();
    let fit = |f: &dyn Fn(&ConvergenceRow) -> f64| -> Option<LineFit> {
        let y: Vec<f64> = admitted.iter().map(|r| f(r)).collect();
        fit_loglog(&eps, &y)
    };
    let h_eps_constant = admitted
        .iter()
        .filter_map(|r| r.h_eps.map(|h| h / (r.eps * r.hessian_norm)))
        .reduce(f64::max);
    Ok(ConvergenceReport {
        dim: problem.dim(),
        a_star: correctors.a_star.a.clone(),
        l2_fit: fit(&|r| r.l2),
        h1_interior_fit: fit(&|r| r.h1_interior),
        h1_global_fit: fit(&|r| r.h1_global),
        h_eps_fit: if problem.with_h_eps {
            fit(&|r| r.h_eps.unwrap_or(0.0))
        } else {
            None
        },
        h_eps_constant,
        expected: expected_exponents(&problem.coef.profile, problem.dim()),
        rows,
    })
}

/// Flux-average tensor over one box `B_R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluxAverageRow {
    pub radius: f64,
    pub tensor: Vec<Vec<f64>>,
    /// `|A_R − a*|_F / |a*|_F`.
    pub relative_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluxAverageReport {
    pub a_star: Vec<Vec<f64>>,
    pub rows: Vec<FluxAverageRow>,
}

impl FluxAverageReport {
    pub fn gaps_decrease(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].relative_gap < w[0].relative_gap)
    }
}

/// Averages `a (e_j + ∇w_per,j + ∇w̃_j)` over `B_R = [−R, R]^d`, with `w̃_j`
/// solved on `B_R` under zero Dirichlet data, and compares with `a*`.
pub fn flux_average_tensor(
    coef: &PerturbedCoefficient,
    radii: &[f64],
    cells_per_unit: usize,
    cfg: &SolverConfig,
) -> Result<FluxAverageReport> {
    let d = coef.per.dim;
    let cell = PeriodicCorrector::solve(&coef.per, cells_per_unit, cfg)?;
    let a_star = cell.homogenized_tensor();
    let rows = radii
        .iter()
        .map(|&radius| {
            let spec = BoxSpec {
                half_width: radius,
                cells_per_unit,
            };
            let grid = spec.grid(d, Bc::Dirichlet)?;
            let systems = BoxSystems::assemble(coef, &grid)?;
            let bb = grid.bounding_box();
            let columns: Vec<Vec<f64>> = (0..d)
                .into_par_iter()
                .map(|j| {
                    let tilde = solve_perturbed_corrector(coef, &cell, j, spec, Bc::Dirichlet, cfg)?;
                    let w_per = cell.tiled(j, &grid)?;
                    let total: Vec<f64> = w_per
                        .values
                        .iter()
                        .zip(&tilde.field.values)
                        .map(|(a, b)| a + b)
                        .collect();
                    Ok(flux_average(&grid, &systems.full.flux(&total, Some(j)), &bb))
                })
                .collect::<Result<_>>()?;
            let tensor = HomogenizedTensor {
                dim: d,
                a: (0..d).map(|i| (0..d).map(|j| columns[j][i]).collect()).collect(),
            };
            Ok(FluxAverageRow {
                radius,
                relative_gap: tensor.relative_gap(&a_star),
                tensor: tensor.a,
            })
        })
        .collect::<Result<_>>()?;
    Ok(FluxAverageReport { a_star: a_star.a, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DefectPointSet;

    fn problem(eps: Vec<f64>) -> MultiscaleProblem {
        let coef = PerturbedCoefficient::new(
            PeriodicCoefficient::constant(2, 1.0).unwrap(),
            DefectProfile::bump(2, 0.5, 0.0).unwrap(),
            DefectPointSet::dyadic(2, 2.0, 12).unwrap(),
        )
        .unwrap();
        MultiscaleProblem::new(coef, Source::constant(1.0), eps).unwrap()
    }

    #[test]
    fn grid_policy_rejects_underresolved() {
        let mut p = problem(vec![0.25]);
        assert_eq!(p.omega_grid(0.25).unwrap().n, 64);
        p.grid.nodes_per_period = 8;
        assert!(matches!(p.validate(), Err(Error::Unresolved(_))));
        assert!(matches!(p.omega_grid(0.25), Err(Error::Unresolved(_))));
        p.grid.min_nodes_per_period = 8;
        assert!(p.validate().is_ok());
    }

    #[test]
    fn interior_must_be_strict() {
        let mut p = problem(vec![0.25]);
        p.interior.hi = vec![1.0, 0.75];
        assert!(p.validate().is_err());
    }

    #[test]
    fn non_integer_period_count_rejected() {
        let p = problem(vec![0.25]);
        assert!(p.omega_grid(0.3).is_err());
    }

    #[test]
    fn exponents() {
        let bump = DefectProfile::bump(3, 0.5, 1.0).unwrap();
        let e = expected_exponents(&bump, 3);
        assert_eq!((e.nu, e.mu, e.covered), (1.0, 0.0, true));
        let alg = DefectProfile::algebraic(3, 1.0, 0.5, 100.0, 1.0).unwrap();
        let e = expected_exponents(&alg, 3);
        assert_eq!(e.r, 6.0);
        assert_eq!(e.nu, 0.5);
        assert!((e.mu - 1.0 / 6.0).abs() < 1e-15);
    }
}
