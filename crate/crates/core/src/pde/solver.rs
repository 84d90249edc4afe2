//! Preconditioned conjugate gradients.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grid::{Bc, GridField};
use super::multigrid::Multigrid;
use super::operator::DivFormSystem;
use crate::error::{Error, Result};
use crate::numeric::{det_dot, det_sum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preconditioner {
    Jacobi,
    Multigrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub rel_tol: f64,
    pub max_iter: usize,
    pub preconditioner: Preconditioner,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-9,
            max_iter: 20_000,
            preconditioner: Preconditioner::Multigrid,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.rel_tol <= 1e-3) {
            return Err(Error::InvalidConfig(format!(
                "rel_tol must lie in (0, 1e-3], got {}",
                self.rel_tol
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig("max_iter must be positive".into()));
        }
        Ok(())
    }

    pub fn jacobi(rel_tol: f64) -> Self {
        Self {
            rel_tol,
            preconditioner: Preconditioner::Jacobi,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    /// `|b - A x| / |b|` recomputed from the returned field.
    pub relative_residual: f64,
    /// Mean removed from a periodic right-hand side.
    pub rhs_projection: f64,
    pub multigrid_levels: usize,
}

/// A prepared solver; the multigrid hierarchy is built once and reused
/// across right-hand sides.
pub struct Solver<'a> {
    sys: &'a DivFormSystem,
    cfg: SolverConfig,
    mg: Option<Multigrid>,
    inv_diag: Vec<f64>,
}

impl<'a> Solver<'a> {
    pub fn new(sys: &'a DivFormSystem, cfg: SolverConfig) -> Result<Self> {
        cfg.validate()?;
        let mg = (cfg.preconditioner == Preconditioner::Multigrid).then(|| Multigrid::new(sys));
        let inv_diag = sys.diagonal().into_iter().map(|v| 1.0 / v).collect();
        Ok(Self { sys, cfg, mg, inv_diag })
    }

    fn precondition(&self, r: &[f64]) -> Vec<f64> {
        let mut z = match &self.mg {
            Some(mg) => mg.apply(self.sys, r),
            None => r.par_iter().zip(&self.inv_diag).map(|(a, b)| a * b).collect(),
        };
        self.project(&mut z);
        z
    }

    fn project(&self, v: &mut [f64]) -> f64 {
        if self.sys.grid.bc != Bc::Periodic {
            return 0.0;
        }
        let m = det_sum(v) / v.len() as f64;
        v.par_iter_mut().for_each(|x| *x -= m);
        m
    }

    /// Solves `A x = rhs`.
    pub fn solve(&self, rhs: &[f64]) -> Result<(GridField, SolveReport)> {
        let g = &self.sys.grid;
        if rhs.len() != g.len() {
            return Err(Error::GridMismatch(format!(
                "rhs has {} entries, grid has {} nodes",
                rhs.len(),
                g.len()
            )));
        }
        let mut b: Vec<f64> = rhs
            .par_iter()
            .enumerate()
            .map(|(i, v)| if g.is_active(i) { *v } else { 0.0 })
            .collect();
        let projection = self.project(&mut b);
        let levels = self.mg.as_ref().map_or(0, |m| m.levels());
        let bnorm = det_dot(&b, &b).sqrt();
        let mut x = vec![0.0; b.len()];
        if bnorm == 0.0 {
            return Ok((
                GridField::new(g, x)?,
                SolveReport {
                    iterations: 0,
                    relative_residual: 0.0,
                    rhs_projection: projection,
                    multigrid_levels: levels,
                },
            ));
        }
        let mut r = b.clone();
        let mut z = self.precondition(&r);
        let mut p = z.clone();
        let mut rz = det_dot(&r, &z);
        let mut ap = vec![0.0; b.len()];
        let mut iterations = 0;
        let tol = self.cfg.rel_tol;
        while iterations < self.cfg.max_iter {
            self.sys.apply(&p, &mut ap);
            let pap = det_dot(&p, &ap);
            if !(pap > 0.0) {
                break;
            }
            let alpha = rz / pap;
            x.par_iter_mut().zip(&p).for_each(|(xi, pi)| *xi += alpha * pi);
            r.par_iter_mut().zip(&ap).for_each(|(ri, ai)| *ri -= alpha * ai);
            iterations += 1;
            let rel = det_dot(&r, &r).sqrt() / bnorm;
            if rel <= tol {
                break;
            }
            z = self.precondition(&r);
            let rz_new = det_dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            p.par_iter_mut().zip(&z).for_each(|(pi, zi)| *pi = zi + beta * *pi);
        }
        self.project(&mut x);
        // true residual of the returned field
        self.sys.apply(&x, &mut ap);
        let res: Vec<f64> = b.iter().zip(&ap).map(|(bi, ai)| bi - ai).collect();
        let rel = det_dot(&res, &res).sqrt() / bnorm;
        if rel > 10.0 * tol {
            return Err(Error::NotConverged {
                iterations,
                best_residual: rel,
            });
        }
        Ok((
            GridField::new(g, x)?,
            SolveReport {
                iterations,
                relative_residual: rel,
                rhs_projection: projection,
                multigrid_levels: levels,
            },
        ))
    }
}

/// One-shot solve of `A x = rhs`.
pub fn solve(sys: &DivFormSystem, rhs: &[f64], cfg: &SolverConfig) -> Result<(GridField, SolveReport)> {
    Solver::new(sys, *cfg)?.solve(rhs)
}
