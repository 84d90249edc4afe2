//! Geometric multigrid V-cycle used as a CG preconditioner.
//!
//! Coarse operators are rediscretised from the fine coefficient samples:
//! a coarse face takes the harmonic mean of the two fine faces it spans,
//! smoothed transversally with weights (1/4, 1/2, 1/4); coarse cell
//! coefficients average the fine cells they contain. Transfer operators are
//! multilinear interpolation `P` and full weighting `R = P^T / 2^d`, the
//! smoother is weighted Jacobi with the same number of pre- and
//! post-sweeps, and the coarsest level is solved by dense Cholesky. The
//! cycle is therefore a fixed symmetric linear operator.

use nalgebra::{Cholesky, DMatrix, Dyn};
use rayon::prelude::*;

use super::grid::{Bc, UniformGrid};
use super::operator::{AssemblyMeta, DivFormSystem};

/// Largest coarsest level handed to the dense factorisation.
const DENSE_LIMIT: usize = 1500;

struct Level {
    sys: DivFormSystem,
    inv_diag: Vec<f64>,
}

enum Coarsest {
    Dense {
        chol: Cholesky<f64, Dyn>,
        active: Vec<usize>,
    },
    Sweeps(usize),
}

pub struct Multigrid {
    /// Coarse levels; level 0 is the caller's fine system.
    coarse: Vec<Level>,
    fine_inv_diag: Vec<f64>,
    coarsest: Coarsest,
    omega: f64,
    sweeps: usize,
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Rediscretised coarse system, if the grid can be halved.
pub fn coarsen_system(sys: &DivFormSystem) -> Option<DivFormSystem> {
    let fine = &sys.grid;
    if !fine.n.is_multiple_of(2) || fine.n / 2 < 2 {
        return None;
    }
    let coarse = fine.coarse_unchecked();
    let d = fine.dim;
    let nf = fine.nodes_per_axis() as isize;
    let wrap = |v: isize| -> usize {
        match fine.bc {
            Bc::Periodic => v.rem_euclid(nf) as usize,
            Bc::Dirichlet => v.clamp(0, nf - 1) as usize,
        }
    };
    let fine_flat = |c: &[isize]| -> usize { c.iter().take(d).fold(0, |acc, &v| acc * nf as usize + wrap(v)) };
    let offsets: Vec<[isize; 3]> = (0..3usize.pow(d as u32))
        .map(|mut t| {
            let mut o = [0isize; 3];
            for slot in o.iter_mut().take(d) {
                *slot = (t % 3) as isize - 1;
                t /= 3;
            }
            o
        })
        .collect();
    let face_coef = (0..d)
        .map(|k| {
            (0..coarse.len())
                .into_par_iter()
                .map(|ci| {
                    if !coarse.face_valid(ci, k) {
                        return 0.0;
                    }
                    let c = coarse.coords(ci);
                    let mut acc = 0.0;
                    let mut wsum = 0.0;
                    for o in &offsets {
                        if o[k] != 0 {
                            continue;
                        }
                        let mut w = 1.0;
                        let mut f = [0isize; 3];
                        for a in 0..d {
                            f[a] = 2 * c[a] as isize + o[a];
                            if a != k {
                                w *= if o[a] == 0 { 0.5 } else { 0.25 };
                            }
                        }
                        let f0 = fine_flat(&f);
                        f[k] += 1;
                        let f1 = fine_flat(&f);
                        acc += w * harmonic(sys.face_coef[k][f0], sys.face_coef[k][f1]);
                        wsum += w;
                    }
                    acc / wsum
                })
                .collect()
        })
        .collect();
    let cell_coef = sys.cell_coef.as_ref().map(|cc| {
        cc.iter()
            .map(|arr| {
                (0..coarse.len())
                    .into_par_iter()
                    .map(|ci| {
                        if !coarse.cell_valid(ci) {
                            return 0.0;
                        }
                        let c = coarse.coords(ci);
                        let mut acc = 0.0;
                        for b in 0..(1usize << d) {
                            let mut f = [0isize; 3];
                            for a in 0..d {
                                f[a] = 2 * c[a] as isize + ((b >> a) & 1) as isize;
                            }
                            acc += arr[fine_flat(&f)];
                        }
                        acc / (1usize << d) as f64
                    })
                    .collect()
            })
            .collect()
    });
    Some(DivFormSystem {
        meta: AssemblyMeta {
            coefficient_hash: String::new(),
            h: coarse.h(),
            ..sys.meta.clone()
        },
        grid: coarse,
        face_coef,
        cell_coef,
    })
}

fn inv_diag(sys: &DivFormSystem) -> Vec<f64> {
    sys.diagonal().into_iter().map(|v| 1.0 / v).collect()
}

fn project_mean(g: &UniformGrid, v: &mut [f64]) {
    if g.bc == Bc::Periodic {
        let m = crate::numeric::det_sum(v) / v.len() as f64;
        v.par_iter_mut().for_each(|x| *x -= m);
    }
}

impl Multigrid {
    pub fn new(fine: &DivFormSystem) -> Self {
        let d = fine.grid.dim;
        let mut omega = match d {
            1 => 2.0 / 3.0,
            2 => 0.8,
            _ => 6.0 / 7.0,
        };
        if fine.cell_coef.is_some() {
            omega *= 0.7;
        }
        let mut coarse: Vec<Level> = Vec::new();
        loop {
            let cur = coarse.last().map_or(fine, |l| &l.sys);
            if cur.grid.unknowns() <= DENSE_LIMIT {
                break;
            }
            let Some(next) = coarsen_system(cur) else { break };
            coarse.push(Level {
                inv_diag: inv_diag(&next),
                sys: next,
            });
        }
        let last = coarse.last().map_or(fine, |l| &l.sys);
        let coarsest = if last.grid.unknowns() <= DENSE_LIMIT {
            let (a, active) = last.to_csr();
            let mut m: DMatrix<f64> = a.to_dense();
            if last.grid.bc == Bc::Periodic {
                let alpha = m.trace() / (m.nrows() * m.nrows()) as f64;
                m.add_scalar_mut(alpha);
            }
            match Cholesky::new(m) {
                Some(chol) => Coarsest::Dense { chol, active },
                None => Coarsest::Sweeps(60),
            }
        } else {
            Coarsest::Sweeps(60)
        };
        Self {
            coarse,
            fine_inv_diag: inv_diag(fine),
            coarsest,
            omega,
            sweeps: 2,
        }
    }

    pub fn levels(&self) -> usize {
        self.coarse.len() + 1
    }

    fn level<'a>(&'a self, fine: &'a DivFormSystem, l: usize) -> (&'a DivFormSystem, &'a [f64]) {
        if l == 0 {
            (fine, &self.fine_inv_diag)
        } else {
            let lv = &self.coarse[l - 1];
            (&lv.sys, &lv.inv_diag)
        }
    }

    fn smooth(&self, sys: &DivFormSystem, inv_diag: &[f64], b: &[f64], x: &mut [f64], sweeps: usize) {
        let mut ax = vec![0.0; x.len()];
        for _ in 0..sweeps {
            sys.apply(x, &mut ax);
            x.par_iter_mut()
                .zip(ax.par_iter().zip(b).zip(inv_diag))
                .enumerate()
                .for_each(|(i, (xi, ((a, bi), di)))| {
                    if sys.grid.is_active(i) {
                        *xi += self.omega * di * (bi - a);
                    }
                });
        }
    }

    /// One V-cycle applied to `b` on the fine system `fine`.
    pub fn apply(&self, fine: &DivFormSystem, b: &[f64]) -> Vec<f64> {
        self.cycle(fine, 0, b)
    }

    fn cycle(&self, fine: &DivFormSystem, l: usize, b: &[f64]) -> Vec<f64> {
        let (sys, dinv) = self.level(fine, l);
        let g = &sys.grid;
        if l == self.coarse.len() {
            return self.solve_coarsest(sys, dinv, b);
        }
        let mut x = vec![0.0; b.len()];
        self.smooth(sys, dinv, b, &mut x, self.sweeps);
        let mut r = vec![0.0; b.len()];
        sys.apply(&x, &mut r);
        r.par_iter_mut().zip(b).for_each(|(ri, bi)| *ri = bi - *ri);
        let (csys, _) = self.level(fine, l + 1);
        let mut rc = restrict(g, &csys.grid, &r);
        project_mean(&csys.grid, &mut rc);
        let ec = self.cycle(fine, l + 1, &rc);
        prolong_add(&csys.grid, g, &ec, &mut x);
        self.smooth(sys, dinv, b, &mut x, self.sweeps);
        x
    }

    fn solve_coarsest(&self, sys: &DivFormSystem, dinv: &[f64], b: &[f64]) -> Vec<f64> {
        match &self.coarsest {
            Coarsest::Dense { chol, active } => {
                let rhs = nalgebra::DVector::from_iterator(active.len(), active.iter().map(|&i| b[i]));
                let sol = chol.solve(&rhs);
                let mut x = vec![0.0; b.len()];
                for (k, &i) in active.iter().enumerate() {
                    x[i] = sol[k];
                }
                project_mean(&sys.grid, &mut x);
                x
            }
            Coarsest::Sweeps(n) => {
                let mut x = vec![0.0; b.len()];
                self.smooth(sys, dinv, b, &mut x, *n);
                project_mean(&sys.grid, &mut x);
                x
            }
        }
    }
}

/// Full weighting `R = P^T / 2^d` at the active coarse nodes.
pub fn restrict(fine: &UniformGrid, coarse: &UniformGrid, r: &[f64]) -> Vec<f64> {
    let d = fine.dim;
    let nf = fine.nodes_per_axis() as isize;
    let norm = 1.0 / (1usize << d) as f64;
    (0..coarse.len())
        .into_par_iter()
        .map(|ci| {
            if !coarse.is_active(ci) {
                return 0.0;
            }
            let c = coarse.coords(ci);
            let mut acc = 0.0;
            for t in 0..3usize.pow(d as u32) {
                let mut tt = t;
                let mut w = 1.0;
                let mut flat = 0usize;
                for a in 0..d {
                    let o = (tt % 3) as isize - 1;
                    tt /= 3;
                    if o != 0 {
                        w *= 0.5;
                    }
                    let f = (2 * c[a] as isize + o).rem_euclid(nf) as usize;
                    flat = flat * nf as usize + f;
                }
                acc += w * r[flat];
            }
            acc * norm
        })
        .collect()
}

/// `x += P e` with multilinear interpolation.
pub fn prolong_add(coarse: &UniformGrid, fine: &UniformGrid, e: &[f64], x: &mut [f64]) {
    let d = fine.dim;
    let nc = coarse.nodes_per_axis();
    x.par_iter_mut().enumerate().for_each(|(fi, xi)| {
        if !fine.is_active(fi) {
            return;
        }
        let f = fine.coords(fi);
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut flat = 0usize;
            let mut skip = false;
            for a in 0..d {
                let bit = (corner >> a) & 1;
                let (idx, wa) = if f[a].is_multiple_of(2) {
                    if bit == 1 {
                        skip = true;
                        break;
                    }
                    (f[a] / 2, 1.0)
                } else {
                    ((f[a] / 2 + bit) % nc, 0.5)
                };
                w *= wa;
                flat = flat * nc + idx;
            }
            if !skip {
                acc += w * e[flat];
            }
        }
        *xi += acc;
    });
}
