//! Discrete norms and gradients on grid-aligned sub-boxes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grid::{Bc, GridField, UniformGrid};
use crate::error::Result;
use crate::geometry::BoundingBox;
use crate::numeric::det_sum_by;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub l2: f64,
    /// Seminorm from the centred-difference nodal gradient.
    pub h1_semi: f64,
}

/// Centred-difference gradient at every node (one-sided at Dirichlet
/// boundary nodes, wrapped when periodic).
pub fn gradient(field: &GridField) -> Vec<GridField> {
    let g = &field.grid;
    let h = g.h();
    let u = &field.values;
    (0..g.dim)
        .map(|k| {
            let values = (0..g.len())
                .into_par_iter()
                .map(|i| match (g.neighbor(i, k, -1), g.neighbor(i, k, 1)) {
                    (Some(a), Some(b)) => (u[b] - u[a]) / (2.0 * h),
                    (None, Some(b)) => (u[b] - u[i]) / h,
                    (Some(a), None) => (u[i] - u[a]) / h,
                    (None, None) => 0.0,
                })
                .collect();
            GridField {
                grid: g.clone(),
                values,
            }
        })
        .collect()
}

/// Trapezoid weights (relative to `h^d`) of the nodes of `ranges`.
fn node_weight(g: &UniformGrid, ranges: &[(usize, usize)], flat: usize) -> f64 {
    let c = g.coords(flat);
    let mut w = 1.0;
    for k in 0..g.dim {
        let (a, b) = ranges[k];
        if c[k] < a || c[k] > b {
            return 0.0;
        }
        // a full periodic box has no boundary
        let full_periodic = g.bc == Bc::Periodic && a == 0 && b == g.n - 1;
        if !full_periodic && (c[k] == a || c[k] == b) && a != b {
            w *= 0.5;
        }
    }
    w
}

/// `(∫_sub v^2)^{1/2}` for node values `v` by the trapezoid rule.
pub fn l2_norm_on(g: &UniformGrid, values: &[f64], sub: &BoundingBox) -> Result<f64> {
    let ranges = g.aligned_range(sub)?;
    let hd = g.h().powi(g.dim as i32);
    Ok((hd * det_sum_by(g.len(), |i| node_weight(g, &ranges, i) * values[i] * values[i])).sqrt())
}

/// L² norm, H¹ seminorm and the gradient field restricted to `sub`.
pub fn norms_and_gradient(field: &GridField, sub: &BoundingBox) -> Result<(NormReport, Vec<GridField>)> {
    let g = &field.grid;
    let ranges = g.aligned_range(sub)?;
    let grad = gradient(field);
    let hd = g.h().powi(g.dim as i32);
    let l2 = (hd * det_sum_by(g.len(), |i| node_weight(g, &ranges, i) * field.values[i].powi(2))).sqrt();
    let h1 = (hd
        * det_sum_by(g.len(), |i| {
            let w = node_weight(g, &ranges, i);
            if w == 0.0 {
                return 0.0;
            }
            w * grad.iter().map(|gk| gk.values[i].powi(2)).sum::<f64>()
        }))
    .sqrt();
    Ok((NormReport { l2, h1_semi: h1 }, grad))
}

/// `(Σ_faces (D_k u)^2 w h^d)^{1/2}` over faces inside `sub`, with
/// half weights on faces lying in a transverse boundary plane of `sub`.
pub fn face_h1_seminorm(g: &UniformGrid, values: &[f64], sub: &BoundingBox) -> Result<f64> {
    let ranges = g.aligned_range(sub)?;
    let h = g.h();
    let hd = h.powi(g.dim as i32);
    let total: f64 = (0..g.dim)
        .map(|k| {
            det_sum_by(g.len(), |i| {
                if !g.face_valid(i, k) {
                    return 0.0;
                }
                let c = g.coords(i);
                let mut w = 1.0;
                for a in 0..g.dim {
                    let (lo, hi) = ranges[a];
                    if a == k {
                        if c[a] < lo || c[a] >= hi {
                            return 0.0;
                        }
                    } else {
                        if c[a] < lo || c[a] > hi {
                            return 0.0;
                        }
                        if (c[a] == lo || c[a] == hi) && lo != hi {
                            w *= 0.5;
                        }
                    }
                }
                let j = g.neighbor(i, k, 1).expect("valid face has an upper node");
                w * ((values[j] - values[i]) / h).powi(2)
            })
        })
        .sum();
    Ok((hd * total).sqrt())
}
