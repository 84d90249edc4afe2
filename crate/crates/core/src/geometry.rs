//! Dyadic defect point set, its implicit Voronoi diagram and the dilated
//! cells `W_p`.
//!
//! Points are `x_p = (sign(p_i) 2^{|p_i|})_i` for indices `p` whose nonzero
//! components satisfy `max |p_i| <= C0 + min |p_i|`. Points are grouped in
//! shells by `|p| = max_i |p_i|`; a point of shell `n >= 1` has Euclidean norm
//! in `[2^n, sqrt(d) 2^n]`, which bounds every nearest-point scan.
//!
//! Voronoi cells are never built explicitly. A query point belongs to the
//! cell of its nearest defect; ties are broken by the smaller shell, then by
//! lexicographic index order.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{fit_line, LineFit};
use crate::sampling;

/// Integer index `p` of a defect point.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LatticeIndex(pub Vec<i32>);

impl LatticeIndex {
    pub fn origin(dim: usize) -> Self {
        Self(vec![0; dim])
    }

    /// Max-norm `|p|`.
    pub fn norm(&self) -> u32 {
        self.0.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_origin(&self) -> bool {
        self.0.iter().all(|&v| v == 0)
    }
}

impl fmt::Display for LatticeIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (k, v) in self.0.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, ")")
    }
}

/// Membership in the index set: `max |p_i| <= c0 + min |p_i|` over nonzero
/// components. The all-zero index is a member.
pub fn in_index_set(p: &[i32], c0: f64) -> bool {
    let mut lo = u32::MAX;
    let mut hi = 0u32;
    for &v in p {
        let a = v.unsigned_abs();
        if a != 0 {
            lo = lo.min(a);
            hi = hi.max(a);
        }
    }
    if hi == 0 {
        return true;
    }
    hi as f64 <= c0 + lo as f64
}

/// Coordinates `(sign(p_i) 2^{|p_i|})_i` with `sign(0) = 0`.
pub fn dyadic_point(p: &[i32]) -> Vec<f64> {
    p.iter()
        .map(|&v| match v.signum() {
            0 => 0.0,
            s => s as f64 * 2f64.powi(v.abs()),
        })
        .collect()
}

/// Exact squared Euclidean norm of a dyadic point.
pub fn dyadic_norm_sq(p: &[i32]) -> u128 {
    p.iter()
        .filter(|v| **v != 0)
        .map(|v| 1u128 << (2 * v.unsigned_abs()))
        .sum()
}

/// Source of a shell-structured point family. Only the dyadic set ships.
pub trait DefectGenerator: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    /// Indices of shell `n`, sorted lexicographically.
    fn shell(&self, n: u32) -> Vec<LatticeIndex>;
    fn point(&self, p: &LatticeIndex) -> Vec<f64>;
    fn contains(&self, p: &LatticeIndex) -> bool;
    /// Bounds on the Euclidean norm of the points of shell `n`.
    fn shell_norm_bounds(&self, n: u32) -> (f64, f64);
}

/// The dyadic generator with constant `c0 > 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dyadic {
    pub dim: usize,
    pub c0: f64,
}

impl DefectGenerator for Dyadic {
    fn dim(&self) -> usize {
        self.dim
    }

    fn shell(&self, n: u32) -> Vec<LatticeIndex> {
        if n == 0 {
            return vec![LatticeIndex::origin(self.dim)];
        }
        let lo = ((n as f64 - self.c0).ceil().max(1.0)) as u32;
        let mut magnitudes = vec![0i32];
        magnitudes.extend((lo..=n).map(|m| m as i32));
        let mut out = Vec::new();
        let mut cur = vec![0i32; self.dim];
        fn rec(k: usize, cur: &mut Vec<i32>, mags: &[i32], n: u32, c0: f64, out: &mut Vec<LatticeIndex>) {
            if k == cur.len() {
                let idx = LatticeIndex(cur.clone());
                if idx.norm() == n && in_index_set(&idx.0, c0) {
                    out.push(idx);
                }
                return;
            }
            for &m in mags {
                if m == 0 {
                    cur[k] = 0;
                    rec(k + 1, cur, mags, n, c0, out);
                } else {
                    for s in [-1, 1] {
                        cur[k] = s * m;
                        rec(k + 1, cur, mags, n, c0, out);
                    }
                }
            }
        }
        rec(0, &mut cur, &magnitudes, n, self.c0, &mut out);
        out.sort();
        out
    }

    fn point(&self, p: &LatticeIndex) -> Vec<f64> {
        dyadic_point(&p.0)
    }

    fn contains(&self, p: &LatticeIndex) -> bool {
        p.dim() == self.dim && in_index_set(&p.0, self.c0)
    }

    fn shell_norm_bounds(&self, n: u32) -> (f64, f64) {
        if n == 0 {
            (0.0, 0.0)
        } else {
            let s = 2f64.powi(n as i32);
            (s, (self.dim as f64).sqrt() * s)
        }
    }
}

#[derive(Debug)]
struct Shell {
    indices: Vec<LatticeIndex>,
    /// Flat coordinates, `dim` per point.
    coords: Vec<f64>,
}

/// Raw handle of an enumerated defect: `(shell, position in shell)`.
pub type DefectId = (u32, usize);

/// Result of a nearest-defect query.
#[derive(Debug, Clone, PartialEq)]
pub struct Nearest {
    pub index: LatticeIndex,
    pub distance: f64,
}

/// Axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoundingBox {
    pub fn contains(&self, y: &[f64]) -> bool {
        y.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (a, b))| *v >= *a && *v <= *b)
    }

    pub fn diameter(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| (b - a).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }

    /// Scales the box about `center` by `factor`.
    pub fn scaled_about(&self, center: &[f64], factor: f64) -> Self {
        Self {
            lo: self.lo.iter().zip(center).map(|(a, c)| c + factor * (a - c)).collect(),
            hi: self.hi.iter().zip(center).map(|(b, c)| c + factor * (b - c)).collect(),
        }
    }

    pub fn expanded(&self, margin: f64) -> Self {
        Self {
            lo: self.lo.iter().map(|a| a - margin).collect(),
            hi: self.hi.iter().map(|b| b + margin).collect(),
        }
    }
}

/// The infinite defect family, enumerated up to shell `index_bound`.
///
/// Queries that would need shells beyond the bound fail with
/// [`Error::Uncertified`] instead of silently truncating.
#[derive(Debug, Clone)]
pub struct DefectPointSet {
    generator: Arc<dyn DefectGenerator>,
    index_bound: u32,
    shells: Arc<Vec<Shell>>,
    c0: f64,
}

impl DefectPointSet {
    /// Dyadic set in dimension `dim` with constant `c0 > 1`.
    pub fn dyadic(dim: usize, c0: f64, index_bound: u32) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("dimension must be at least 1".into()));
        }
        if !(c0 > 1.0) {
            return Err(Error::InvalidConfig(format!("C0 must exceed 1, got {c0}")));
        }
        if index_bound > 60 {
            return Err(Error::InvalidConfig(format!(
                "index bound {index_bound} exceeds the exact-arithmetic range (60)"
            )));
        }
        Ok(Self::with_generator(Arc::new(Dyadic { dim, c0 }), c0, index_bound))
    }

    pub fn with_generator(generator: Arc<dyn DefectGenerator>, c0: f64, index_bound: u32) -> Self {
        let dim = generator.dim();
        let shells = (0..=index_bound)
            .map(|n| {
                let indices = generator.shell(n);
                let coords = indices.iter().flat_map(|p| generator.point(p)).collect();
                debug_assert!(indices.iter().all(|p| p.dim() == dim));
                Shell { indices, coords }
            })
            .collect();
        Self {
            generator,
            index_bound,
            shells: Arc::new(shells),
            c0,
        }
    }

    pub fn dim(&self) -> usize {
        self.generator.dim()
    }

    pub fn c0(&self) -> f64 {
        self.c0
    }

    pub fn index_bound(&self) -> u32 {
        self.index_bound
    }

    pub fn generator(&self) -> &dyn DefectGenerator {
        self.generator.as_ref()
    }

    /// Same generator re-enumerated with another bound.
    pub fn with_index_bound(&self, index_bound: u32) -> Self {
        Self::with_generator(self.generator.clone(), self.c0, index_bound)
    }

    pub fn contains(&self, p: &LatticeIndex) -> bool {
        self.generator.contains(p)
    }

    /// Defect coordinates of `p`; rejects indices outside the set.
    pub fn point_of(&self, p: &LatticeIndex) -> Result<Vec<f64>> {
        if !self.contains(p) {
            return Err(Error::NotInIndexSet {
                index: p.0.clone(),
                c0: self.c0,
            });
        }
        Ok(self.generator.point(p))
    }

    /// Indices of shell `n` (enumerated on demand past the bound).
    pub fn shell(&self, n: u32) -> Vec<LatticeIndex> {
        match self.shells.get(n as usize) {
            Some(s) => s.indices.clone(),
            None => self.generator.shell(n),
        }
    }

    /// All enumerated indices with `|p| <= max_shell` (capped at the bound).
    pub fn indices_up_to(&self, max_shell: u32) -> Vec<LatticeIndex> {
        (0..=max_shell.min(self.index_bound))
            .flat_map(|n| self.shells[n as usize].indices.iter().cloned())
            .collect()
    }

    pub fn len_enumerated(&self) -> usize {
        self.shells.iter().map(|s| s.indices.len()).sum()
    }

    pub fn index_of(&self, id: DefectId) -> &LatticeIndex {
        &self.shells[id.0 as usize].indices[id.1]
    }

    pub fn coords_of(&self, id: DefectId) -> &[f64] {
        let d = self.dim();
        &self.shells[id.0 as usize].coords[id.1 * d..(id.1 + 1) * d]
    }

    /// Locates `p` among the enumerated shells.
    pub fn id_of(&self, p: &LatticeIndex) -> Option<DefectId> {
        let n = p.norm();
        let shell = self.shells.get(n as usize)?;
        shell.indices.binary_search(p).ok().map(|k| (n, k))
    }

    fn scan_shell(&self, n: u32, y: &[f64], exclude: Option<DefectId>, best: &mut Option<(f64, DefectId)>) {
        let d = y.len();
        let shell = &self.shells[n as usize];
        for (k, c) in shell.coords.chunks_exact(d).enumerate() {
            if exclude == Some((n, k)) {
                continue;
            }
            let mut d2 = 0.0;
            for i in 0..d {
                let t = y[i] - c[i];
                d2 += t * t;
            }
            let better = match best {
                None => true,
                Some((bd, bid)) => d2 < *bd || (d2 == *bd && (n, k) < *bid),
            };
            if better {
                *best = Some((d2, (n, k)));
            }
        }
    }

    /// Core nearest scan, optionally skipping one defect.
    fn nearest_scan(&self, y: &[f64], exclude: Option<DefectId>) -> Result<(DefectId, f64)> {
        assert_eq!(y.len(), self.dim(), "query dimension mismatch");
        let r = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        let bound = self.index_bound;
        // shell whose norm range is closest to |y| goes first
        let start = if r < 1.0 {
            0
        } else {
            (r.log2().floor() as u32).min(bound)
        };
        let mut best: Option<(f64, DefectId)> = None;
        self.scan_shell(start, y, exclude, &mut best);
        for n in 0..=bound {
            if n == start {
                continue;
            }
            let bd = best.map(|b| b.0.sqrt()).unwrap_or(f64::INFINITY);
            let (lo, hi) = self.generator.shell_norm_bounds(n);
            if lo - r > bd {
                break;
            }
            if r - hi > bd {
                continue;
            }
            self.scan_shell(n, y, exclude, &mut best);
        }
        let (d2, id) = best.ok_or(Error::Uncertified {
            norm: r,
            needed: bound + 1,
            bound,
        })?;
        let dist = d2.sqrt();
        let (next_lo, _) = self.generator.shell_norm_bounds(bound + 1);
        if next_lo - r <= dist {
            let needed = ((r + dist).log2().floor().max(0.0)) as u32;
            return Err(Error::Uncertified {
                norm: r,
                needed: needed.max(bound + 1),
                bound,
            });
        }
        Ok((id, dist))
    }

    /// Raw nearest-defect handle and distance.
    pub fn nearest_id(&self, y: &[f64]) -> Result<(DefectId, f64)> {
        self.nearest_scan(y, None)
    }

    /// Nearest defect other than `exclude`.
    pub fn nearest_excluding(&self, y: &[f64], exclude: DefectId) -> Result<(DefectId, f64)> {
        self.nearest_scan(y, Some(exclude))
    }

    /// Index of the Voronoi cell containing `y`, with the distance to its defect.
    pub fn nearest_defect(&self, y: &[f64]) -> Result<Nearest> {
        let (id, distance) = self.nearest_id(y)?;
        Ok(Nearest {
            index: self.index_of(id).clone(),
            distance,
        })
    }

    /// Whether `y` lies in `W_p`, the image of `V_p` under the homothety of
    /// center `x_p` and ratio 3/2.
    pub fn in_dilated_cell(&self, p: &LatticeIndex, y: &[f64]) -> Result<bool> {
        let x = self.point_of(p)?;
        let pulled: Vec<f64> = x.iter().zip(y).map(|(c, v)| c + 2.0 / 3.0 * (v - c)).collect();
        Ok(self.nearest_defect(&pulled)?.index == *p)
    }

    /// Number of defects with `2^n <= |x| < 2^{n+1}` (exact integer arithmetic,
    /// shells enumerated on demand).
    pub fn count_in_annulus(&self, n: u32) -> usize {
        let d = self.dim() as f64;
        let lowest = (n as f64 - d.log2() / 2.0).floor().max(0.0) as u32;
        let lo = 1u128 << (2 * n);
        let hi = 1u128 << (2 * (n + 1));
        (lowest..=n)
            .flat_map(|k| self.shell(k))
            .filter(|p| {
                let s = dyadic_norm_sq(&p.0);
                s >= lo && s < hi
            })
            .count()
    }

    /// Distance from `x_p` to the rest of the set, `D(x_p, G \ {x_p})`.
    pub fn separation(&self, p: &LatticeIndex) -> Result<f64> {
        let id = self.id_of(p).ok_or(Error::Uncertified {
            norm: f64::NAN,
            needed: p.norm(),
            bound: self.index_bound,
        })?;
        let y = self.coords_of(id).to_vec();
        Ok(self.nearest_excluding(&y, id)?.1)
    }

    /// Indices whose cells meet `B_R(x0)`.
    ///
    /// Every defect inside the ball is taken exactly (`x_p` lies in its own
    /// cell). A convex cell meeting the ball with its defect outside must cross
    /// the sphere, so the rest is found by classifying sphere samples, plus
    /// interior samples and `x0` itself. Candidates are restricted to
    /// `B_{8 max(R,1)}(x0)`. Cells touching the ball only in a sliver thinner
    /// than the sphere sampling may be missed.
    pub fn cells_intersecting_ball(&self, x0: &[f64], radius: f64) -> Result<BTreeSet<LatticeIndex>> {
        assert!(radius > 0.0, "radius must be positive");
        let d = self.dim();
        let r0 = x0.iter().map(|v| v * v).sum::<f64>().sqrt();
        let reach = 8.0 * radius.max(1.0);
        let mut out = BTreeSet::new();
        // defects inside the ball
        let mut n = 0u32;
        loop {
            let (lo, hi) = self.generator.shell_norm_bounds(n);
            if lo > r0 + radius {
                break;
            }
            if hi >= r0 - radius {
                for p in self.shell(n) {
                    let x = self.generator.point(&p);
                    let dist: f64 = x.iter().zip(x0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    if dist <= radius {
                        out.insert(p);
                    }
                }
            }
            n += 1;
        }
        let sphere_count = match d {
            1 => 2,
            2 => 4096,
            _ => 8192,
        };
        let mut samples = sampling::sphere_points(x0, radius, sphere_count);
        samples.extend(sampling::ball_points(x0, radius, 1024 * d));
        samples.push(x0.to_vec());
        for s in samples {
            let near = self.nearest_defect(&s)?;
            let x = self.generator.point(&near.index);
            let dist: f64 = x.iter().zip(x0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if dist <= reach {
                out.insert(near.index);
            }
        }
        Ok(out)
    }

    /// A box certified to contain `V_p`.
    ///
    /// In 1D the cell is the exact interval between midpoints. In 2D, for
    /// indices with both components nonzero, the closed-form box
    /// `[2^{|p1|-1}, 2^{|p|+1}] x [2^{|p2|-1}, 2^{|p|+1}]` (reflected by sign)
    /// is used. Otherwise the extent is measured by sampling a cube around
    /// `x_p`, which is enlarged until no cell sample touches its boundary.
    pub fn cell_bounding_box(&self, p: &LatticeIndex) -> Result<BoundingBox> {
        let x = self.point_of(p)?;
        let d = self.dim();
        if d == 1 {
            return self.interval_cell_1d(p);
        }
        if let Some(b) = inclusion_box(p) {
            return Ok(b);
        }
        let (lo, hi) = self.sampled_cell_extent(p, 4096)?;
        let width = lo.iter().zip(&hi).map(|(a, b)| b - a).fold(0.0, f64::max);
        let grow = 0.05 * width.max(1.0);
        let _ = x;
        Ok(BoundingBox { lo, hi }.expanded(grow))
    }

    fn interval_cell_1d(&self, p: &LatticeIndex) -> Result<BoundingBox> {
        let x = self.point_of(p)?[0];
        let id = self.id_of(p).ok_or(Error::Uncertified {
            norm: x.abs(),
            needed: p.norm() + 1,
            bound: self.index_bound,
        })?;
        // neighbours on each side: scan the adjacent shells
        let mut left = f64::NEG_INFINITY;
        let mut right = f64::INFINITY;
        let n = p.norm();
        let hi_shell = (n + 1).min(self.index_bound);
        if n + 1 > self.index_bound {
            return Err(Error::Uncertified {
                norm: x.abs(),
                needed: n + 1,
                bound: self.index_bound,
            });
        }
        for k in 0..=hi_shell {
            for (j, c) in self.shells[k as usize].coords.iter().enumerate() {
                if (k, j) == id {
                    continue;
                }
                if *c < x {
                    left = left.max(*c);
                } else if *c > x {
                    right = right.min(*c);
                }
            }
        }
        Ok(BoundingBox {
            lo: vec![0.5 * (left + x)],
            hi: vec![0.5 * (x + right)],
        })
    }

    /// Bounding box of sampled points of `V_p`, searched in a cube around `x_p`
    /// that doubles until the samples stay clear of its boundary.
    pub fn sampled_cell_extent(&self, p: &LatticeIndex, samples: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = self.point_of(p)?;
        let d = self.dim();
        let mut half = 2f64.powi(p.norm() as i32 + 1).max(2.0);
        for _ in 0..6 {
            let lo: Vec<f64> = x.iter().map(|c| c - half).collect();
            let hi: Vec<f64> = x.iter().map(|c| c + half).collect();
            let mut elo = x.clone();
            let mut ehi = x.clone();
            for y in sampling::box_points(&lo, &hi, samples) {
                if self.nearest_defect(&y)?.index == *p {
                    for k in 0..d {
                        elo[k] = elo[k].min(y[k]);
                        ehi[k] = ehi[k].max(y[k]);
                    }
                }
            }
            let spacing = 2.0 * half / (samples as f64).powf(1.0 / d as f64);
            let clear = (0..d).all(|k| elo[k] > lo[k] + 2.0 * spacing && ehi[k] < hi[k] - 2.0 * spacing);
            if clear {
                return Ok((elo, ehi));
            }
            half *= 2.0;
        }
        Err(Error::CellNotEnclosed { index: p.0.clone() })
    }
}

/// Closed-form 2D enclosure of `V_p` for indices with both components nonzero.
pub fn inclusion_box(p: &LatticeIndex) -> Option<BoundingBox> {
    if p.dim() != 2 || p.0.contains(&0) {
        return None;
    }
    let m = p.norm() as i32;
    let top = 2f64.powi(m + 1);
    let mut lo = Vec::with_capacity(2);
    let mut hi = Vec::with_capacity(2);
    for &v in &p.0 {
        let bottom = 2f64.powi(v.abs() - 1);
        if v > 0 {
            lo.push(bottom);
            hi.push(top);
        } else {
            lo.push(-top);
            hi.push(-bottom);
        }
    }
    Some(BoundingBox { lo, hi })
}

/// Line fit `slope * log2(R) + intercept` of a cell count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellCountFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

impl From<LineFit> for CellCountFit {
    fn from(f: LineFit) -> Self {
        Self {
            slope: f.slope,
            intercept: f.intercept,
            r2: f.r2,
        }
    }
}

/// Measured geometric constants of a defect set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryCertificate {
    pub dim: usize,
    pub c0: f64,
    pub index_bound: u32,
    /// Bounds of `(1 + |x_p|) / D(x_p, G \ {x_p})` over `p != 0`.
    pub h2_ratio_min: f64,
    pub h2_ratio_max: f64,
    /// `(1 + sqrt(d)) 2^{C0 + 1}`.
    pub h2_ratio_bound: f64,
    /// Max of `Diam(V_p) / D(x_p, G \ {x_p})` with box-diameter surrogate.
    pub h3_ratio_max: f64,
    /// Max of `|box(V_p)| / 2^{d |p|}` (finite cell volumes).
    pub h1_volume_ratio_max: f64,
    /// `annulus_counts[n]` = number of defects with `2^n <= |x| < 2^{n+1}`.
    pub annulus_counts: Vec<usize>,
    pub annulus_count_max: usize,
    pub cell_count_radii_log2: Vec<u32>,
    pub cell_counts: Vec<usize>,
    pub cell_count_fit: CellCountFit,
    pub inclusion_samples: usize,
    pub inclusion_violations: usize,
}

/// Options of [`certify_assumptions`].
#[derive(Debug, Clone, Copy)]
pub struct CertifyOptions {
    /// Halton samples drawn around each 2D inclusion box.
    pub inclusion_samples_per_cell: usize,
    /// Samples used for sampled cell extents.
    pub extent_samples: usize,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self {
            inclusion_samples_per_cell: 2048,
            extent_samples: 4096,
        }
    }
}

/// Measures the geometric assumptions over all `|p| <= index_bound` of `set`.
///
/// Fails with [`Error::InclusionViolation`] if any sampled point of a 2D cell
/// falls outside its closed-form box.
pub fn certify_assumptions(set: &DefectPointSet, opts: CertifyOptions) -> Result<GeometryCertificate> {
    let bound = set.index_bound();
    if bound < 4 {
        return Err(Error::InvalidConfig(format!(
            "index bound must be at least 4, got {bound}"
        )));
    }
    let d = set.dim();
    // separation is measured against shells up to bound + 2
    let wide = set.with_index_bound(bound + 3);
    let mut h2_min = f64::INFINITY;
    let mut h2_max: f64 = 0.0;
    let mut h3_max: f64 = 0.0;
    let mut h1_max: f64 = 0.0;
    let mut inclusion_samples = 0usize;
    let mut violations = 0usize;
    let mut first_violation: Option<(Vec<i32>, Vec<f64>)> = None;

    for p in set.indices_up_to(bound) {
        let sep = wide.separation(&p)?;
        let x = set.point_of(&p)?;
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !p.is_origin() {
            let ratio = (1.0 + norm) / sep;
            h2_min = h2_min.min(ratio);
            h2_max = h2_max.max(ratio);
        }
        let cell_box = if d == 2 { inclusion_box(&p) } else { None };
        let bbox = match cell_box {
            Some(b) => {
                let region = b.scaled_about(&center_of(&b), 1.5);
                for y in sampling::box_points(&region.lo, &region.hi, opts.inclusion_samples_per_cell) {
                    if wide.nearest_defect(&y)?.index == p {
                        inclusion_samples += 1;
                        if !b.contains(&y) {
                            violations += 1;
                            first_violation.get_or_insert((p.0.clone(), y.clone()));
                        }
                    }
                }
                b
            }
            None if d == 1 => wide.cell_bounding_box(&p)?,
            None => {
                let (lo, hi) = wide.sampled_cell_extent(&p, opts.extent_samples)?;
                BoundingBox { lo, hi }
            }
        };
        h3_max = h3_max.max(bbox.diameter() / sep);
        h1_max = h1_max.max(bbox.volume() / 2f64.powi((d as u32 * p.norm()) as i32));
    }
    if violations > 0 {
        let (index, point) = first_violation.unwrap_or_default();
        return Err(Error::InclusionViolation {
            count: violations,
            index,
            point,
        });
    }
    let annulus_counts: Vec<usize> = (0..=bound).map(|n| set.count_in_annulus(n)).collect();
    let top = bound.saturating_sub(2).max(5);
    let radii: Vec<u32> = (4..=top).collect();
    let mut counts = Vec::with_capacity(radii.len());
    let origin = vec![0.0; d];
    for &k in &radii {
        counts.push(wide.cells_intersecting_ball(&origin, 2f64.powi(k as i32))?.len());
    }
    let xs: Vec<f64> = radii.iter().map(|&k| k as f64).collect();
    let ys: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let fit = fit_line(&xs, &ys).map(CellCountFit::from).unwrap_or(CellCountFit {
        slope: f64::NAN,
        intercept: f64::NAN,
        r2: f64::NAN,
    });
    Ok(GeometryCertificate {
        dim: d,
        c0: set.c0(),
        index_bound: bound,
        h2_ratio_min: h2_min,
        h2_ratio_max: h2_max,
        h2_ratio_bound: (1.0 + (d as f64).sqrt()) * 2f64.powf(set.c0() + 1.0),
        h3_ratio_max: h3_max,
        h1_volume_ratio_max: h1_max,
        annulus_count_max: annulus_counts.iter().copied().max().unwrap_or(0),
        annulus_counts,
        cell_count_radii_log2: radii,
        cell_counts: counts,
        cell_count_fit: fit,
        inclusion_samples,
        inclusion_violations: violations,
    })
}

fn center_of(b: &BoundingBox) -> Vec<f64> {
    b.lo.iter().zip(&b.hi).map(|(a, c)| 0.5 * (a + c)).collect()
}

/// One row of an exhaustion check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExhaustionRow {
    pub n: u32,
    pub separation: f64,
    /// Radius `c 2^n` of the ball tested inside `V_{p_n} - x_{p_n}`.
    pub radius: f64,
    pub contained: bool,
}

/// Report of [`exhaustion_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExhaustionReport {
    /// `c = min_n D_n / 2^{n+1}`, shrunk by a relative 1e-9 so ball
    /// boundaries never sit on a Voronoi tie.
    pub c: f64,
    pub rows: Vec<ExhaustionRow>,
    pub nested: bool,
    /// First `n` from which the centred box `[-3, 3]^d` lies in every ball.
    pub box_exhausted_from: Option<u32>,
}

impl ExhaustionReport {
    pub fn holds(&self) -> bool {
        self.nested && self.box_exhausted_from.is_some() && self.rows.iter().all(|r| r.contained)
    }
}

/// Checks that the recentred cells `V_{n e_axis} - x_{n e_axis}` contain
/// balls `B_{c 2^n}` that are nested and eventually swallow `[-3, 3]^d`.
pub fn exhaustion_check(set: &DefectPointSet, axis: usize, n_min: u32, n_max: u32) -> Result<ExhaustionReport> {
    let d = set.dim();
    if axis >= d {
        return Err(Error::InvalidConfig(format!(
            "axis {axis} out of range for dimension {d}"
        )));
    }
    if n_max < 2 || n_min > n_max {
        return Err(Error::InvalidConfig(format!("invalid shell range {n_min}..={n_max}")));
    }
    let wide = set.with_index_bound(set.index_bound().max(n_max + 3));
    let mut seps = Vec::new();
    for n in n_min..=n_max {
        let mut p = vec![0i32; d];
        p[axis] = n as i32;
        seps.push(wide.separation(&LatticeIndex(p))?);
    }
    let c = (n_min..=n_max)
        .zip(&seps)
        .map(|(n, s)| s / 2f64.powi(n as i32 + 1))
        .fold(f64::INFINITY, f64::min)
        * (1.0 - 1e-9);
    let mut rows = Vec::new();
    for (n, &sep) in (n_min..=n_max).zip(&seps) {
        let mut p = vec![0i32; d];
        p[axis] = n as i32;
        let idx = LatticeIndex(p);
        let x = wide.point_of(&idx)?;
        let radius = c * 2f64.powi(n as i32);
        let mut pts = sampling::sphere_points(&x, radius, 512);
        pts.extend(sampling::ball_points(&x, radius, 512));
        let mut contained = true;
        for y in pts {
            if wide.nearest_defect(&y)?.index != idx {
                contained = false;
                break;
            }
        }
        rows.push(ExhaustionRow {
            n,
            separation: sep,
            radius,
            contained,
        });
    }
    let nested = rows.windows(2).all(|w| w[0].radius < w[1].radius);
    let needed = 3.0 * (d as f64).sqrt();
    let box_exhausted_from = rows.iter().find(|r| r.radius >= needed).map(|r| r.n);
    Ok(ExhaustionReport {
        c,
        rows,
        nested,
        box_exhausted_from,
    })
}

/// Smallest `min_{q != p} |y - x_q| / |x_p|` over sampled `y` in `W_p`.
pub fn dilated_separation(set: &DefectPointSet, p: &LatticeIndex, samples: usize) -> Result<f64> {
    let x = set.point_of(p)?;
    let id = set.id_of(p).ok_or(Error::Uncertified {
        norm: f64::NAN,
        needed: p.norm(),
        bound: set.index_bound(),
    })?;
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
    let cell = set.cell_bounding_box(p)?;
    let region = cell.scaled_about(&x, 1.5);
    let mut best = f64::INFINITY;
    for y in sampling::box_points(&region.lo, &region.hi, samples) {
        if set.in_dilated_cell(p, &y)? {
            let (_, dist) = set.nearest_excluding(&y, id)?;
            best = best.min(dist / norm);
        }
    }
    Ok(best)
}
