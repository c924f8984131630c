//! Sections `S_h(x0) = {u < u(x0) + p . (x - x0) + h}`, their unit-determinant
//! normalizations, engulfing checks and greedy Vitali covers.

use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::AffineMap;
use crate::error::{Error, Result};
use crate::field::{hessian, Analytic, ConvexField, NodeKind, Sym};
use crate::geometry::{self, Ellipse};
use crate::grid::Grid;
use crate::solver::cubic_interpolate;

/// Interior nodes required around every mask node for compact inclusion.
pub const COMPACT_MARGIN: i32 = 2;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Section {
    pub center: usize,
    pub x0: [f64; 3],
    pub u0: f64,
    pub slope: [f64; 3],
    pub height: f64,
    /// Sorted node indices of the mask.
    pub nodes: Vec<u32>,
    /// Convex hull of threshold crossings (2D only).
    pub hull: Vec<[f64; 2]>,
    pub measure: f64,
    pub compact: bool,
}

impl Section {
    pub fn contains(&self, idx: usize) -> bool {
        self.nodes.binary_search(&(idx as u32)).is_ok()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn mask(&self, len: usize) -> Vec<bool> {
        let mut m = vec![false; len];
        for &i in &self.nodes {
            m[i as usize] = true;
        }
        m
    }

    pub fn is_subset_of(&self, other: &Section) -> bool {
        sorted_subset(&self.nodes, &other.nodes)
    }

    pub fn intersects(&self, other: &Section) -> bool {
        sorted_intersect(&self.nodes, &other.nodes)
    }

    /// `u(x) - u(x0) - p . (x - x0)` at a node.
    pub fn excess(&self, u: &ConvexField, idx: usize) -> f64 {
        excess(u, self.x0, self.u0, self.slope, idx)
    }

    /// Node lies in the closed section.
    pub fn closure_contains(&self, u: &ConvexField, idx: usize) -> bool {
        u.usable(idx) && self.excess(u, idx) <= self.height
    }
}

pub fn sorted_subset(a: &[u32], b: &[u32]) -> bool {
    let mut j = 0;
    for &x in a {
        while j < b.len() && b[j] < x {
            j += 1;
        }
        if j == b.len() || b[j] != x {
            return false;
        }
    }
    true
}

pub fn sorted_intersect(a: &[u32], b: &[u32]) -> bool {
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => return true,
        }
    }
    false
}

fn sorted_intersection(a: &[u32], b: &[u32]) -> Vec<u32> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

#[inline]
fn excess(u: &ConvexField, x0: [f64; 3], u0: f64, p: [f64; 3], idx: usize) -> f64 {
    let x = u.grid.point(idx);
    u.values[idx] - u0 - (p[0] * (x[0] - x0[0]) + p[1] * (x[1] - x0[1]) + p[2] * (x[2] - x0[2]))
}

/// Section with the slope taken from the field's gradient at the center.
pub fn compute_section(u: &ConvexField, center: usize, h: f64) -> Result<Section> {
    if !(h > 0.0) {
        return Err(Error::EmptySection { node: center, height: h });
    }
    if u.kind[center] != NodeKind::Interior {
        return Err(Error::EmptySection { node: center, height: h });
    }
    section_with_slope(u, center, u.gradient(center), h)
}

/// Mask, hull and compactness for a prescribed slope.
pub fn section_with_slope(u: &ConvexField, center: usize, slope: [f64; 3], h: f64) -> Result<Section> {
    let g = &u.grid;
    let x0 = g.point(center);
    let u0 = u.values[center];
    let inside = |idx: usize| u.usable(idx) && excess(u, x0, u0, slope, idx) < h;
    let mut nodes: Vec<u32> = Vec::new();
    if g.n == 2 {
        // Rows outward from the center's row; a section ends after two empty rows.
        let nx = g.dims[0];
        let ny = g.dims[1];
        let row0 = g.ijk(center)[1];
        let scan = |j: usize, out: &mut Vec<u32>| -> bool {
            let base = j * nx;
            let before = out.len();
            for i in 0..nx {
                if inside(base + i) {
                    out.push((base + i) as u32);
                }
            }
            out.len() > before
        };
        let mut up: Vec<u32> = Vec::new();
        let mut empty = 0;
        for j in row0..ny {
            if scan(j, &mut up) {
                empty = 0;
            } else {
                empty += 1;
                if empty == 2 {
                    break;
                }
            }
        }
        let mut down: Vec<u32> = Vec::new();
        empty = 0;
        for j in (0..row0).rev() {
            if scan(j, &mut down) {
                empty = 0;
            } else {
                empty += 1;
                if empty == 2 {
                    break;
                }
            }
        }
        nodes.reserve(up.len() + down.len());
        nodes.extend(down);
        nodes.extend(up);
        nodes.sort_unstable();
    } else {
        nodes = (0..g.len()).filter(|&i| inside(i)).map(|i| i as u32).collect();
    }
    if nodes.len() <= 1 {
        return Err(Error::EmptySection { node: center, height: h });
    }
    let compact = nodes.iter().all(|&i| compact_node(u, i as usize));
    let hull = if g.n == 2 { section_hull(u, x0, u0, slope, h, &nodes) } else { Vec::new() };
    let measure = nodes.len() as f64 * g.cell_volume();
    Ok(Section { center, x0, u0, slope, height: h, nodes, hull, measure, compact })
}

fn compact_node(u: &ConvexField, idx: usize) -> bool {
    let g = &u.grid;
    let r = COMPACT_MARGIN;
    let rz = if g.n == 3 { r } else { 0 };
    for dz in -rz..=rz {
        for dy in -r..=r {
            for dx in -r..=r {
                match g.offset(idx, [dx, dy, dz]) {
                    Some(j) if u.kind[j] == NodeKind::Interior => {}
                    _ => return false,
                }
            }
        }
    }
    true
}

/// Hull of the points where the section's threshold crosses grid edges.
fn section_hull(u: &ConvexField, x0: [f64; 3], u0: f64, p: [f64; 3], h: f64, nodes: &[u32]) -> Vec<[f64; 2]> {
    let g = &u.grid;
    let mut pts = Vec::new();
    for &i in nodes {
        let i = i as usize;
        let gi = excess(u, x0, u0, p, i);
        let xi = g.point(i);
        for d in [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0]] {
            match g.offset(i, d) {
                Some(j) if u.usable(j) => {
                    let gj = excess(u, x0, u0, p, j);
                    if gj >= h {
                        let t = ((h - gi) / (gj - gi)).clamp(0.0, 1.0);
                        let xj = g.point(j);
                        pts.push([xi[0] + t * (xj[0] - xi[0]), xi[1] + t * (xj[1] - xi[1])]);
                    }
                }
                _ => pts.push([xi[0], xi[1]]),
            }
        }
    }
    geometry::convex_hull(&pts)
}

/// How the rounding ellipse of a section is found.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EllipseMethod {
    /// Maximum-area inscribed ellipse of the hull.
    #[default]
    Inscribed,
    /// Inertia ellipse of the mask nodes.
    Inertia,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Normalization {
    /// Unit-determinant linear map.
    pub matrix: [[f64; 2]; 2],
    pub det: f64,
    pub r_in: f64,
    pub r_out: f64,
    pub sigma: f64,
    /// `||A||^2`
    pub alpha: f64,
    pub height: f64,
    pub x0: [f64; 3],
    pub method: EllipseMethod,
    pub ellipse: Option<Ellipse>,
}

impl Normalization {
    /// `x -> h^{-1/2} A (x - x0)`.
    pub fn map(&self) -> AffineMap {
        let s = self.height.sqrt().recip();
        let a = &self.matrix;
        let mut m = [[0.0; 3]; 3];
        m[0][0] = s * a[0][0];
        m[0][1] = s * a[0][1];
        m[1][0] = s * a[1][0];
        m[1][1] = s * a[1][1];
        m[2][2] = 1.0;
        let x0 = self.x0;
        let shift = [-(m[0][0] * x0[0] + m[0][1] * x0[1]), -(m[1][0] * x0[0] + m[1][1] * x0[1]), 0.0];
        AffineMap { matrix: m, shift }
    }
}

pub const ELLIPSE_TOL: f64 = 1e-6;

/// Unit-determinant map rounding the section about its center.
pub fn john_normalize(sec: &Section) -> Result<Normalization> {
    normalize_with(sec, EllipseMethod::Inscribed, None)
}

/// `grid` is needed for the inertia method only.
pub fn normalize_with(sec: &Section, method: EllipseMethod, grid: Option<&Grid>) -> Result<Normalization> {
    if sec.hull.len() < 3 || geometry::polygon_area(&sec.hull) <= 0.0 {
        return Err(Error::DegenerateSection(format!("section at node {} spans less than a plane", sec.center)));
    }
    let (a, ellipse) = match method {
        EllipseMethod::Inscribed => {
            let e = geometry::mvie_2d(&sec.hull, ELLIPSE_TOL)?;
            (geometry::rounding_map_2d(&e), Some(e))
        }
        EllipseMethod::Inertia => {
            let g = grid.ok_or_else(|| Error::Config("inertia normalization needs the grid".into()))?;
            let m = sec.nodes.len() as f64;
            let mut c = [0.0; 2];
            for &i in &sec.nodes {
                let p = g.point(i as usize);
                c[0] += p[0] / m;
                c[1] += p[1] / m;
            }
            let mut s = [[0.0; 2]; 2];
            for &i in &sec.nodes {
                let p = g.point(i as usize);
                let d = [p[0] - c[0], p[1] - c[1]];
                for r in 0..2 {
                    for k in 0..2 {
                        s[r][k] += d[r] * d[k] / m;
                    }
                }
            }
            if geometry::det2(&s) <= 0.0 {
                return Err(Error::DegenerateSection(format!("section at node {} is flat", sec.center)));
            }
            let q = geometry::inverse2(&s);
            let e = Ellipse { center: c, q, iterations: 0 };
            (geometry::rounding_map_2d(&e), None)
        }
    };
    finish_normalization(sec, a, method, ellipse, sec.height)
}

fn finish_normalization(
    sec: &Section,
    a: [[f64; 2]; 2],
    method: EllipseMethod,
    ellipse: Option<Ellipse>,
    scale: f64,
) -> Result<Normalization> {
    let (r_in, r_out) = inclusion_radii(&sec.hull, &a, sec.x0);
    if !(r_in > 0.0) {
        return Err(Error::DegenerateSection(format!("center of section {} on its boundary", sec.center)));
    }
    let sh = scale.sqrt();
    let sigma = (r_in / sh).min(sh / r_out);
    Ok(Normalization {
        matrix: a,
        det: geometry::det2(&a),
        r_in,
        r_out,
        sigma,
        alpha: geometry::op_norm2(&a).powi(2),
        height: sec.height,
        x0: sec.x0,
        method,
        ellipse,
    })
}

/// Inner and outer radii about the origin of `A (hull - x0)`.
pub fn inclusion_radii(hull: &[[f64; 2]], a: &[[f64; 2]; 2], x0: [f64; 3]) -> (f64, f64) {
    let mapped: Vec<[f64; 2]> = hull.iter().map(|v| geometry::apply2(a, [v[0] - x0[0], v[1] - x0[1]])).collect();
    let r_out = mapped.iter().map(|p| p[0].hypot(p[1])).fold(0.0, f64::max);
    let r_in = if geometry::in_convex_polygon(&mapped, [0.0, 0.0]) {
        geometry::boundary_distance(&mapped, [0.0, 0.0])
    } else {
        0.0
    };
    (r_in, r_out)
}

/// Applies the rotation `r` on the left of a normalization's map.
pub fn rotate_normalization(sec: &Section, norm: &Normalization, r: [[f64; 2]; 2]) -> Result<Normalization> {
    let a = norm.matrix;
    let m = [
        [r[0][0] * a[0][0] + r[0][1] * a[1][0], r[0][0] * a[0][1] + r[0][1] * a[1][1]],
        [r[1][0] * a[0][0] + r[1][1] * a[1][0], r[1][0] * a[0][1] + r[1][1] * a[1][1]],
    ];
    finish_normalization(sec, m, norm.method, norm.ellipse.clone(), norm.height)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SizePoint {
    pub height: f64,
    pub alpha: f64,
    pub sigma: f64,
    /// `alpha / ||D^2 u(x0)||`
    pub ratio: f64,
}

pub fn normalized_size_curve(u: &ConvexField, center: usize, heights: &[f64]) -> Result<Vec<SizePoint>> {
    let hn = match &u.analytic {
        Some(a) => a.hessian(u.grid.point(center)).norm(),
        None => hessian(u)?.norm[center],
    };
    heights
        .iter()
        .map(|&h| {
            let sec = compute_section(u, center, h)?;
            let nz = john_normalize(&sec)?;
            Ok(SizePoint { height: h, alpha: nz.alpha, sigma: nz.sigma, ratio: nz.alpha / hn })
        })
        .collect()
}

/// `v(T x) = h^{-1} (u(x) - u(x0) - p . (x - x0))` with `T x = h^{-1/2} A (x - x0)`.
pub struct Rescaled {
    pub inner: Arc<dyn Analytic>,
    pub x0: [f64; 3],
    pub u0: f64,
    pub slope: [f64; 3],
    pub height: f64,
    /// `A^{-1}`
    pub inv: [[f64; 2]; 2],
}

impl Rescaled {
    fn preimage(&self, p: [f64; 3]) -> [f64; 3] {
        let s = self.height.sqrt();
        let q = geometry::apply2(&self.inv, [p[0], p[1]]);
        [self.x0[0] + s * q[0], self.x0[1] + s * q[1], 0.0]
    }
}

impl Analytic for Rescaled {
    fn value(&self, p: [f64; 3]) -> f64 {
        let x = self.preimage(p);
        let d = [x[0] - self.x0[0], x[1] - self.x0[1]];
        (self.inner.value(x) - self.u0 - self.slope[0] * d[0] - self.slope[1] * d[1]) / self.height
    }

    fn gradient(&self, p: [f64; 3]) -> [f64; 3] {
        let x = self.preimage(p);
        let g = self.inner.gradient(x);
        let d = [g[0] - self.slope[0], g[1] - self.slope[1]];
        let b = &self.inv;
        let s = self.height.sqrt().recip();
        [s * (b[0][0] * d[0] + b[1][0] * d[1]), s * (b[0][1] * d[0] + b[1][1] * d[1]), 0.0]
    }

    fn hessian(&self, p: [f64; 3]) -> Sym {
        let x = self.preimage(p);
        let h = self.inner.hessian(x);
        let b = &self.inv;
        let m = [[h.get(0, 0), h.get(0, 1)], [h.get(1, 0), h.get(1, 1)]];
        // B^T M B
        let mut r = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    for l in 0..2 {
                        r[i][j] += b[k][i] * m[k][l] * b[l][j];
                    }
                }
            }
        }
        Sym::new2(r[0][0], 0.5 * (r[0][1] + r[1][0]), r[1][1])
    }

    fn describe(&self) -> String {
        format!("rescaled {}", self.inner.describe())
    }
}

/// Resampled normalized field on a grid with `cells` cells per axis covering
/// `T(S_h(x0))` with a margin.
#[derive(Clone, Debug)]
pub struct RescaledField {
    pub field: ConvexField,
    pub map: AffineMap,
    /// Mask of `T(S_h(x0))` on the new grid.
    pub section_mask: Vec<bool>,
}

pub fn rescale_solution(u: &ConvexField, sec: &Section, norm: &Normalization, cells: usize) -> Result<RescaledField> {
    if u.n() != 2 {
        return Err(Error::Config("rescaling is implemented in two dimensions".into()));
    }
    let h = sec.height;
    let inv = geometry::inverse2(&norm.matrix);
    let half = 1.25 * norm.r_out / h.sqrt();
    let grid = Grid::cube(2, half, cells);
    let map = norm.map();
    let s = h.sqrt();
    let pre = |p: [f64; 3]| {
        let q = geometry::apply2(&inv, [p[0], p[1]]);
        [sec.x0[0] + s * q[0], sec.x0[1] + s * q[1], 0.0]
    };
    let (u0, p) = (sec.u0, sec.slope);
    let sampled: Vec<Option<f64>> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let x = pre(grid.point(i));
            let inside = u.domain.as_ref().map_or(true, |d| d.contains(x));
            if !inside {
                return None;
            }
            let v = match &u.analytic {
                Some(a) => Some(a.value(x)),
                None => cubic_interpolate(u, x),
            }?;
            Some((v - u0 - p[0] * (x[0] - sec.x0[0]) - p[1] * (x[1] - sec.x0[1])) / h)
        })
        .collect();
    let mapped_hull: Vec<[f64; 2]> = sec
        .hull
        .iter()
        .map(|v| {
            let q = geometry::apply2(&norm.matrix, [v[0] - sec.x0[0], v[1] - sec.x0[1]]);
            [q[0] / s, q[1] / s]
        })
        .collect();
    let mut kind = vec![NodeKind::Interior; grid.len()];
    let mut values = vec![0.0; grid.len()];
    let mut section_mask = vec![false; grid.len()];
    for i in 0..grid.len() {
        let c = grid.ijk(i);
        let edge = c[0] == 0 || c[1] == 0 || c[0] + 1 == grid.dims[0] || c[1] + 1 == grid.dims[1];
        let pt = grid.point(i);
        let in_sec = geometry::in_convex_polygon(&mapped_hull, [pt[0], pt[1]]);
        match sampled[i] {
            Some(v) => {
                values[i] = v;
                if edge {
                    kind[i] = NodeKind::Boundary;
                }
                section_mask[i] = v < 1.0 && in_sec;
            }
            None => {
                if in_sec {
                    return Err(Error::ResamplingOutOfDomain(format!("node {i} of the rescaled section")));
                }
                kind[i] = NodeKind::Exterior;
            }
        }
    }
    let analytic: Option<Arc<dyn Analytic>> = u.analytic.as_ref().map(|a| {
        Arc::new(Rescaled { inner: a.clone(), x0: sec.x0, u0, slope: p, height: h, inv }) as Arc<dyn Analytic>
    });
    let field = ConvexField {
        grid,
        values,
        kind,
        domain: None,
        dirichlet_zero: false,
        analytic,
        label: format!("{} rescaled at node {} h = {h}", u.label, sec.center),
    };
    Ok(RescaledField { field, map, section_mask })
}

/// One sampled pair for the engulfing properties: `h1 <= h2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionPair {
    pub x1: usize,
    pub h1: f64,
    pub x2: usize,
    pub h2: f64,
}

/// `None` when the premise does not hold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngulfingResult {
    pub pair: SectionPair,
    pub p1: Option<bool>,
    pub p2: Option<bool>,
    pub p3: Option<bool>,
}

impl EngulfingResult {
    pub fn passed(&self) -> bool {
        self.p1 != Some(false) && self.p2 != Some(false) && self.p3 != Some(false)
    }
}

/// Candidates for the property-2 witness, deepest first.
const WITNESS_CANDIDATES: usize = 24;

pub fn engulfing_check(u: &ConvexField, delta: f64, pairs: &[SectionPair]) -> Vec<EngulfingResult> {
    pairs.par_iter().map(|pair| engulf_one(u, delta, pair)).collect()
}

fn engulf_one(u: &ConvexField, delta: f64, pr: &SectionPair) -> EngulfingResult {
    let sec = |x: usize, h: f64| compute_section(u, x, h).ok();
    // Below grid resolution a shrunk section is its center node.
    let small = |x: usize, h: f64| match compute_section(u, x, h) {
        Err(Error::EmptySection { .. }) if u.kind[x] == NodeKind::Interior => Some(point_section(u, x, h)),
        r => r.ok(),
    };
    let mut res = EngulfingResult { pair: *pr, p1: None, p2: None, p3: None };
    let (Some(s1), Some(s2)) = (sec(pr.x1, pr.h1), sec(pr.x2, pr.h2)) else {
        return res;
    };
    let small1 = small(pr.x1, delta * pr.h1);
    let small2 = small(pr.x2, delta * pr.h2);
    if pr.h1 <= pr.h2 {
        if let (Some(a), Some(b)) = (&small1, &small2) {
            if a.intersects(b) {
                res.p1 = Some(a.is_subset_of(&s2));
            }
        }
    }
    let x1_in_2 = s2.closure_contains(u, pr.x1);
    if pr.h1 <= pr.h2 && x1_in_2 {
        let common = sorted_intersection(&s1.nodes, &s2.nodes);
        let mut cand: Vec<(f64, u32)> = common
            .iter()
            .filter(|&&z| u.kind[z as usize] == NodeKind::Interior)
            .map(|&z| {
                let d = (s1.excess(u, z as usize) / s1.height).max(s2.excess(u, z as usize) / s2.height);
                (d, z)
            })
            .collect();
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let found = cand.iter().take(WITNESS_CANDIDATES).any(|&(_, z)| {
            small(z as usize, delta * pr.h1).is_some_and(|w| w.is_subset_of(&s1) && w.is_subset_of(&s2))
        });
        res.p2 = Some(found);
    }
    if x1_in_2 {
        if let (Some(a), Some(b)) = (small(pr.x1, delta * pr.h2), sec(pr.x2, 2.0 * pr.h2)) {
            res.p3 = Some(a.is_subset_of(&b));
        }
    }
    res
}

fn point_section(u: &ConvexField, x: usize, h: f64) -> Section {
    let x0 = u.grid.point(x);
    Section {
        center: x,
        x0,
        u0: u.values[x],
        slope: u.gradient(x),
        height: h,
        nodes: vec![x as u32],
        hull: Vec::new(),
        measure: u.grid.cell_volume(),
        compact: true,
    }
}

/// Smallest dyadic height at which a section holds at least this many nodes.
pub const MIN_SECTION_NODES: usize = 9;

/// Dyadic height range `[lo, hi]` at a center: `S_{2h}` compact at `hi`,
/// at least `MIN_SECTION_NODES` nodes at `lo`.
pub fn height_range(u: &ConvexField, center: usize, top: f64) -> Option<(f64, f64)> {
    let mut h = top;
    let mut hi = None;
    for _ in 0..40 {
        match compute_section(u, center, 2.0 * h) {
            Ok(s) if s.compact => {
                hi = Some(h);
                break;
            }
            Ok(_) => h *= 0.5,
            Err(_) => return None,
        }
    }
    let hi = hi?;
    let mut lo = hi;
    loop {
        match compute_section(u, center, 0.5 * lo) {
            Ok(s) if s.len() >= MIN_SECTION_NODES => lo *= 0.5,
            _ => break,
        }
    }
    if compute_section(u, center, lo).map_or(true, |s| s.len() < MIN_SECTION_NODES) {
        return None;
    }
    Some((lo, hi))
}

fn dyadic_between(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let k = (hi / lo).log2().round().max(0.0) as i32;
    hi * 0.5f64.powi(rng.random_range(0..=k))
}

/// Random pairs with `x1` in the closure of `S_{h2}(x2)` and `h1 = h2 2^{-j}`, `j <= 3`.
pub fn sample_pairs(u: &ConvexField, count: usize, seed: u64) -> Vec<SectionPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let interior: Vec<usize> = (0..u.grid.len()).filter(|&i| u.kind[i] == NodeKind::Interior).collect();
    if interior.is_empty() {
        return Vec::new();
    }
    let top = u.values.iter().map(|v| v.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut pairs = Vec::new();
    let mut tries = 0;
    while pairs.len() < count && tries < 20 * count {
        tries += 1;
        let x2 = *interior.choose(&mut rng).unwrap();
        let Some((lo, hi)) = height_range(u, x2, top) else { continue };
        let h2 = dyadic_between(&mut rng, lo, hi);
        let Ok(s2) = compute_section(u, x2, h2) else { continue };
        let x1 = s2.nodes[rng.random_range(0..s2.nodes.len())] as usize;
        if u.kind[x1] != NodeKind::Interior {
            continue;
        }
        let h1 = h2 * 0.5f64.powi(rng.random_range(0..=3));
        match compute_section(u, x1, h1) {
            Ok(s1) if s1.compact => pairs.push(SectionPair { x1, h1, x2, h2 }),
            _ => {}
        }
    }
    pairs
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DeltaEstimate {
    pub delta: f64,
    pub pairs: usize,
    /// `(delta, failing pairs)` for every tested value.
    pub tested: Vec<(f64, usize)>,
}

/// Exponents searched: `delta = 2^{-k}` for `k` in this range.
pub const DELTA_EXPONENTS: std::ops::RangeInclusive<i32> = 1..=12;

pub fn estimate_delta(u: &ConvexField, samples: usize, seed: u64) -> Result<DeltaEstimate> {
    let pairs = sample_pairs(u, samples, seed);
    delta_for_pairs(u, &pairs)
}

pub fn delta_for_pairs(u: &ConvexField, pairs: &[SectionPair]) -> Result<DeltaEstimate> {
    if pairs.is_empty() {
        return Err(Error::NoPassingDelta("no resolvable section pairs".into()));
    }
    let mut tested = Vec::new();
    let mut fails = |k: i32| {
        let d = 0.5f64.powi(k);
        let f = engulfing_check(u, d, pairs).iter().filter(|r| !r.passed()).count();
        tested.push((d, f));
        f
    };
    let (mut lo, mut hi) = (*DELTA_EXPONENTS.start(), *DELTA_EXPONENTS.end());
    if fails(hi) > 0 {
        return Err(Error::NoPassingDelta(format!("engulfing fails at delta = 2^-{hi}")));
    }
    if fails(lo) == 0 {
        hi = lo;
    }
    // Invariant: 2^-hi passes, 2^-lo fails.
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if fails(mid) == 0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    tested.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(DeltaEstimate { delta: 0.5f64.powi(hi), pairs: pairs.len(), tested })
}

/// Largest power of two not above `h`.
pub fn dyadic_floor(h: f64) -> f64 {
    2f64.powi(h.log2().floor() as i32)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoverEntry {
    pub center: usize,
    pub x0: [f64; 3],
    pub height: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VitaliCover {
    pub selected: Vec<CoverEntry>,
    pub delta: f64,
    pub uncovered: Vec<usize>,
    /// Candidates whose shrinkage met a selected one without being engulfed:
    /// `(candidate center, selected center)`.
    pub conflicts: Vec<(usize, usize)>,
    /// Targets whose assigned section could not be built.
    pub skipped: Vec<usize>,
    #[serde(skip)]
    pub sections: Vec<Section>,
    #[serde(skip)]
    pub shrunk: Vec<Section>,
}

/// Greedy cover of `targets` by `S_{h(x)}(x)`, `h` rounded down to a power of two.
pub fn vitali_cover(u: &ConvexField, targets: &[usize], height: &(dyn Fn(usize) -> f64 + Sync), delta: f64) -> Result<VitaliCover> {
    let built: Vec<(usize, Option<(Section, Section)>)> = targets
        .par_iter()
        .map(|&x| {
            let h = dyadic_floor(height(x));
            let full = compute_section(u, x, h).ok();
            let small = compute_section(u, x, delta * h).ok();
            (x, full.zip(small))
        })
        .collect();
    let mut skipped = Vec::new();
    let mut cands: Vec<(Section, Section)> = Vec::new();
    for (x, s) in built {
        match s {
            Some(pair) => cands.push(pair),
            None => skipped.push(x),
        }
    }
    let g = &u.grid;
    cands.sort_by(|a, b| {
        b.0.height.total_cmp(&a.0.height).then_with(|| {
            let (p, q) = (g.point(a.0.center), g.point(b.0.center));
            p[0].total_cmp(&q[0]).then(p[1].total_cmp(&q[1])).then(p[2].total_cmp(&q[2]))
        })
    });
    cands.dedup_by(|a, b| a.0.center == b.0.center && a.0.height == b.0.height);
    let mut owner: Vec<u32> = vec![u32::MAX; g.len()];
    let mut sections = Vec::new();
    let mut shrunk = Vec::new();
    let mut conflicts = Vec::new();
    for (full, small) in cands {
        let hit = small.nodes.iter().map(|&i| owner[i as usize]).find(|o| *o != u32::MAX);
        match hit {
            None => {
                let id = sections.len() as u32;
                for &i in &small.nodes {
                    owner[i as usize] = id;
                }
                sections.push(full);
                shrunk.push(small);
            }
            Some(o) => {
                let sel: &Section = &sections[o as usize];
                if !small.is_subset_of(sel) {
                    conflicts.push((small.center, sel.center));
                }
            }
        }
    }
    let mut covered = vec![false; g.len()];
    for s in &sections {
        for &i in &s.nodes {
            covered[i as usize] = true;
        }
    }
    let uncovered: Vec<usize> = targets.iter().copied().filter(|&x| !covered[x]).collect();
    let selected = sections.iter().map(|s| CoverEntry { center: s.center, x0: s.x0, height: s.height }).collect();
    let cover = VitaliCover { selected, delta, uncovered, conflicts, skipped, sections, shrunk };
    if !cover.uncovered.is_empty() {
        return Err(Error::CoverageGap {
            uncovered: cover.uncovered.clone(),
            pair: cover.conflicts.first().copied(),
        });
    }
    Ok(cover)
}

impl VitaliCover {
    /// Exact pairwise disjointness of the shrunk masks.
    pub fn shrunk_disjoint(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        self.shrunk.iter().all(|s| s.nodes.iter().all(|i| seen.insert(*i)))
    }
}
