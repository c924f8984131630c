use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::DomainSpec;
use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum NodeKind {
    Interior = 0,
    Boundary = 1,
    Exterior = 2,
}

/// Symmetric matrix stored as (xx, yy, zz, xy, xz, yz); unused entries stay zero in 2D.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Sym {
    pub n: usize,
    pub a: [f64; 6],
}

impl Sym {
    pub fn new2(xx: f64, xy: f64, yy: f64) -> Sym {
        Sym { n: 2, a: [xx, yy, 0.0, xy, 0.0, 0.0] }
    }

    pub fn new3(xx: f64, yy: f64, zz: f64, xy: f64, xz: f64, yz: f64) -> Sym {
        Sym { n: 3, a: [xx, yy, zz, xy, xz, yz] }
    }

    pub fn diag(n: usize, d: [f64; 3]) -> Sym {
        let mut a = [0.0; 6];
        a[..n].copy_from_slice(&d[..n]);
        Sym { n, a }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        match (i.min(j), i.max(j)) {
            (0, 0) => self.a[0],
            (1, 1) => self.a[1],
            (2, 2) => self.a[2],
            (0, 1) => self.a[3],
            (0, 2) => self.a[4],
            _ => self.a[5],
        }
    }

    pub fn scaled(&self, t: f64) -> Sym {
        let mut s = *self;
        for v in s.a.iter_mut() {
            *v *= t;
        }
        s
    }

    pub fn trace(&self) -> f64 {
        self.a[..self.n].iter().sum()
    }

    pub fn det(&self) -> f64 {
        if self.n == 2 {
            self.a[0] * self.a[1] - self.a[3] * self.a[3]
        } else {
            self.matrix3().determinant()
        }
    }

    fn matrix3(&self) -> Matrix3<f64> {
        let a = &self.a;
        Matrix3::new(a[0], a[3], a[4], a[3], a[1], a[5], a[4], a[5], a[2])
    }

    /// Eigenvalues in ascending order (third entry unused in 2D).
    pub fn eigenvalues(&self) -> [f64; 3] {
        if self.n == 2 {
            let m = 0.5 * (self.a[0] + self.a[1]);
            let r = (0.25 * (self.a[0] - self.a[1]).powi(2) + self.a[3] * self.a[3]).sqrt();
            [m - r, m + r, 0.0]
        } else {
            let e = self.matrix3().symmetric_eigen().eigenvalues;
            let mut v = [e[0], e[1], e[2]];
            v.sort_by(|a, b| a.total_cmp(b));
            v
        }
    }

    pub fn min_eig(&self) -> f64 {
        self.eigenvalues()[0]
    }

    pub fn max_eig(&self) -> f64 {
        self.eigenvalues()[self.n - 1]
    }

    /// Operator norm: largest absolute eigenvalue.
    pub fn norm(&self) -> f64 {
        let e = self.eigenvalues();
        e[0].abs().max(e[self.n - 1].abs())
    }

    /// `v^T S v` for a vector in the first n coordinates.
    pub fn quad(&self, v: [f64; 3]) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                s += v[i] * self.get(i, j) * v[j];
            }
        }
        s
    }
}

/// Closed-form field with exact derivatives, attached to sampled fields.
pub trait Analytic: Send + Sync {
    fn value(&self, p: [f64; 3]) -> f64;
    fn gradient(&self, p: [f64; 3]) -> [f64; 3];
    fn hessian(&self, p: [f64; 3]) -> Sym;
    fn describe(&self) -> String;
}

/// `u(x) = x^T M x / 2 + b . x + c`.
#[derive(Clone, Debug)]
pub struct Quadratic {
    pub m: Sym,
    pub b: [f64; 3],
    pub c: f64,
}

impl Analytic for Quadratic {
    fn value(&self, p: [f64; 3]) -> f64 {
        0.5 * self.m.quad(p) + (0..self.m.n).map(|i| self.b[i] * p[i]).sum::<f64>() + self.c
    }
    fn gradient(&self, p: [f64; 3]) -> [f64; 3] {
        let mut g = [0.0; 3];
        for (i, gi) in g.iter_mut().enumerate().take(self.m.n) {
            *gi = self.b[i] + (0..self.m.n).map(|j| self.m.get(i, j) * p[j]).sum::<f64>();
        }
        g
    }
    fn hessian(&self, _p: [f64; 3]) -> Sym {
        self.m
    }
    fn describe(&self) -> String {
        format!("quadratic {:?}", self.m.a)
    }
}

/// Node values on a grid, with node classification relative to the domain.
#[derive(Clone)]
pub struct ConvexField {
    pub grid: Grid,
    pub values: Vec<f64>,
    pub kind: Vec<NodeKind>,
    pub domain: Option<DomainSpec>,
    /// Values vanish on the domain boundary (Dirichlet solutions).
    pub dirichlet_zero: bool,
    pub analytic: Option<Arc<dyn Analytic>>,
    pub label: String,
}

impl fmt::Debug for ConvexField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConvexField")
            .field("label", &self.label)
            .field("grid", &self.grid)
            .field("analytic", &self.analytic.as_ref().map(|a| a.describe()))
            .finish()
    }
}

/// Interior where the domain contains the node and it is off the grid edge,
/// exterior outside the domain, boundary on the grid edge.
pub fn classify(grid: &Grid, domain: Option<&DomainSpec>) -> Vec<NodeKind> {
    (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let p = grid.point(idx);
            if let Some(d) = domain {
                if !d.contains(p) {
                    return NodeKind::Exterior;
                }
            }
            let c = grid.ijk(idx);
            let edge = (0..grid.n).any(|a| c[a] == 0 || c[a] + 1 == grid.dims[a]);
            if edge {
                NodeKind::Boundary
            } else {
                NodeKind::Interior
            }
        })
        .collect()
}

impl ConvexField {
    pub fn from_fn<F>(grid: Grid, domain: Option<DomainSpec>, label: &str, f: F) -> ConvexField
    where
        F: Fn([f64; 3]) -> f64 + Sync,
    {
        let kind = classify(&grid, domain.as_ref());
        let values = (0..grid.len())
            .into_par_iter()
            .map(|i| if kind[i] == NodeKind::Exterior { 0.0 } else { f(grid.point(i)) })
            .collect();
        ConvexField { grid, values, kind, domain, dirichlet_zero: false, analytic: None, label: label.to_string() }
    }

    pub fn from_analytic(grid: Grid, domain: Option<DomainSpec>, a: Arc<dyn Analytic>) -> ConvexField {
        let label = a.describe();
        let b = a.clone();
        let mut u = ConvexField::from_fn(grid, domain, &label, move |p| b.value(p));
        u.analytic = Some(a);
        u
    }

    pub fn n(&self) -> usize {
        self.grid.n
    }

    #[inline]
    pub fn usable(&self, idx: usize) -> bool {
        self.kind[idx] != NodeKind::Exterior
    }

    pub fn interior_count(&self) -> usize {
        self.kind.iter().filter(|k| **k == NodeKind::Interior).count()
    }

    /// Centered-difference gradient; the exact gradient when the field is analytic.
    pub fn gradient(&self, idx: usize) -> [f64; 3] {
        if let Some(a) = &self.analytic {
            return a.gradient(self.grid.point(idx));
        }
        let mut g = [0.0; 3];
        for (ax, ga) in g.iter_mut().enumerate().take(self.grid.n) {
            let mut e = [0i32; 3];
            e[ax] = 1;
            let mut m = [0i32; 3];
            m[ax] = -1;
            let s = self.grid.spacing[ax];
            let up = self.grid.offset(idx, e).filter(|j| self.usable(*j));
            let dn = self.grid.offset(idx, m).filter(|j| self.usable(*j));
            *ga = match (up, dn) {
                (Some(a), Some(b)) => (self.values[a] - self.values[b]) / (2.0 * s),
                (Some(a), None) => (self.values[a] - self.values[idx]) / s,
                (None, Some(b)) => (self.values[idx] - self.values[b]) / s,
                (None, None) => 0.0,
            };
        }
        g
    }

    /// Multiplies values by `c`, keeping the analytic tag only when `c == 1`.
    pub fn scaled(&self, c: f64) -> ConvexField {
        let mut u = self.clone();
        u.values.iter_mut().for_each(|v| *v *= c);
        if c != 1.0 {
            u.analytic = None;
        }
        u
    }
}

#[derive(Clone, Debug)]
pub struct HessianField {
    pub grid: Grid,
    pub h: Vec<Sym>,
    pub norm: Vec<f64>,
    /// Node has a usable stencil (interior nodes only).
    pub valid: Vec<bool>,
    /// A one-sided fallback was used.
    pub one_sided: Vec<bool>,
}

impl HessianField {
    /// Valid nodes whose full stencil is centered.
    pub fn centered(&self, idx: usize) -> bool {
        self.valid[idx] && !self.one_sided[idx]
    }
}

/// Central second differences, symmetrized cross differences, one-sided
/// fallback next to excluded nodes.
pub fn discrete_hessian(u: &ConvexField) -> Result<HessianField> {
    let g = &u.grid;
    let n = g.n;
    let rows: Vec<(Sym, bool, bool)> = (0..g.len())
        .into_par_iter()
        .map(|idx| {
            if u.kind[idx] != NodeKind::Interior {
                return (Sym { n, a: [0.0; 6] }, false, false);
            }
            let val = |d: [i32; 3]| -> Option<f64> {
                g.offset(idx, d).filter(|j| u.usable(*j)).map(|j| u.values[j])
            };
            let u0 = u.values[idx];
            let mut m = [[0.0; 3]; 3];
            let mut one_sided = false;
            for a in 0..n {
                let s = g.spacing[a];
                let mut e = [0i32; 3];
                e[a] = 1;
                let neg = [-e[0], -e[1], -e[2]];
                let two = [2 * e[0], 2 * e[1], 2 * e[2]];
                let mtwo = [-two[0], -two[1], -two[2]];
                let d2 = match (val(e), val(neg)) {
                    (Some(p), Some(q)) => Some((p - 2.0 * u0 + q) / (s * s)),
                    _ => {
                        one_sided = true;
                        match (val(e), val(two), val(neg), val(mtwo)) {
                            (Some(p), Some(pp), _, _) => Some((u0 - 2.0 * p + pp) / (s * s)),
                            (_, _, Some(q), Some(qq)) => Some((u0 - 2.0 * q + qq) / (s * s)),
                            _ => None,
                        }
                    }
                };
                match d2 {
                    Some(v) => m[a][a] = v,
                    None => return (Sym { n, a: [0.0; 6] }, false, false),
                }
                for b in (a + 1)..n {
                    let sb = g.spacing[b];
                    let off = |sa: i32, sbb: i32| {
                        let mut d = [0i32; 3];
                        d[a] = sa;
                        d[b] = sbb;
                        d
                    };
                    let c = match (val(off(1, 1)), val(off(1, -1)), val(off(-1, 1)), val(off(-1, -1))) {
                        (Some(pp), Some(pm), Some(mp), Some(mm)) => Some((pp - pm - mp + mm) / (4.0 * s * sb)),
                        _ => {
                            one_sided = true;
                            let mut found = None;
                            for (sa, sbb) in [(1, 1), (1, -1), (-1, 1), (-1, -1)] {
                                if let (Some(x1), Some(x2), Some(x3)) =
                                    (val(off(sa, sbb)), val(off(sa, 0)), val(off(0, sbb)))
                                {
                                    found = Some((x1 - x2 - x3 + u0) / ((sa * sbb) as f64 * s * sb));
                                    break;
                                }
                            }
                            found
                        }
                    };
                    match c {
                        Some(v) => {
                            m[a][b] = v;
                            m[b][a] = v;
                        }
                        None => return (Sym { n, a: [0.0; 6] }, false, false),
                    }
                }
            }
            let sym = if n == 2 {
                Sym::new2(m[0][0], m[0][1], m[1][1])
            } else {
                Sym::new3(m[0][0], m[1][1], m[2][2], m[0][1], m[0][2], m[1][2])
            };
            (sym, true, one_sided)
        })
        .collect();
    if !rows.iter().any(|r| r.1 && !r.2) {
        return Err(Error::InsufficientStencil("no interior node has a centered stencil".into()));
    }
    let h: Vec<Sym> = rows.iter().map(|r| r.0).collect();
    let norm = h.par_iter().map(|s| s.norm()).collect();
    Ok(HessianField {
        grid: g.clone(),
        h,
        norm,
        valid: rows.iter().map(|r| r.1).collect(),
        one_sided: rows.iter().map(|r| r.2).collect(),
    })
}

/// Exact Hessian at interior nodes, when the field carries one.
pub fn analytic_hessian(u: &ConvexField) -> Option<HessianField> {
    let a = u.analytic.as_ref()?;
    let g = &u.grid;
    let h: Vec<Sym> = (0..g.len())
        .into_par_iter()
        .map(|i| if u.kind[i] == NodeKind::Interior { a.hessian(g.point(i)) } else { Sym { n: g.n, a: [0.0; 6] } })
        .collect();
    let norm = h.par_iter().map(|s| s.norm()).collect();
    Some(HessianField {
        grid: g.clone(),
        h,
        norm,
        valid: u.kind.iter().map(|k| *k == NodeKind::Interior).collect(),
        one_sided: vec![false; g.len()],
    })
}

/// Exact Hessian when available, discrete otherwise.
pub fn hessian(u: &ConvexField) -> Result<HessianField> {
    match analytic_hessian(u) {
        Some(h) => Ok(h),
        None => discrete_hessian(u),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvexityReport {
    pub tol: f64,
    pub checked_nodes: usize,
    /// (node, direction, undivided second difference)
    pub violations: Vec<(usize, [i32; 3], f64)>,
}

impl ConvexityReport {
    pub fn is_convex(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn violated_nodes(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.violations.iter().map(|x| x.0).collect();
        v.dedup();
        v
    }
}

/// Axis and diagonal directions used by the convexity check.
pub fn convexity_directions(n: usize) -> Vec<[i32; 3]> {
    let mut dirs = Vec::new();
    for a in 0..n {
        let mut e = [0; 3];
        e[a] = 1;
        dirs.push(e);
    }
    for a in 0..n {
        for b in (a + 1)..n {
            for s in [1, -1] {
                let mut e = [0; 3];
                e[a] = 1;
                e[b] = s;
                dirs.push(e);
            }
        }
    }
    dirs
}

/// Undivided second differences below `-tol`; default tol is `1e-8 * |u|_inf`.
pub fn check_convexity(u: &ConvexField, tol: Option<f64>) -> ConvexityReport {
    let sup = u
        .values
        .iter()
        .zip(&u.kind)
        .filter(|(_, k)| **k != NodeKind::Exterior)
        .fold(0.0f64, |m, (v, _)| m.max(v.abs()));
    let tol = tol.unwrap_or(1e-8 * sup);
    let dirs = convexity_directions(u.grid.n);
    let per_node: Vec<(bool, Vec<(usize, [i32; 3], f64)>)> = (0..u.grid.len())
        .into_par_iter()
        .map(|idx| {
            if u.kind[idx] != NodeKind::Interior {
                return (false, Vec::new());
            }
            let mut out = Vec::new();
            let mut checked = false;
            for d in &dirs {
                let m = [-d[0], -d[1], -d[2]];
                let p = u.grid.offset(idx, *d).filter(|j| u.usable(*j));
                let q = u.grid.offset(idx, m).filter(|j| u.usable(*j));
                if let (Some(p), Some(q)) = (p, q) {
                    checked = true;
                    let s = u.values[p] - 2.0 * u.values[idx] + u.values[q];
                    if s < -tol {
                        out.push((idx, *d, s));
                    }
                }
            }
            (checked, out)
        })
        .collect();
    let checked_nodes = per_node.iter().filter(|r| r.0).count();
    let violations = per_node.into_iter().flat_map(|r| r.1).collect();
    ConvexityReport { tol, checked_nodes, violations }
}

/// `(|u|_inf, mask of {u < -|u|_inf / 2})` over interior nodes.
pub fn sup_norm_and_interior(u: &ConvexField) -> Result<(f64, Vec<bool>)> {
    let mut sup = 0.0f64;
    for (v, k) in u.values.iter().zip(&u.kind) {
        if *k != NodeKind::Exterior {
            sup = sup.max(v.abs());
        }
    }
    let tol = 1e-12 * sup;
    for (i, (v, k)) in u.values.iter().zip(&u.kind).enumerate() {
        if *k == NodeKind::Interior && *v > tol {
            return Err(Error::PositiveInteriorValue { node: i, value: *v });
        }
    }
    let mask = u
        .values
        .iter()
        .zip(&u.kind)
        .map(|(v, k)| *k == NodeKind::Interior && *v < -sup / 2.0)
        .collect();
    Ok((sup, mask))
}

pub fn mask_measure(grid: &Grid, mask: &[bool]) -> f64 {
    mask.iter().filter(|m| **m).count() as f64 * grid.cell_volume()
}

const MAGIC: &[u8; 8] = b"MAGRID01";

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format: String,
    n: usize,
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    label: String,
    dirichlet_zero: bool,
    domain: Option<DomainSpec>,
    payload: String,
}

/// Binary grid file: magic, n (u32), dims (3 x u64), spacing and origin
/// (3 x f64 each), row-major f64 values, then one node-kind byte per node.
/// A JSON sidecar with the same stem carries the metadata.
pub fn write_field(path: &Path, u: &ConvexField) -> Result<()> {
    let g = &u.grid;
    let mut buf: Vec<u8> = Vec::with_capacity(8 + 4 + 24 + 48 + g.len() * 9);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(g.n as u32).to_le_bytes());
    for d in g.dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for s in g.spacing.iter().chain(g.origin.iter()) {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    for v in &u.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend(u.kind.iter().map(|k| *k as u8));
    std::fs::File::create(path)?.write_all(&buf)?;
    let side = Sidecar {
        format: "MAGRID01".into(),
        n: g.n,
        dims: g.dims,
        spacing: g.spacing,
        origin: g.origin,
        label: u.label.clone(),
        dirichlet_zero: u.dirichlet_zero,
        domain: u.domain.clone(),
        payload: "f64 little-endian row-major (x fastest), then u8 node kinds".into(),
    };
    let json = serde_json::to_string_pretty(&side).map_err(|e| Error::Io(e.to_string()))?;
    std::fs::write(path.with_extension("json"), json)?;
    Ok(())
}

pub fn read_field(path: &Path) -> Result<ConvexField> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let bad = |m: &str| Error::Io(format!("{}: {m}", path.display()));
    if buf.len() < 84 || &buf[..8] != MAGIC {
        return Err(bad("not a grid file"));
    }
    let rd_u64 = |o: usize| u64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
    let rd_f64 = |o: usize| f64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
    let n = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let dims = [rd_u64(12) as usize, rd_u64(20) as usize, rd_u64(28) as usize];
    let spacing = [rd_f64(36), rd_f64(44), rd_f64(52)];
    let origin = [rd_f64(60), rd_f64(68), rd_f64(76)];
    let grid = Grid { n, dims, spacing, origin };
    let len = grid.len();
    if buf.len() != 84 + 9 * len {
        return Err(bad("payload length mismatch"));
    }
    let values = (0..len).map(|i| rd_f64(84 + 8 * i)).collect();
    let kind = buf[84 + 8 * len..]
        .iter()
        .map(|b| match b {
            0 => Ok(NodeKind::Interior),
            1 => Ok(NodeKind::Boundary),
            2 => Ok(NodeKind::Exterior),
            _ => Err(bad("bad node kind")),
        })
        .collect::<Result<Vec<_>>>()?;
    let (label, dirichlet_zero, domain) = match std::fs::read_to_string(path.with_extension("json")) {
        Ok(s) => {
            let side: Sidecar = serde_json::from_str(&s).map_err(|e| bad(&e.to_string()))?;
            (side.label, side.dirichlet_zero, side.domain)
        }
        Err(_) => (String::new(), false, None),
    };
    Ok(ConvexField { grid, values, kind, domain, dirichlet_zero, analytic: None, label })
}
