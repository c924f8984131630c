use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry;
use crate::grid::{dot, norm};

/// Shape as requested by a caller, before validation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeDescriptor {
    Ball { n: usize, radius: f64 },
    Cube { n: usize, half: f64 },
    /// Axis-aligned ellipse (n = 2) or ellipsoid (n = 3) centered at the origin.
    Ellipsoid { axes: Vec<f64> },
    /// Convex polygon, vertices in either orientation.
    Polygon { vertices: Vec<[f64; 2]> },
}

/// Validated shape. Polytopes carry both facet and vertex descriptions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Ball { radius: f64 },
    Ellipsoid { axes: [f64; 3] },
    /// `normals[i] . x <= offsets[i]` with unit normals.
    Polytope { normals: Vec<[f64; 3]>, offsets: Vec<f64>, vertices: Vec<[f64; 3]> },
}

/// `x -> matrix * x + shift`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub matrix: [[f64; 3]; 3],
    pub shift: [f64; 3],
}

impl AffineMap {
    pub fn apply(&self, x: [f64; 3]) -> [f64; 3] {
        let mut y = self.shift;
        for (r, yr) in y.iter_mut().enumerate() {
            *yr += dot(self.matrix[r], x);
        }
        y
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub n: usize,
    pub shape: Shape,
    /// Map applied to the requested shape to reach the admissible range.
    pub premap: Option<AffineMap>,
    pub inradius: f64,
    pub circumradius: f64,
    pub contains_unit_ball: bool,
    pub inside_ball_n: bool,
}

const INCLUSION_TOL: f64 = 1e-12;

pub fn build_domain(desc: &ShapeDescriptor) -> Result<DomainSpec> {
    match desc {
        ShapeDescriptor::Ball { n, radius } => {
            check_dim(*n)?;
            if !(*radius >= 1.0 - INCLUSION_TOL && *radius <= *n as f64 + INCLUSION_TOL) {
                return Err(Error::NormalizationImpossible(format!(
                    "ball of radius {radius} has fixed volume outside [B_1, B_{n}]"
                )));
            }
            Ok(finish(*n, Shape::Ball { radius: *radius }, None))
        }
        ShapeDescriptor::Cube { n, half } => {
            check_dim(*n)?;
            let verts = cube_vertices(*n, *half);
            let shape = polytope_from_cube(*n, *half, verts);
            let d = finish(*n, shape, None);
            if !(d.contains_unit_ball && d.inside_ball_n) {
                return Err(Error::NormalizationImpossible(format!("cube of half-width {half}")));
            }
            Ok(d)
        }
        ShapeDescriptor::Ellipsoid { axes } => {
            let n = axes.len();
            check_dim(n)?;
            if axes.iter().any(|a| !(*a > 0.0)) {
                return Err(Error::NonConvexDomain("ellipsoid axes must be positive".into()));
            }
            let mut ax = [1.0; 3];
            ax[..n].copy_from_slice(axes);
            let lo = axes.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = axes.iter().cloned().fold(0.0, f64::max);
            if lo >= 1.0 - INCLUSION_TOL && hi <= n as f64 + INCLUSION_TOL {
                return Ok(finish(n, Shape::Ellipsoid { axes: ax }, None));
            }
            // Unit-determinant diagonal map to the ball of equal volume.
            let g = axes.iter().product::<f64>().powf(1.0 / n as f64);
            if !(g >= 1.0 - INCLUSION_TOL && g <= n as f64 + INCLUSION_TOL) {
                return Err(Error::NormalizationImpossible(format!(
                    "ellipsoid volume radius {g} outside [1, {n}]"
                )));
            }
            let mut m = [[0.0; 3]; 3];
            for a in 0..3 {
                m[a][a] = if a < n { g / axes[a] } else { 1.0 };
            }
            let premap = AffineMap { matrix: m, shift: [0.0; 3] };
            Ok(finish(n, Shape::Ball { radius: g }, Some(premap)))
        }
        ShapeDescriptor::Polygon { vertices } => {
            let mut v: Vec<[f64; 2]> = vertices.clone();
            orient_convex(&mut v)?;
            let shape = polytope_from_polygon(&v);
            let d = finish(2, shape, None);
            if d.contains_unit_ball && d.inside_ball_n {
                return Ok(d);
            }
            let pts: Vec<[f64; 2]> = v.clone();
            let ell = geometry::mvee_2d(&pts, 1e-9)?;
            let a = geometry::rounding_map_2d(&ell);
            let mapped: Vec<[f64; 2]> = pts
                .iter()
                .map(|p| {
                    let q = [p[0] - ell.center[0], p[1] - ell.center[1]];
                    [a[0][0] * q[0] + a[0][1] * q[1], a[1][0] * q[0] + a[1][1] * q[1]]
                })
                .collect();
            let shape = polytope_from_polygon(&mapped);
            let mut d = finish(2, shape, None);
            if !(d.contains_unit_ball && d.inside_ball_n) {
                return Err(Error::NormalizationImpossible(format!(
                    "after John rounding: inradius {}, circumradius {}",
                    d.inradius, d.circumradius
                )));
            }
            let mut m = [[0.0; 3]; 3];
            m[0][0] = a[0][0];
            m[0][1] = a[0][1];
            m[1][0] = a[1][0];
            m[1][1] = a[1][1];
            m[2][2] = 1.0;
            let c = ell.center;
            let shift = [-(m[0][0] * c[0] + m[0][1] * c[1]), -(m[1][0] * c[0] + m[1][1] * c[1]), 0.0];
            d.premap = Some(AffineMap { matrix: m, shift });
            Ok(d)
        }
    }
}

fn check_dim(n: usize) -> Result<()> {
    if n == 2 || n == 3 {
        Ok(())
    } else {
        Err(Error::NonConvexDomain(format!("dimension {n} not supported")))
    }
}

fn finish(n: usize, shape: Shape, premap: Option<AffineMap>) -> DomainSpec {
    let (inradius, circumradius) = match &shape {
        Shape::Ball { radius } => (*radius, *radius),
        Shape::Ellipsoid { axes } => {
            let a = &axes[..n];
            (
                a.iter().cloned().fold(f64::INFINITY, f64::min),
                a.iter().cloned().fold(0.0, f64::max),
            )
        }
        Shape::Polytope { offsets, vertices, .. } => (
            offsets.iter().cloned().fold(f64::INFINITY, f64::min),
            vertices.iter().map(|v| norm(*v)).fold(0.0, f64::max),
        ),
    };
    DomainSpec {
        n,
        shape,
        premap,
        inradius,
        circumradius,
        contains_unit_ball: inradius >= 1.0 - INCLUSION_TOL,
        inside_ball_n: circumradius <= n as f64 + INCLUSION_TOL,
    }
}

fn cube_vertices(n: usize, half: f64) -> Vec<[f64; 3]> {
    let count = 1 << n;
    (0..count)
        .map(|m| {
            let mut v = [0.0; 3];
            for (a, va) in v.iter_mut().enumerate().take(n) {
                *va = if m & (1 << a) != 0 { half } else { -half };
            }
            v
        })
        .collect()
}

fn polytope_from_cube(n: usize, half: f64, vertices: Vec<[f64; 3]>) -> Shape {
    let mut normals = Vec::new();
    let mut offsets = Vec::new();
    for a in 0..n {
        for s in [1.0, -1.0] {
            let mut nrm = [0.0; 3];
            nrm[a] = s;
            normals.push(nrm);
            offsets.push(half);
        }
    }
    Shape::Polytope { normals, offsets, vertices }
}

/// Reorders to counter-clockwise and rejects reflex or degenerate polygons.
fn orient_convex(v: &mut Vec<[f64; 2]>) -> Result<()> {
    if v.len() < 3 {
        return Err(Error::NonConvexDomain("polygon needs at least 3 vertices".into()));
    }
    if geometry::polygon_signed_area(v) < 0.0 {
        v.reverse();
    }
    let m = v.len();
    for i in 0..m {
        let a = v[i];
        let b = v[(i + 1) % m];
        let c = v[(i + 2) % m];
        let cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
        if cross <= 0.0 {
            return Err(Error::NonConvexDomain(format!("reflex or flat corner at vertex {}", (i + 1) % m)));
        }
    }
    Ok(())
}

fn polytope_from_polygon(v: &[[f64; 2]]) -> Shape {
    let m = v.len();
    let mut normals = Vec::with_capacity(m);
    let mut offsets = Vec::with_capacity(m);
    for i in 0..m {
        let a = v[i];
        let b = v[(i + 1) % m];
        let e = [b[0] - a[0], b[1] - a[1]];
        let l = (e[0] * e[0] + e[1] * e[1]).sqrt();
        let nrm = [e[1] / l, -e[0] / l, 0.0];
        offsets.push(nrm[0] * a[0] + nrm[1] * a[1]);
        normals.push(nrm);
    }
    let vertices = v.iter().map(|p| [p[0], p[1], 0.0]).collect();
    Shape::Polytope { normals, offsets, vertices }
}

impl DomainSpec {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        match &self.shape {
            Shape::Ball { radius } => dot(p, p) < radius * radius,
            Shape::Ellipsoid { axes } => {
                (0..self.n).map(|a| (p[a] / axes[a]).powi(2)).sum::<f64>() < 1.0
            }
            Shape::Polytope { normals, offsets, .. } => {
                normals.iter().zip(offsets).all(|(nrm, b)| dot(*nrm, p) < *b)
            }
        }
    }

    /// Distance from an interior point to the boundary along the unit direction `d`.
    pub fn exit_distance(&self, p: [f64; 3], d: [f64; 3]) -> f64 {
        match &self.shape {
            Shape::Ball { radius } => {
                let b = dot(p, d);
                let c = dot(p, p) - radius * radius;
                -b + (b * b - c).max(0.0).sqrt()
            }
            Shape::Ellipsoid { axes } => {
                let (mut qa, mut qb, mut qc) = (0.0, 0.0, -1.0);
                for a in 0..self.n {
                    let w = 1.0 / (axes[a] * axes[a]);
                    qa += d[a] * d[a] * w;
                    qb += p[a] * d[a] * w;
                    qc += p[a] * p[a] * w;
                }
                (-qb + (qb * qb - qa * qc).max(0.0).sqrt()) / qa
            }
            Shape::Polytope { normals, offsets, .. } => {
                let mut t = f64::INFINITY;
                for (nrm, b) in normals.iter().zip(offsets) {
                    let s = dot(*nrm, d);
                    if s > 0.0 {
                        t = t.min(((b - dot(*nrm, p)) / s).max(0.0));
                    }
                }
                t
            }
        }
    }

    /// Largest |x| over the domain.
    pub fn outer_radius(&self) -> f64 {
        self.circumradius
    }

    /// 2D boundary polygon for plotting (curved shapes sampled).
    pub fn outline_2d(&self, samples: usize) -> Vec<[f64; 2]> {
        match &self.shape {
            Shape::Polytope { vertices, .. } => vertices.iter().map(|v| [v[0], v[1]]).collect(),
            _ => (0..samples)
                .map(|k| {
                    let th = 2.0 * std::f64::consts::PI * k as f64 / samples as f64;
                    let d = [th.cos(), th.sin(), 0.0];
                    let t = self.exit_distance([0.0; 3], d);
                    [t * d[0], t * d[1]]
                })
                .collect(),
        }
    }
}
