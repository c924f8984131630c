//! Planar convex geometry: hulls, polygon measures, enclosing ellipses.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn polygon_signed_area(v: &[[f64; 2]]) -> f64 {
    let m = v.len();
    let mut s = 0.0;
    for i in 0..m {
        let a = v[i];
        let b = v[(i + 1) % m];
        s += a[0] * b[1] - a[1] * b[0];
    }
    0.5 * s
}

pub fn polygon_area(v: &[[f64; 2]]) -> f64 {
    polygon_signed_area(v).abs()
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Andrew's monotone chain; counter-clockwise, collinear points dropped.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut p: Vec<[f64; 2]> = points.to_vec();
    p.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    p.dedup();
    if p.len() < 3 {
        return p;
    }
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &q in &p {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], q) <= 0.0 {
            lower.pop();
        }
        lower.push(q);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &q in p.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], q) <= 0.0 {
            upper.pop();
        }
        upper.push(q);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Point in a counter-clockwise convex polygon (boundary counts as inside).
pub fn in_convex_polygon(v: &[[f64; 2]], p: [f64; 2]) -> bool {
    let m = v.len();
    (0..m).all(|i| cross(v[i], v[(i + 1) % m], p) >= -1e-14)
}

/// Distance from `p` to the segment `ab`.
pub fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let e = [b[0] - a[0], b[1] - a[1]];
    let l2 = e[0] * e[0] + e[1] * e[1];
    let t = if l2 > 0.0 { (((p[0] - a[0]) * e[0] + (p[1] - a[1]) * e[1]) / l2).clamp(0.0, 1.0) } else { 0.0 };
    let q = [a[0] + t * e[0] - p[0], a[1] + t * e[1] - p[1]];
    (q[0] * q[0] + q[1] * q[1]).sqrt()
}

/// Smallest distance from `p` to the boundary of a closed polygon.
pub fn boundary_distance(v: &[[f64; 2]], p: [f64; 2]) -> f64 {
    let m = v.len();
    (0..m).map(|i| segment_distance(p, v[i], v[(i + 1) % m])).fold(f64::INFINITY, f64::min)
}

/// Ellipse `{x : (x - c)^T q (x - c) <= 1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: [f64; 2],
    pub q: [[f64; 2]; 2],
    pub iterations: usize,
}

/// Minimum-volume enclosing ellipse by Khachiyan's algorithm with
/// Todd-Yildirim away steps, stopped at relative tolerance `tol`.
pub fn mvee_2d(points: &[[f64; 2]], tol: f64) -> Result<Ellipse> {
    let m = points.len();
    if m < 3 || polygon_area(&convex_hull(points)) <= 0.0 {
        return Err(Error::DegenerateSection(format!("{m} points span less than a plane")));
    }
    let d = 3.0;
    let lifted: Vec<Vector3<f64>> = points.iter().map(|p| Vector3::new(p[0], p[1], 1.0)).collect();
    let mut w = vec![1.0 / m as f64; m];
    let mut iterations = 0;
    let max_iter = 100_000;
    loop {
        let mut x = Matrix3::zeros();
        for (q, wi) in lifted.iter().zip(&w) {
            x += *wi * q * q.transpose();
        }
        let xinv = x
            .try_inverse()
            .ok_or_else(|| Error::DegenerateSection("singular moment matrix".into()))?;
        let mvals: Vec<f64> = lifted.iter().map(|q| (q.transpose() * xinv * q)[0]).collect();
        let (jmax, mmax) = mvals
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if *v > acc.1 { (i, *v) } else { acc });
        let (jmin, mmin) = mvals
            .iter()
            .enumerate()
            .filter(|(i, _)| w[*i] > 0.0)
            .fold((0, f64::INFINITY), |acc, (i, v)| if *v < acc.1 { (i, *v) } else { acc });
        let up_gap = mmax / d - 1.0;
        let down_gap = 1.0 - mmin / d;
        // Away steps speed up convergence; the stopping rule is Khachiyan's.
        if up_gap <= tol || iterations >= max_iter {
            break;
        }
        iterations += 1;
        if up_gap >= down_gap {
            let step = (mmax - d) / (d * (mmax - 1.0));
            for wi in w.iter_mut() {
                *wi *= 1.0 - step;
            }
            w[jmax] += step;
        } else {
            let mut step = (mmin - d) / (d * (mmin - 1.0));
            step = step.max(-w[jmin] / (1.0 - w[jmin]));
            for wi in w.iter_mut() {
                *wi *= 1.0 - step;
            }
            w[jmin] += step;
            if w[jmin] < 1e-300 {
                w[jmin] = 0.0;
            }
        }
    }
    let mut c = Vector2::zeros();
    for (p, wi) in points.iter().zip(&w) {
        c += *wi * Vector2::new(p[0], p[1]);
    }
    let mut s = Matrix2::zeros();
    for (p, wi) in points.iter().zip(&w) {
        let v = Vector2::new(p[0], p[1]);
        s += *wi * v * v.transpose();
    }
    s -= c * c.transpose();
    let q = (s * 2.0)
        .try_inverse()
        .ok_or_else(|| Error::DegenerateSection("singular ellipse shape".into()))?;
    let q = (q + q.transpose()) * 0.5;
    Ok(Ellipse { center: [c[0], c[1]], q: [[q[(0, 0)], q[(0, 1)]], [q[(1, 0)], q[(1, 1)]]], iterations })
}

type V5 = nalgebra::SVector<f64, 5>;
type M5 = nalgebra::SMatrix<f64, 5, 5>;

/// Maximum-area ellipse inscribed in a counter-clockwise convex polygon,
/// `{B w + d : |w| <= 1}`, by a log-barrier Newton method; stops when the
/// barrier gap bound `m / t` drops below `tol`.
pub fn mvie_2d(poly: &[[f64; 2]], tol: f64) -> Result<Ellipse> {
    let m = poly.len();
    if m < 3 || polygon_area(poly) <= 0.0 {
        return Err(Error::DegenerateSection(format!("{m} vertices span less than a plane")));
    }
    // Facets a . x <= b with unit normals.
    let mut facets = Vec::with_capacity(m);
    for i in 0..m {
        let (p, q) = (poly[i], poly[(i + 1) % m]);
        let e = [q[0] - p[0], q[1] - p[1]];
        let l = e[0].hypot(e[1]);
        if l == 0.0 {
            continue;
        }
        let a = [e[1] / l, -e[0] / l];
        facets.push((a, a[0] * p[0] + a[1] * p[1]));
    }
    let mut c = [0.0; 2];
    let area = polygon_signed_area(poly);
    for i in 0..m {
        let (p, q) = (poly[i], poly[(i + 1) % m]);
        let w = p[0] * q[1] - q[0] * p[1];
        c[0] += (p[0] + q[0]) * w / (6.0 * area);
        c[1] += (p[1] + q[1]) * w / (6.0 * area);
    }
    let rho = facets.iter().map(|(a, b)| b - a[0] * c[0] - a[1] * c[1]).fold(f64::INFINITY, f64::min);
    if !(rho > 0.0) {
        return Err(Error::DegenerateSection("polygon has no interior".into()));
    }
    let mut z = V5::new(0.5 * rho, 0.0, 0.5 * rho, c[0], c[1]);
    let eval = |z: &V5, t: f64, with_hess: bool| -> Option<(f64, V5, M5)> {
        let (p, q, r) = (z[0], z[1], z[2]);
        let det = p * r - q * q;
        if !(det > 0.0 && p > 0.0) {
            return None;
        }
        let mut f = -t * det.ln();
        let mut g = V5::zeros();
        let mut h = M5::zeros();
        let gl = [r / det, -2.0 * q / det, p / det];
        g[0] -= t * gl[0];
        g[1] -= t * gl[1];
        g[2] -= t * gl[2];
        if with_hess {
            let d2 = det * det;
            let hl = [
                [-r * r / d2, 2.0 * q * r / d2, 1.0 / det - p * r / d2],
                [2.0 * q * r / d2, -2.0 / det - 4.0 * q * q / d2, 2.0 * p * q / d2],
                [1.0 / det - p * r / d2, 2.0 * p * q / d2, -p * p / d2],
            ];
            for i in 0..3 {
                for j in 0..3 {
                    h[(i, j)] -= t * hl[i][j];
                }
            }
        }
        for (a, b) in &facets {
            let v = [p * a[0] + q * a[1], q * a[0] + r * a[1]];
            let n = v[0].hypot(v[1]);
            let slack = b - a[0] * z[3] - a[1] * z[4] - n;
            if !(slack > 0.0) {
                return None;
            }
            f -= slack.ln();
            // d n / d(p, q, r) = J^T v / n with J = [[a0, a1, 0], [0, a0, a1]].
            let jt = [[a[0], 0.0], [a[1], a[0]], [0.0, a[1]]];
            let dn = [
                (jt[0][0] * v[0] + jt[0][1] * v[1]) / n,
                (jt[1][0] * v[0] + jt[1][1] * v[1]) / n,
                (jt[2][0] * v[0] + jt[2][1] * v[1]) / n,
            ];
            let ds = V5::new(-dn[0], -dn[1], -dn[2], -a[0], -a[1]);
            g -= ds / slack;
            if with_hess {
                h += ds * ds.transpose() / (slack * slack);
                // Hessian of n: J^T (I / n - v v^T / n^3) J, entering -slack.
                let n3 = n * n * n;
                let k = [
                    [1.0 / n - v[0] * v[0] / n3, -v[0] * v[1] / n3],
                    [-v[0] * v[1] / n3, 1.0 / n - v[1] * v[1] / n3],
                ];
                for i in 0..3 {
                    for j in 0..3 {
                        let mut s = 0.0;
                        for x in 0..2 {
                            for y in 0..2 {
                                s += jt[i][x] * k[x][y] * jt[j][y];
                            }
                        }
                        h[(i, j)] += s / slack;
                    }
                }
            }
        }
        Some((f, g, h))
    };
    let mf = facets.len() as f64;
    let mut t = 1.0;
    let mut iterations = 0;
    loop {
        for _ in 0..100 {
            let (f0, g, h) = eval(&z, t, true).ok_or_else(|| Error::DegenerateSection("barrier left the domain".into()))?;
            let step = match h.cholesky() {
                Some(ch) => -ch.solve(&g),
                None => -g,
            };
            let dec = -g.dot(&step);
            iterations += 1;
            if dec < 1e-10 {
                break;
            }
            let mut s = 1.0;
            loop {
                let zt = z + step * s;
                if let Some((ft, _, _)) = eval(&zt, t, false) {
                    if ft <= f0 - 0.25 * s * dec {
                        z = zt;
                        break;
                    }
                }
                s *= 0.5;
                if s < 1e-12 {
                    break;
                }
            }
            if s < 1e-12 {
                break;
            }
        }
        if mf / t < tol {
            break;
        }
        t *= 50.0;
    }
    let b = Matrix2::new(z[0], z[1], z[1], z[2]);
    let binv = b.try_inverse().ok_or_else(|| Error::DegenerateSection("flat inscribed ellipse".into()))?;
    let q = binv * binv;
    let q = (q + q.transpose()) * 0.5;
    Ok(Ellipse { center: [z[3], z[4]], q: [[q[(0, 0)], q[(0, 1)]], [q[(1, 0)], q[(1, 1)]]], iterations })
}

/// Symmetric positive-definite unit-determinant map rounding the ellipse:
/// `A = q^{1/2} / det(q)^{1/4}`. Among all `R A` with `R` a rotation this is
/// the one closest to the identity.
pub fn rounding_map_2d(e: &Ellipse) -> [[f64; 2]; 2] {
    let q = Matrix2::new(e.q[0][0], e.q[0][1], e.q[1][0], e.q[1][1]);
    let eig = q.symmetric_eigen();
    let det = eig.eigenvalues[0] * eig.eigenvalues[1];
    let s = det.powf(0.25);
    let mut root = Matrix2::zeros();
    for k in 0..2 {
        let v = eig.eigenvectors.column(k);
        root += eig.eigenvalues[k].sqrt() / s * v * v.transpose();
    }
    let root = (root + root.transpose()) * 0.5;
    // Remove the residual determinant drift from the eigen-decomposition.
    let d = root.determinant().sqrt();
    let root = root / d;
    [[root[(0, 0)], root[(0, 1)]], [root[(1, 0)], root[(1, 1)]]]
}

pub fn apply2(a: &[[f64; 2]; 2], p: [f64; 2]) -> [f64; 2] {
    [a[0][0] * p[0] + a[0][1] * p[1], a[1][0] * p[0] + a[1][1] * p[1]]
}

pub fn det2(a: &[[f64; 2]; 2]) -> f64 {
    a[0][0] * a[1][1] - a[0][1] * a[1][0]
}

/// Operator norm of a 2x2 matrix.
pub fn op_norm2(a: &[[f64; 2]; 2]) -> f64 {
    let m = Matrix2::new(a[0][0], a[0][1], a[1][0], a[1][1]);
    let s = (m.transpose() * m).symmetric_eigen();
    s.eigenvalues.max().max(0.0).sqrt()
}

pub fn inverse2(a: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let d = det2(a);
    [[a[1][1] / d, -a[0][1] / d], [-a[1][0] / d, a[0][0] / d]]
}
