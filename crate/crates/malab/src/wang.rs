//! Homogeneous solutions with `u(t x, t^alpha y) = t^{1 + alpha} u(x, y)`.
//!
//! Near the y-axis `u = |y|^beta phi(s)` with `s = x |y|^{-1/alpha}` and
//! `beta = (1 + alpha) / alpha`; near the x-axis `u = |x|^{1 + alpha} psi(r)`
//! with `r = |y| |x|^{-alpha}`. Substituting into `det D^2 u = g` gives
//!
//! ```text
//! phi'' = alpha (g + phi'^2) / (beta phi + (2 - beta) s phi')
//! psi'' = (g + psi'^2) / (alpha ((1 + alpha) psi + (1 - alpha) r psi'))
//! ```
//!
//! With `g = 1` in both charts the even profile meets `y = 0` with a kink
//! (`psi'(0) > 0`), so the density is taken piecewise constant: 1 on the
//! phi chart `|s| <= s1` and `kappa` on the psi chart, with `kappa` shot so
//! that `psi'(0) = 0`. Among admissible `s1` the one minimizing `kappa` is used.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::domain::{build_domain, DomainSpec, ShapeDescriptor};
use crate::error::{Error, Result};
use crate::field::{Analytic, Sym};
use crate::geometry;
use crate::solver::RhsSpec;

const ODE_TOL: f64 = 1e-10;

/// Samples of an ODE solution `(t, y, y', y'')` with quintic Hermite interpolation.
#[derive(Clone, Debug)]
pub struct Profile {
    t: Vec<f64>,
    y: Vec<f64>,
    dy: Vec<f64>,
    ddy: Vec<f64>,
}

impl Profile {
    fn from_samples(mut s: Vec<[f64; 4]>) -> Profile {
        s.sort_by(|a, b| a[0].total_cmp(&b[0]));
        s.dedup_by(|a, b| a[0] == b[0]);
        Profile {
            t: s.iter().map(|v| v[0]).collect(),
            y: s.iter().map(|v| v[1]).collect(),
            dy: s.iter().map(|v| v[2]).collect(),
            ddy: s.iter().map(|v| v[3]).collect(),
        }
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.t[0], *self.t.last().unwrap())
    }

    /// Value and first derivative.
    pub fn eval(&self, t: f64) -> (f64, f64) {
        let n = self.t.len();
        let k = match self.t.binary_search_by(|v| v.total_cmp(&t)) {
            Ok(i) => return (self.y[i], self.dy[i]),
            Err(0) => 0,
            Err(i) if i >= n => n - 2,
            Err(i) => i - 1,
        };
        let h = self.t[k + 1] - self.t[k];
        let x = (t - self.t[k]) / h;
        let (x2, x3) = (x * x, x * x * x);
        let (x4, x5) = (x3 * x, x3 * x2);
        let b = [
            1.0 - 10.0 * x3 + 15.0 * x4 - 6.0 * x5,
            x - 6.0 * x3 + 8.0 * x4 - 3.0 * x5,
            0.5 * (x2 - 3.0 * x3 + 3.0 * x4 - x5),
            10.0 * x3 - 15.0 * x4 + 6.0 * x5,
            -4.0 * x3 + 7.0 * x4 - 3.0 * x5,
            0.5 * (x3 - 2.0 * x4 + x5),
        ];
        let db = [
            -30.0 * x2 + 60.0 * x3 - 30.0 * x4,
            1.0 - 18.0 * x2 + 32.0 * x3 - 15.0 * x4,
            0.5 * (2.0 * x - 9.0 * x2 + 12.0 * x3 - 5.0 * x4),
            30.0 * x2 - 60.0 * x3 + 30.0 * x4,
            -12.0 * x2 + 28.0 * x3 - 15.0 * x4,
            0.5 * (3.0 * x2 - 8.0 * x3 + 5.0 * x4),
        ];
        let c = [
            self.y[k],
            h * self.dy[k],
            h * h * self.ddy[k],
            self.y[k + 1],
            h * self.dy[k + 1],
            h * h * self.ddy[k + 1],
        ];
        let v: f64 = b.iter().zip(&c).map(|(p, q)| p * q).sum();
        let dv: f64 = db.iter().zip(&c).map(|(p, q)| p * q).sum::<f64>() / h;
        (v, dv)
    }
}

/// Dormand-Prince 5(4) for `y'' = f(t, y, y')`, recording every accepted step.
fn integrate<F>(f: F, t0: f64, t1: f64, y0: [f64; 2], tol: f64) -> Result<Vec<[f64; 4]>>
where
    F: Fn(f64, f64, f64) -> Option<f64>,
{
    const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
    const A: [[f64; 6]; 7] = [
        [0.0; 6],
        [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
        [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
        [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ];
    const E: [f64; 7] = [
        35.0 / 384.0 - 5179.0 / 57600.0,
        0.0,
        500.0 / 1113.0 - 7571.0 / 16695.0,
        125.0 / 192.0 - 393.0 / 640.0,
        -2187.0 / 6784.0 + 92097.0 / 339200.0,
        11.0 / 84.0 - 187.0 / 2100.0,
        -1.0 / 40.0,
    ];
    let rhs = |t: f64, y: [f64; 2]| -> Result<[f64; 2]> {
        match f(t, y[0], y[1]) {
            Some(a) if a.is_finite() => Ok([y[1], a]),
            _ => Err(Error::ProfileBlowup(format!("degenerate profile equation at t = {t}"))),
        }
    };
    let span = t1 - t0;
    let dir = span.signum();
    let mut t = t0;
    let mut y = y0;
    let mut h = span.abs() * 1e-3;
    let mut k0 = rhs(t, y)?;
    let mut out = vec![[t, y[0], y[1], k0[1]]];
    let mut steps = 0usize;
    while (t1 - t) * dir > 0.0 {
        steps += 1;
        if steps > 200_000 || h < 1e-15 * span.abs().max(1.0) {
            return Err(Error::ProfileBlowup(format!("step size collapse at t = {t}")));
        }
        h = h.min((t1 - t).abs());
        let hs = dir * h;
        let mut k = [[0.0; 2]; 7];
        k[0] = k0;
        let mut ok = true;
        for i in 1..7 {
            let mut yi = y;
            for (j, kj) in k.iter().enumerate().take(i) {
                yi[0] += hs * A[i][j] * kj[0];
                yi[1] += hs * A[i][j] * kj[1];
            }
            match rhs(t + C[i] * hs, yi) {
                Ok(v) => k[i] = v,
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            h *= 0.25;
            continue;
        }
        let mut yn = y;
        for (i, ki) in k.iter().enumerate().take(6) {
            yn[0] += hs * A[6][i] * ki[0];
            yn[1] += hs * A[6][i] * ki[1];
        }
        let mut err = 0.0f64;
        for c in 0..2 {
            let e: f64 = hs * (0..7).map(|i| E[i] * k[i][c]).sum::<f64>();
            let sc = tol + tol * y[c].abs().max(yn[c].abs());
            err = err.max((e / sc).abs());
        }
        if err <= 1.0 {
            t += hs;
            y = yn;
            k0 = k[6];
            out.push([t, y[0], y[1], k0[1]]);
        }
        let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        h *= fac;
    }
    Ok(out)
}

/// Homogeneous profile pair for one exponent.
#[derive(Clone, Debug)]
pub struct WangRaw {
    pub alpha: f64,
    pub beta: f64,
    /// Chart switch: phi chart for `|x| <= s1 |y|^{1/alpha}`.
    pub s1: f64,
    pub kappa: f64,
    pub phi: Profile,
    pub psi: Profile,
    /// `alpha = 1`: the quadratic `y^2 + x^2 / 4`.
    pub degenerate: bool,
}

/// Value, gradient, Hessian and density of a raw field at a point.
#[derive(Clone, Copy, Debug)]
pub struct Jet {
    pub u: f64,
    pub grad: [f64; 2],
    pub hess: [f64; 3],
    pub g: f64,
}

fn phi_rhs(alpha: f64, beta: f64) -> impl Fn(f64, f64, f64) -> Option<f64> {
    move |s, p, dp| {
        let den = beta * p + (2.0 - beta) * s * dp;
        (den > 0.0).then(|| alpha * (1.0 + dp * dp) / den)
    }
}

fn psi_rhs(alpha: f64, kappa: f64) -> impl Fn(f64, f64, f64) -> Option<f64> {
    move |r, q, dq| {
        let den = alpha * ((1.0 + alpha) * q + (1.0 - alpha) * r * dq);
        (den > 0.0).then(|| (kappa + dq * dq) / den)
    }
}

/// phi chart from s = 0 to s1 with phi(0) = 1, phi'(0) = 0.
fn phi_profile(alpha: f64, s1: f64) -> Result<Vec<[f64; 4]>> {
    let beta = (1.0 + alpha) / alpha;
    integrate(phi_rhs(alpha, beta), 0.0, s1, [1.0, 0.0], ODE_TOL)
}

/// Matching data for psi at `r1 = s1^{-alpha}` from phi at `s1`.
fn psi_start(alpha: f64, s1: f64, phi_end: [f64; 4]) -> (f64, [f64; 2]) {
    let beta = (1.0 + alpha) / alpha;
    let r1 = s1.powf(-alpha);
    let (p, dp) = (phi_end[1], phi_end[2]);
    let psi = r1.powf(beta) * p;
    let dpsi = beta * r1.powf(beta - 1.0) * p - r1.powf(beta) * dp / alpha * r1.powf(-1.0 / alpha - 1.0);
    (r1, [psi, dpsi])
}

/// `psi'(0)` for given `(s1, kappa)`; `-inf` when the psi equation degenerates.
fn mismatch(alpha: f64, s1: f64, kappa: f64, phi: &[[f64; 4]]) -> f64 {
    let (r1, y0) = psi_start(alpha, s1, *phi.last().unwrap());
    match integrate(psi_rhs(alpha, kappa), r1, 0.0, y0, ODE_TOL) {
        Ok(v) => v.last().unwrap()[2],
        Err(_) => f64::NEG_INFINITY,
    }
}

/// Bisection in log scale on a sign change from + to -.
fn bisect_log(f: &dyn Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..80 {
        let mid = (lo * hi).sqrt();
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-13 {
            break;
        }
    }
    (lo * hi).sqrt()
}

/// Smallest density ratio `kappa` giving a smooth even profile for the chart switch `s1`.
pub fn kappa_star(alpha: f64, s1: f64) -> Option<f64> {
    let phi = phi_profile(alpha, s1).ok()?;
    let f = |k: f64| mismatch(alpha, s1, k, &phi);
    let grid: Vec<f64> = (0..=36).map(|i| 10f64.powf(i as f64 * 0.25)).collect();
    let mut prev = (grid[0], f(grid[0]));
    if !(prev.1 > 0.0) {
        return None;
    }
    for &k in &grid[1..] {
        let v = f(k);
        if v <= 0.0 {
            return Some(bisect_log(&f, prev.0, k));
        }
        prev = (k, v);
    }
    None
}

fn assemble(alpha: f64, s1: f64, kappa: f64) -> Result<WangRaw> {
    let phi = phi_profile(alpha, s1)?;
    let (r1, y0) = psi_start(alpha, s1, *phi.last().unwrap());
    let psi = integrate(psi_rhs(alpha, kappa), r1, 0.0, y0, ODE_TOL)?;
    Ok(WangRaw {
        alpha,
        beta: (1.0 + alpha) / alpha,
        s1,
        kappa,
        phi: Profile::from_samples(phi),
        psi: Profile::from_samples(psi),
        degenerate: false,
    })
}

fn quadratic_raw() -> WangRaw {
    // phi(s) = 1 + s^2 / 4, u = y^2 + x^2 / 4, one chart everywhere.
    let samples: Vec<[f64; 4]> = (0..=64)
        .map(|i| {
            let s = i as f64 / 4.0;
            [s, 1.0 + s * s / 4.0, s / 2.0, 0.5]
        })
        .collect();
    let psi: Vec<[f64; 4]> = (0..=64)
        .map(|i| {
            let r = i as f64 / 4.0;
            [r, 0.25 + r * r, 2.0 * r, 2.0]
        })
        .collect();
    WangRaw {
        alpha: 1.0,
        beta: 2.0,
        s1: f64::INFINITY,
        kappa: 1.0,
        phi: Profile::from_samples(samples),
        psi: Profile::from_samples(psi),
        degenerate: true,
    }
}

/// Profile pair with the chart switch chosen to minimize `kappa`.
pub fn wang_profile(alpha: f64) -> Result<WangRaw> {
    if !(alpha >= 1.0) {
        return Err(Error::ProfileBlowup(format!("exponent {alpha} must be at least 1")));
    }
    if alpha == 1.0 {
        return Ok(quadratic_raw());
    }
    let ls: Vec<f64> = (0..=40).map(|i| -4.0 + 5.0 * i as f64 / 40.0).collect();
    let vals: Vec<Option<f64>> = ls.iter().map(|l| kappa_star(alpha, l.exp())).collect();
    let (ib, _) = vals
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|k| (i, k)))
        .fold((usize::MAX, f64::INFINITY), |a, (i, k)| if k < a.1 { (i, k) } else { a });
    if ib == usize::MAX {
        return Err(Error::ProfileBlowup(format!("no admissible chart switch for alpha = {alpha}")));
    }
    let obj = |l: f64| kappa_star(alpha, l.exp()).unwrap_or(f64::INFINITY);
    let (mut a, mut b) = (ls[ib.saturating_sub(1)], ls[(ib + 1).min(ls.len() - 1)]);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (obj(c), obj(d));
    while b - a > 1e-5 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = obj(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = obj(d);
        }
    }
    let s1 = (0.5 * (a + b)).exp();
    let kappa = kappa_star(alpha, s1)
        .ok_or_else(|| Error::ProfileBlowup(format!("shooting failed at s1 = {s1}")))?;
    assemble(alpha, s1, kappa)
}

/// Profile pair with a prescribed density ratio; the chart switch is shot
/// on the larger-s1 side of the minimizing switch.
pub fn wang_profile_with_kappa(alpha: f64, kappa: f64) -> Result<WangRaw> {
    let best = wang_profile(alpha)?;
    if best.degenerate || kappa < best.kappa {
        return Err(Error::PinchFailure(kappa));
    }
    let f = |s1: f64| match phi_profile(alpha, s1) {
        Ok(phi) => mismatch(alpha, s1, kappa, &phi),
        Err(_) => f64::NAN,
    };
    // psi'(0) < 0 at the minimizer for kappa above the minimum; it turns
    // positive again as s1 grows.
    let mut lo = best.s1;
    let mut hi = lo;
    loop {
        hi *= 1.25;
        let v = f(hi);
        if v > 0.0 {
            break;
        }
        if hi > 1e3 * best.s1 {
            return Err(Error::ProfileBlowup(format!("no chart switch for kappa = {kappa}")));
        }
        lo = hi;
    }
    for _ in 0..100 {
        let mid = (lo * hi).sqrt();
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi / lo - 1.0 < 1e-14 {
            break;
        }
    }
    assemble(alpha, (lo * hi).sqrt(), kappa)
}

impl WangRaw {
    fn phi_second(&self, s: f64, p: f64, dp: f64) -> f64 {
        self.alpha * (1.0 + dp * dp) / (self.beta * p + (2.0 - self.beta) * s * dp)
    }

    fn psi_second(&self, r: f64, q: f64, dq: f64) -> f64 {
        let a = self.alpha;
        (self.kappa + dq * dq) / (a * ((1.0 + a) * q + (1.0 - a) * r * dq))
    }

    /// True on the phi chart (where the density is 1).
    pub fn in_phi_chart(&self, x: f64, y: f64) -> bool {
        let (ax, ay) = (x.abs(), y.abs());
        ay > 0.0 && ax <= self.s1 * ay.powf(1.0 / self.alpha)
    }

    pub fn density(&self, x: f64, y: f64) -> f64 {
        if self.in_phi_chart(x, y) {
            1.0
        } else {
            self.kappa
        }
    }

    pub fn jet(&self, x: f64, y: f64) -> Jet {
        let a = self.alpha;
        let (ax, ay) = (x.abs(), y.abs());
        let (sx, sy) = (if x < 0.0 { -1.0 } else { 1.0 }, if y < 0.0 { -1.0 } else { 1.0 });
        if self.degenerate {
            return Jet { u: y * y + x * x / 4.0, grad: [x / 2.0, 2.0 * y], hess: [0.5, 0.0, 2.0], g: 1.0 };
        }
        if ax == 0.0 && ay == 0.0 {
            return Jet { u: 0.0, grad: [0.0; 2], hess: [0.0; 3], g: self.kappa };
        }
        if self.in_phi_chart(x, y) {
            let s = ax * ay.powf(-1.0 / a);
            let (p, dp) = self.phi.eval(s);
            let ddp = self.phi_second(s, p, dp);
            let gg = self.beta * p - s * dp / a;
            let dg = dp - s * ddp / a;
            let u = ay.powf(self.beta) * p;
            let ux = ay * dp;
            let uy = ay.powf(1.0 / a) * gg;
            let uxx = ay.powf(1.0 - 1.0 / a) * ddp;
            let uxy = dg;
            let uyy = ay.powf(1.0 / a - 1.0) * (gg - s * dg) / a;
            Jet { u, grad: [sx * ux, sy * uy], hess: [uxx, sx * sy * uxy, uyy], g: 1.0 }
        } else {
            let r = ay * ax.powf(-a);
            let (q, dq) = self.psi.eval(r);
            let ddq = self.psi_second(r, q, dq);
            let hh = (1.0 + a) * q - a * r * dq;
            let dh = dq - a * r * ddq;
            let u = ax.powf(1.0 + a) * q;
            let ux = ax.powf(a) * hh;
            let uy = ax * dq;
            let uxx = a * ax.powf(a - 1.0) * (hh - r * dh);
            let uxy = dh;
            let uyy = ax.powf(1.0 - a) * ddq;
            Jet { u, grad: [sx * ux, sy * uy], hess: [uxx, sx * sy * uxy, uyy], g: self.kappa }
        }
    }

    pub fn phi0(&self) -> f64 {
        self.phi.eval(0.0).0
    }

    pub fn psi0(&self) -> f64 {
        self.psi.eval(0.0).0
    }

    /// `psi'(0)`: zero up to shooting tolerance for a smooth even profile.
    pub fn kink(&self) -> f64 {
        self.psi.eval(0.0).1
    }
}

/// `U(x, y) = c u(lambda x, y / lambda)`.
#[derive(Clone, Debug)]
pub struct WangField {
    pub raw: Arc<WangRaw>,
    pub c: f64,
    pub stretch: f64,
}

impl WangField {
    fn raw_point(&self, p: [f64; 3]) -> (f64, f64) {
        (self.stretch * p[0], p[1] / self.stretch)
    }

    /// Axis extents of `{U < level}`.
    pub fn axis_extents(&self, level: f64) -> (f64, f64) {
        let r = &self.raw;
        let xe = (level / (self.c * r.psi0())).powf(1.0 / (1.0 + r.alpha)) / self.stretch;
        let ye = self.stretch * (level / (self.c * r.phi0())).powf(1.0 / r.beta);
        (xe, ye)
    }

    /// Stretch equalizing the axis extents of `{U < level}` at the common value `extent`,
    /// together with the level itself.
    pub fn with_extent(raw: Arc<WangRaw>, c: f64, extent: f64) -> (WangField, f64) {
        let a = raw.alpha;
        let level = extent * extent * (c * raw.psi0()).powf(1.0 / (1.0 + a)) * (c * raw.phi0()).powf(a / (1.0 + a));
        let stretch = (level / (c * raw.psi0())).powf(1.0 / (1.0 + a)) / extent;
        (WangField { raw, c, stretch }, level)
    }

    /// Geometric-mean normalization: density values `kappa^{-1/2}` and
    /// `kappa^{1/2}`, axis extents of `{U < 1}` equal.
    pub fn normalized(raw: Arc<WangRaw>) -> WangField {
        let c = raw.kappa.powf(-0.25);
        let a = raw.alpha;
        let xe = (1.0 / (c * raw.psi0())).powf(1.0 / (1.0 + a));
        let ye = (1.0 / (c * raw.phi0())).powf(1.0 / raw.beta);
        WangField { raw, c, stretch: (xe / ye).sqrt() }
    }

    pub fn density(&self, p: [f64; 3]) -> f64 {
        let (x, y) = self.raw_point(p);
        self.c * self.c * self.raw.density(x, y)
    }

    /// Distance from the origin to `{U = level}` along the unit direction `d`.
    pub fn level_radius(&self, level: f64, d: [f64; 2]) -> f64 {
        let mut hi = 1.0;
        while self.value([hi * d[0], hi * d[1], 0.0]) < level {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if self.value([mid * d[0], mid * d[1], 0.0]) < level {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Boundary samples of `{U < level}` at equally spaced angles.
    pub fn level_polygon(&self, level: f64, samples: usize) -> Vec<[f64; 2]> {
        (0..samples)
            .map(|k| {
                let th = 2.0 * std::f64::consts::PI * (k as f64 + 0.5) / samples as f64;
                let d = [th.cos(), th.sin()];
                let r = self.level_radius(level, d);
                [r * d[0], r * d[1]]
            })
            .collect()
    }

    /// Bounding half-widths of `{U < level}`.
    pub fn level_box(&self, level: f64) -> [f64; 2] {
        let pts = self.level_polygon(level, 720);
        let mut hw = [0.0f64; 2];
        for p in pts {
            hw[0] = hw[0].max(p[0].abs());
            hw[1] = hw[1].max(p[1].abs());
        }
        hw
    }
}

impl Analytic for WangField {
    fn value(&self, p: [f64; 3]) -> f64 {
        let (x, y) = self.raw_point(p);
        self.c * self.raw.jet(x, y).u
    }

    fn gradient(&self, p: [f64; 3]) -> [f64; 3] {
        let (x, y) = self.raw_point(p);
        let j = self.raw.jet(x, y);
        [self.c * self.stretch * j.grad[0], self.c / self.stretch * j.grad[1], 0.0]
    }

    fn hessian(&self, p: [f64; 3]) -> Sym {
        let (x, y) = self.raw_point(p);
        let j = self.raw.jet(x, y);
        let l2 = self.stretch * self.stretch;
        Sym::new2(self.c * l2 * j.hess[0], self.c * j.hess[1], self.c / l2 * j.hess[2])
    }

    fn describe(&self) -> String {
        format!("homogeneous solution alpha = {}", self.raw.alpha)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WangReport {
    pub alpha: f64,
    pub s1: f64,
    pub kappa: f64,
    /// Pinch of the normalized field's Monge-Ampere density.
    pub lambda_w: f64,
    pub big_lambda_w: f64,
    /// Largest relative deviation from `u(tx, t^alpha y) = t^{1+alpha} u(x, y)`.
    pub scale_error: f64,
    /// Largest relative deviation of `det D^2 U` from the density.
    pub det_error: f64,
    pub kink: f64,
    pub degenerate: bool,
    pub sharp_exponent: f64,
}

#[derive(Clone, Debug)]
pub struct WangSolution {
    pub field: WangField,
    pub report: WangReport,
}

/// Builds the normalized homogeneous solution and verifies scaling and pinch.
pub fn wang_construct(alpha: f64, tol_scale: f64) -> Result<WangSolution> {
    let raw = Arc::new(wang_profile(alpha)?);
    let field = WangField::normalized(raw.clone());
    let mut scale_error = 0.0f64;
    let mut det_error = 0.0f64;
    let mut lam = f64::INFINITY;
    let mut big = 0.0f64;
    let m = 41;
    for i in 0..m {
        for j in 0..m {
            let x = -1.0 + 2.0 * (i as f64 + 0.37) / m as f64;
            let y = -1.0 + 2.0 * (j as f64 + 0.61) / m as f64;
            let p = [x, y, 0.0];
            let u = field.value(p);
            for t in [0.25, 0.5, 0.75, 1.0] {
                let q = [t * x, t.powf(alpha) * y, 0.0];
                let lhs = field.value(q);
                let rhs = t.powf(1.0 + alpha) * u;
                scale_error = scale_error.max((lhs - rhs).abs() / u.abs().max(1e-300));
            }
            let h = field.hessian(p);
            let det = h.det();
            let g = field.density(p);
            det_error = det_error.max((det - g).abs() / g);
            lam = lam.min(det);
            big = big.max(det);
        }
    }
    if !(lam > 0.0) {
        return Err(Error::PinchFailure(lam));
    }
    let report = WangReport {
        alpha,
        s1: raw.s1,
        kappa: raw.kappa,
        lambda_w: lam,
        big_lambda_w: big,
        scale_error,
        det_error,
        kink: raw.kink(),
        degenerate: raw.degenerate,
        sharp_exponent: if alpha > 1.0 { (alpha + 1.0) / (alpha - 1.0) } else { f64::INFINITY },
    };
    if scale_error > tol_scale {
        return Err(Error::ProfileBlowup(format!("scaling identity off by {scale_error:e}")));
    }
    Ok(WangSolution { field, report })
}

/// Solved-field test problem with a two-valued density: a homogeneous
/// profile with prescribed `kappa`, scaled so that its density takes the values
/// `2 / (1 + kappa)` and `2 kappa / (1 + kappa)`, on the convex domain `{U < level}`.
#[derive(Clone, Debug)]
pub struct OscillatoryProblem {
    pub field: WangField,
    pub level: f64,
    pub domain: DomainSpec,
    pub lambda: f64,
    pub big_lambda: f64,
}

impl OscillatoryProblem {
    /// `lambda = 0.1`, `Lambda = 1.9` with exponent 2.5.
    pub fn standard() -> Result<OscillatoryProblem> {
        OscillatoryProblem::new(2.5, 19.0, 1.05, 720)
    }

    /// `margin` is the ratio of the domain's inradius to 1.
    pub fn new(alpha: f64, kappa: f64, margin: f64, samples: usize) -> Result<OscillatoryProblem> {
        let raw = Arc::new(wang_profile_with_kappa(alpha, kappa)?);
        let c = (2.0 / (1.0 + kappa)).sqrt();
        let (f1, level1) = WangField::with_extent(raw.clone(), c, 1.0);
        let poly1 = geometry::convex_hull(&f1.level_polygon(level1, samples));
        let rho = polygon_inradius(&poly1);
        let (field, level) = WangField::with_extent(raw, c, margin / rho);
        let poly = geometry::convex_hull(&field.level_polygon(level, samples));
        let domain = build_domain(&ShapeDescriptor::Polygon { vertices: poly })?;
        if domain.premap.is_some() {
            return Err(Error::NormalizationImpossible("level set needs rounding".into()));
        }
        Ok(OscillatoryProblem { field, level, domain, lambda: c * c, big_lambda: c * c * kappa })
    }

    pub fn rhs(&self) -> RhsSpec {
        let f = self.field.clone();
        RhsSpec::density("two-valued density", self.lambda, self.big_lambda, Arc::new(move |p| f.density(p)))
    }

    /// Reference solution `U - level`, exact up to the polygonal boundary.
    pub fn reference(&self) -> Shifted {
        Shifted { inner: Arc::new(self.field.clone()), shift: -self.level }
    }
}

fn polygon_inradius(v: &[[f64; 2]]) -> f64 {
    geometry::boundary_distance(v, [0.0, 0.0])
}

/// `inner + shift`.
#[derive(Clone)]
pub struct Shifted {
    pub inner: Arc<dyn Analytic>,
    pub shift: f64,
}

impl Analytic for Shifted {
    fn value(&self, p: [f64; 3]) -> f64 {
        self.inner.value(p) + self.shift
    }
    fn gradient(&self, p: [f64; 3]) -> [f64; 3] {
        self.inner.gradient(p)
    }
    fn hessian(&self, p: [f64; 3]) -> Sym {
        self.inner.hessian(p)
    }
    fn describe(&self) -> String {
        format!("{} {:+}", self.inner.describe(), self.shift)
    }
}
