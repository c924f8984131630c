//! Monotone wide-stencil discretization of det D^2 u = f with zero Dirichlet
//! data, solved by damped Newton iteration.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{DomainSpec, Shape};
use crate::error::{Error, Result};
use crate::field::{ConvexField, NodeKind, Quadratic, Sym};
use crate::grid::{norm, scale, Grid};

pub type DensityFn = Arc<dyn Fn([f64; 3]) -> f64 + Send + Sync>;

/// Right-hand side: a pinched density, or a (possibly degenerate) measure density.
#[derive(Clone)]
pub struct RhsSpec {
    pub label: String,
    pub f: DensityFn,
    pub lambda: f64,
    pub big_lambda: f64,
    /// Degenerate measure input; the lower pinch is not enforced.
    pub measure: bool,
}

impl std::fmt::Debug for RhsSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RhsSpec({}, [{}, {}])", self.label, self.lambda, self.big_lambda)
    }
}

impl RhsSpec {
    pub fn constant(c: f64) -> RhsSpec {
        RhsSpec { label: format!("f = {c}"), f: Arc::new(move |_| c), lambda: c, big_lambda: c, measure: false }
    }

    pub fn density(label: &str, lambda: f64, big_lambda: f64, f: DensityFn) -> RhsSpec {
        RhsSpec { label: label.to_string(), f, lambda, big_lambda, measure: false }
    }

    pub fn measure(label: &str, big_lambda: f64, f: DensityFn) -> RhsSpec {
        RhsSpec { label: label.to_string(), f, lambda: 0.0, big_lambda, measure: true }
    }

    pub fn eval(&self, p: [f64; 3]) -> f64 {
        (self.f)(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// Number of stencil directions: 4, 8 or 16 in 2D; 9 or 11 in 3D; 0 picks 8 or 9.
    pub directions: usize,
    /// Smallest damping factor tried by the line search.
    pub min_step: f64,
    /// Nodes closer than `guard` stencil lengths to the boundary are boundary nodes.
    pub guard: f64,
    pub init: InitKind,
}

/// Newton starting point; the other one is tried if the first fails.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// `Lambda^{1/n} (|x|^2 - R^2) / 2` with R the outer radius: a subsolution.
    Paraboloid,
    /// Solution of the linear problem `Delta u = n f^{1/n}`.
    Poisson,
    /// Solve on the grid with twice the spacing and interpolate; recursive
    /// down to 16 cells per axis.
    Nested,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { tol: 1e-8, max_iter: 80, directions: 0, min_step: 1.0 / 1024.0, guard: 1e-3, init: InitKind::Nested }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub residual: f64,
    pub residual_l1: f64,
    pub directions: usize,
    pub unknowns: usize,
    pub init: String,
    pub damped_steps: usize,
    /// Kept out of serialized reports so that reruns are byte-identical.
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// Directions and orthogonal frames of the wide stencil.
#[derive(Clone, Debug)]
pub struct Frames {
    pub dirs: Vec<[i32; 3]>,
    pub frames: Vec<Vec<usize>>,
}

pub fn frames(n: usize, directions: usize) -> Result<Frames> {
    let cfg = if directions == 0 { if n == 2 { 8 } else { 9 } } else { directions };
    let (dirs, frames): (Vec<[i32; 3]>, Vec<Vec<usize>>) = match (n, cfg) {
        (2, 4 | 8 | 16) => {
            let mut pairs: Vec<([i32; 3], [i32; 3])> = vec![([1, 0, 0], [0, 1, 0]), ([1, 1, 0], [1, -1, 0])];
            if cfg >= 8 {
                pairs.push(([2, 1, 0], [1, -2, 0]));
                pairs.push(([1, 2, 0], [2, -1, 0]));
            }
            if cfg >= 16 {
                pairs.push(([3, 1, 0], [1, -3, 0]));
                pairs.push(([1, 3, 0], [3, -1, 0]));
                pairs.push(([3, 2, 0], [2, -3, 0]));
                pairs.push(([2, 3, 0], [3, -2, 0]));
            }
            let mut dirs = Vec::new();
            let mut frames = Vec::new();
            for (a, b) in pairs {
                frames.push(vec![dirs.len(), dirs.len() + 1]);
                dirs.push(a);
                dirs.push(b);
            }
            (dirs, frames)
        }
        (3, 9 | 11) => {
            let mut dirs = vec![
                [1, 0, 0],
                [0, 1, 0],
                [0, 0, 1],
                [1, 1, 0],
                [1, -1, 0],
                [1, 0, 1],
                [1, 0, -1],
                [0, 1, 1],
                [0, 1, -1],
            ];
            let mut frames = vec![vec![0, 1, 2], vec![3, 4, 2], vec![5, 6, 1], vec![7, 8, 0]];
            if cfg == 11 {
                dirs.push([1, 1, 1]);
                dirs.push([1, 1, -2]);
                frames.push(vec![9, 4, 10]);
            }
            (dirs, frames)
        }
        _ => {
            return Err(Error::Config(format!("unsupported stencil: {cfg} directions in dimension {n}")));
        }
    };
    Ok(Frames { dirs, frames })
}

const ZERO: u32 = u32::MAX;

/// One second difference: `cp (u[ip] - u0) + cm (u[im] - u0)`, with `ZERO`
/// standing for a boundary point where u = 0.
#[derive(Clone, Copy, Debug)]
struct Coef {
    cp: f64,
    cm: f64,
    ip: u32,
    im: u32,
}

/// Evaluation rows of the scheme on a fixed grid.
struct Stencil {
    frames: Frames,
    rows: Vec<usize>,
    coefs: Vec<Coef>,
}

enum Arm {
    Node(usize, f64),
    Zero(f64),
    Missing,
}

fn arm(grid: &Grid, domain: Option<&DomainSpec>, usable: &dyn Fn(usize) -> bool, dirichlet: bool, idx: usize, d: [i32; 3]) -> Arm {
    let w = grid.displacement(d);
    let l = norm(w);
    if let Some(j) = grid.offset(idx, d) {
        if usable(j) {
            return Arm::Node(j, l);
        }
    }
    match (dirichlet, domain) {
        (true, Some(dom)) => {
            let t = dom.exit_distance(grid.point(idx), scale(w, 1.0 / l));
            if t.is_finite() {
                Arm::Zero(t.min(l))
            } else {
                Arm::Missing
            }
        }
        _ => Arm::Missing,
    }
}

fn second_difference(p: &Arm, m: &Arm) -> Option<Coef> {
    let (ip, hp) = match p {
        Arm::Node(j, h) => (*j as u32, *h),
        Arm::Zero(h) => (ZERO, *h),
        Arm::Missing => return None,
    };
    let (im, hm) = match m {
        Arm::Node(j, h) => (*j as u32, *h),
        Arm::Zero(h) => (ZERO, *h),
        Arm::Missing => return None,
    };
    if hp <= 0.0 || hm <= 0.0 {
        return None;
    }
    Some(Coef { cp: 2.0 / (hp * (hp + hm)), cm: 2.0 / (hm * (hp + hm)), ip, im })
}

impl Stencil {
    fn build(
        grid: &Grid,
        domain: Option<&DomainSpec>,
        kind: &[NodeKind],
        dirichlet: bool,
        frames: Frames,
    ) -> Stencil {
        let usable = |j: usize| kind[j] != NodeKind::Exterior;
        let nd = frames.dirs.len();
        let per: Vec<Option<Vec<Coef>>> = (0..grid.len())
            .into_par_iter()
            .map(|idx| {
                if kind[idx] != NodeKind::Interior {
                    return None;
                }
                let mut out = Vec::with_capacity(nd);
                for d in &frames.dirs {
                    let m = [-d[0], -d[1], -d[2]];
                    let c = second_difference(
                        &arm(grid, domain, &usable, dirichlet, idx, *d),
                        &arm(grid, domain, &usable, dirichlet, idx, m),
                    )?;
                    out.push(c);
                }
                Some(out)
            })
            .collect();
        let mut rows = Vec::new();
        let mut coefs = Vec::new();
        for (idx, p) in per.into_iter().enumerate() {
            if let Some(c) = p {
                rows.push(idx);
                coefs.extend(c);
            }
        }
        Stencil { frames, rows, coefs }
    }

    #[inline]
    fn diffs(&self, r: usize, u: &[f64], out: &mut [f64]) {
        let nd = self.frames.dirs.len();
        let u0 = u[self.rows[r]];
        for (k, c) in self.coefs[r * nd..(r + 1) * nd].iter().enumerate() {
            let up = if c.ip == ZERO { 0.0 } else { u[c.ip as usize] };
            let um = if c.im == ZERO { 0.0 } else { u[c.im as usize] };
            out[k] = c.cp * (up - u0) + c.cm * (um - u0);
        }
    }

    /// Scheme value and active frame at every row.
    fn eval(&self, u: &[f64]) -> (Vec<f64>, Vec<u16>) {
        let nd = self.frames.dirs.len();
        let res: Vec<(f64, u16)> = (0..self.rows.len())
            .into_par_iter()
            .map_init(
                || vec![0.0; nd],
                |buf, r| {
                    self.diffs(r, u, buf);
                    let mut best = f64::INFINITY;
                    let mut arg = 0u16;
                    for (k, fr) in self.frames.frames.iter().enumerate() {
                        let g = frame_value(fr.iter().map(|d| buf[*d]));
                        if g < best {
                            best = g;
                            arg = k as u16;
                        }
                    }
                    (best, arg)
                },
            )
            .collect();
        res.into_iter().unzip()
    }
}

/// `prod a_j^+ - sum a_j^-`.
#[inline]
fn frame_value(a: impl Iterator<Item = f64> + Clone) -> f64 {
    let prod: f64 = a.clone().map(|x| x.max(0.0)).product();
    let neg: f64 = a.map(|x| (-x).max(0.0)).sum();
    prod - neg
}

/// Solver node classification: interior nodes keep every stencil arm longer
/// than `guard` stencil lengths.
fn classify_for_solver(grid: &Grid, domain: &DomainSpec, fr: &Frames, guard: f64) -> Result<Vec<NodeKind>> {
    let kinds: Vec<Result<NodeKind>> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let p = grid.point(idx);
            if !domain.contains(p) {
                return Ok(NodeKind::Exterior);
            }
            for d in &fr.dirs {
                for s in [1, -1] {
                    let v = [s * d[0], s * d[1], s * d[2]];
                    let w = grid.displacement(v);
                    let l = norm(w);
                    let t = domain.exit_distance(p, scale(w, 1.0 / l));
                    if t < guard * l {
                        return Ok(NodeKind::Boundary);
                    }
                    if t > l && grid.offset(idx, v).is_none() {
                        return Err(Error::InsufficientStencil("grid does not cover the domain".into()));
                    }
                }
            }
            Ok(NodeKind::Interior)
        })
        .collect();
    kinds.into_iter().collect()
}

fn sparse_solve(n: usize, trip: &mut Vec<(usize, usize, f64)>, b: &mut [f64]) -> Result<()> {
    use faer::linalg::solvers::SolveCore;
    use faer::sparse::{SparseColMat, Triplet};
    let fail = || Error::NonConvergence { iterations: 0, residual: f64::NAN };
    trip.sort_by(|x, y| (x.1, x.0).cmp(&(y.1, y.0)));
    let mut merged: Vec<Triplet<usize, usize, f64>> = Vec::with_capacity(trip.len());
    for &(r, c, v) in trip.iter() {
        match merged.last_mut() {
            Some(t) if t.row == r && t.col == c => t.val += v,
            _ => merged.push(Triplet::new(r, c, v)),
        }
    }
    let a = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &merged).map_err(|_| fail())?;
    let lu = a.sp_lu().map_err(|_| fail())?;
    let mut rhs = faer::Mat::<f64>::from_fn(n, 1, |i, _| b[i]);
    lu.solve_in_place_with_conj(faer::Conj::No, rhs.as_mut());
    for (i, bi) in b.iter_mut().enumerate() {
        *bi = rhs[(i, 0)];
    }
    Ok(())
}

struct Problem {
    st: Stencil,
    f: Vec<f64>,
    pos: Vec<u32>,
    h: f64,
}

impl Problem {
    fn residual(&self, u: &[f64]) -> (Vec<f64>, Vec<u16>) {
        let (g, act) = self.st.eval(u);
        (g.iter().zip(&self.f).map(|(a, b)| a - b).collect(), act)
    }

    fn jacobian(&self, u: &[f64], act: &[u16]) -> Vec<(usize, usize, f64)> {
        let nd = self.st.frames.dirs.len();
        let rows: Vec<Vec<(usize, usize, f64)>> = (0..self.st.rows.len())
            .into_par_iter()
            .map_init(
                || vec![0.0; nd],
                |buf, r| {
                    self.st.diffs(r, u, buf);
                    let fr = &self.st.frames.frames[act[r] as usize];
                    let mut out = Vec::with_capacity(1 + 2 * fr.len());
                    let mut diag = 0.0;
                    for (j, dj) in fr.iter().enumerate() {
                        let a = buf[*dj];
                        let w = if a > 0.0 {
                            fr.iter()
                                .enumerate()
                                .filter(|(l, _)| *l != j)
                                .map(|(_, dl)| buf[*dl].max(0.0))
                                .product::<f64>()
                                .max(1e-8)
                        } else {
                            1.0
                        };
                        let c = self.st.coefs[r * nd + dj];
                        diag -= w * (c.cp + c.cm);
                        for (idx, cc) in [(c.ip, c.cp), (c.im, c.cm)] {
                            if idx != ZERO {
                                let col = self.pos[idx as usize];
                                if col != ZERO {
                                    out.push((r, col as usize, w * cc));
                                }
                            }
                        }
                    }
                    out.push((r, r, diag));
                    out
                },
            )
            .collect();
        rows.into_iter().flatten().collect()
    }

    fn scatter(&self, u: &mut [f64], dx: &[f64], theta: f64) {
        for (r, idx) in self.st.rows.iter().enumerate() {
            u[*idx] += theta * dx[r];
        }
    }
}

fn linf(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Checks the density against its declared pinch at every unknown.
fn validate_rhs(rhs: &RhsSpec, f: &[f64]) -> Result<()> {
    if !rhs.measure && !(rhs.lambda > 0.0) {
        return Err(Error::DegenerateRhs(format!("lambda = {}", rhs.lambda)));
    }
    let lo = if rhs.measure { 0.0 } else { rhs.lambda };
    for v in f {
        if !v.is_finite() || *v < lo * (1.0 - 1e-12) || *v > rhs.big_lambda * (1.0 + 1e-12) {
            return Err(Error::DegenerateRhs(format!(
                "density value {v} outside [{lo}, {}]",
                rhs.big_lambda
            )));
        }
    }
    Ok(())
}

pub fn solve_dirichlet(
    grid: &Grid,
    domain: &DomainSpec,
    rhs: &RhsSpec,
    cfg: &SolverConfig,
) -> Result<(ConvexField, SolveReport)> {
    let start = Instant::now();
    if grid.n != domain.n {
        return Err(Error::Config("grid and domain dimensions differ".into()));
    }
    if !grid.is_isotropic() {
        return Err(Error::Config("the solver needs equal spacing on every axis".into()));
    }
    let fr = frames(grid.n, cfg.directions)?;
    let ndirs = fr.dirs.len();
    let kind = classify_for_solver(grid, domain, &fr, cfg.guard)?;
    let st = Stencil::build(grid, Some(domain), &kind, true, fr);
    if st.rows.is_empty() {
        return Err(Error::InsufficientStencil("no interior unknowns".into()));
    }
    let mut pos = vec![ZERO; grid.len()];
    for (r, idx) in st.rows.iter().enumerate() {
        pos[*idx] = r as u32;
    }
    let f: Vec<f64> = st.rows.iter().map(|i| rhs.eval(grid.point(*i))).collect();
    validate_rhs(rhs, &f)?;
    let prob = Problem { st, f, pos, h: grid.spacing[0] };
    let n = grid.n as f64;

    let paraboloid = || {
        let r = domain.outer_radius();
        let c = rhs.big_lambda.powf(1.0 / n);
        let mut u = vec![0.0; grid.len()];
        for idx in &prob.st.rows {
            let p = grid.point(*idx);
            u[*idx] = 0.5 * c * (crate::grid::dot(p, p) - r * r);
        }
        Ok(u)
    };
    let nested = || -> Result<Vec<f64>> {
        let coarse = coarsen(grid).ok_or_else(|| Error::InsufficientStencil("grid too coarse to nest".into()))?;
        let (uc, _) = solve_dirichlet(&coarse, domain, rhs, cfg)?;
        let mut u = vec![0.0; grid.len()];
        for idx in &prob.st.rows {
            let q = grid.point(*idx);
            u[*idx] = cubic_interpolate(&uc, q).unwrap_or_else(|| interpolate(&uc, q));
        }
        Ok(u)
    };
    type Init<'a> = (&'static str, Box<dyn Fn() -> Result<Vec<f64>> + 'a>);
    let attempts: Vec<Init> = match cfg.init {
        InitKind::Nested if coarsen(grid).is_some() => vec![
            ("nested", Box::new(nested)),
            ("paraboloid", Box::new(paraboloid)),
            ("poisson", Box::new(|| poisson_init(grid, &prob))),
        ],
        InitKind::Poisson => vec![
            ("poisson", Box::new(|| poisson_init(grid, &prob))),
            ("paraboloid", Box::new(paraboloid)),
        ],
        _ => vec![
            ("paraboloid", Box::new(paraboloid)),
            ("poisson", Box::new(|| poisson_init(grid, &prob))),
        ],
    };
    let mut last_err = None;
    for (name, init) in attempts {
        let u0 = match init() {
            Ok(u0) => u0,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        match newton(&prob, u0, cfg) {
            Ok((u, it, res, damped)) => {
                let (r, _) = prob.residual(&u);
                let residual_l1 = r.iter().map(|x| x.abs()).sum::<f64>() * grid.cell_volume();
                let field = ConvexField {
                    grid: grid.clone(),
                    values: u,
                    kind,
                    domain: Some(domain.clone()),
                    dirichlet_zero: true,
                    analytic: None,
                    label: format!("solution of det D2u = {}", rhs.label),
                };
                let report = SolveReport {
                    iterations: it,
                    residual: res,
                    residual_l1,
                    directions: ndirs,
                    unknowns: prob.st.rows.len(),
                    init: name.to_string(),
                    damped_steps: damped,
                    wall_time_s: start.elapsed().as_secs_f64(),
                };
                return Ok((field, report));
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap())
}

/// Grid with twice the spacing over the same extent, if the node counts allow it.
fn coarsen(grid: &Grid) -> Option<Grid> {
    let mut g = grid.clone();
    for a in 0..grid.n {
        let cells = grid.dims[a] - 1;
        if cells % 2 != 0 || cells / 2 < 16 {
            return None;
        }
        g.dims[a] = cells / 2 + 1;
        g.spacing[a] = 2.0 * grid.spacing[a];
    }
    Some(g)
}

/// Multilinear interpolation of node values (exterior nodes hold 0).
pub fn interpolate(u: &ConvexField, p: [f64; 3]) -> f64 {
    let g = &u.grid;
    let mut base = [0usize; 3];
    let mut frac = [0.0; 3];
    for a in 0..g.n {
        let t = ((p[a] - g.origin[a]) / g.spacing[a]).clamp(0.0, (g.dims[a] - 1) as f64);
        let i = (t.floor() as usize).min(g.dims[a].saturating_sub(2));
        base[a] = i;
        frac[a] = t - i as f64;
    }
    let corners = 1usize << g.n;
    let mut acc = 0.0;
    for m in 0..corners {
        let mut c = base;
        let mut w = 1.0;
        for a in 0..g.n {
            if m & (1 << a) != 0 {
                c[a] += 1;
                w *= frac[a];
            } else {
                w *= 1.0 - frac[a];
            }
        }
        if w != 0.0 {
            acc += w * u.values[g.index(c)];
        }
    }
    acc
}

fn keys_weights(t: f64) -> [f64; 4] {
    // Cubic convolution with a = -1/2 at offsets -1, 0, 1, 2 from the base node.
    let k = |x: f64| {
        let x = x.abs();
        if x <= 1.0 {
            1.5 * x * x * x - 2.5 * x * x + 1.0
        } else if x < 2.0 {
            -0.5 * x * x * x + 2.5 * x * x - 4.0 * x + 2.0
        } else {
            0.0
        }
    };
    [k(t + 1.0), k(t), k(1.0 - t), k(2.0 - t)]
}

/// Keys cubic convolution (exact on quadratics); `None` when the 4^n
/// neighborhood leaves the grid or touches exterior nodes.
pub fn cubic_interpolate(u: &ConvexField, p: [f64; 3]) -> Option<f64> {
    let g = &u.grid;
    let mut base = [0i64; 3];
    let mut w = [[0.0; 4]; 3];
    for a in 0..3 {
        if a >= g.n {
            w[a] = [0.0, 1.0, 0.0, 0.0];
            continue;
        }
        let t = (p[a] - g.origin[a]) / g.spacing[a];
        let i = t.floor();
        base[a] = i as i64;
        w[a] = keys_weights(t - i);
        if base[a] - 1 < 0 || base[a] + 2 >= g.dims[a] as i64 {
            return None;
        }
    }
    let mut acc = 0.0;
    let kr = if g.n == 3 { 0..4 } else { 1..2 };
    for k in kr {
        for j in 0..4 {
            for i in 0..4 {
                let wt = w[0][i] * w[1][j] * w[2][k];
                if wt == 0.0 {
                    continue;
                }
                let c = [
                    (base[0] + i as i64 - 1) as usize,
                    (base[1] + j as i64 - 1) as usize,
                    if g.n == 3 { (base[2] + k as i64 - 1) as usize } else { 0 },
                ];
                let idx = g.index(c);
                if u.kind[idx] == NodeKind::Exterior {
                    return None;
                }
                acc += wt * u.values[idx];
            }
        }
    }
    Some(acc)
}

/// Linear start: `Delta u = n f^{1/n}` along the axis frame.
fn poisson_init(grid: &Grid, prob: &Problem) -> Result<Vec<f64>> {
    let nd = prob.st.frames.dirs.len();
    let axis = &prob.st.frames.frames[0];
    let nrows = prob.st.rows.len();
    let mut trip = Vec::new();
    let mut b = vec![0.0; nrows];
    let n = grid.n as f64;
    for r in 0..nrows {
        let mut diag = 0.0;
        for d in axis {
            let c = prob.st.coefs[r * nd + d];
            diag -= c.cp + c.cm;
            for (idx, cc) in [(c.ip, c.cp), (c.im, c.cm)] {
                if idx != ZERO && prob.pos[idx as usize] != ZERO {
                    trip.push((r, prob.pos[idx as usize] as usize, cc));
                }
            }
        }
        trip.push((r, r, diag));
        b[r] = n * prob.f[r].max(0.0).powf(1.0 / n);
    }
    sparse_solve(nrows, &mut trip, &mut b)?;
    let mut u = vec![0.0; grid.len()];
    prob.scatter(&mut u, &b, 1.0);
    Ok(u)
}

fn newton(prob: &Problem, mut u: Vec<f64>, cfg: &SolverConfig) -> Result<(Vec<f64>, usize, f64, usize)> {
    let nrows = prob.st.rows.len();
    // Rows next to the boundary have short arms and stiff residuals; the merit
    // function weights them by the squared arm length relative to an axis arm.
    let nd = prob.st.frames.dirs.len();
    let s = prob.h;
    let weights: Vec<f64> = (0..nrows)
        .map(|r| {
            let big = prob.st.coefs[r * nd..(r + 1) * nd].iter().map(|c| c.cp + c.cm).fold(0.0, f64::max);
            (2.0 / (s * s * big)).min(1.0)
        })
        .collect();
    let merit_of = |r: &[f64]| r.iter().zip(&weights).map(|(x, w)| (x * w).powi(2)).sum::<f64>().sqrt();
    let (mut r, mut act) = prob.residual(&u);
    let mut res = linf(&r);
    let mut damped = 0;
    for it in 0..cfg.max_iter {
        if res <= cfg.tol {
            return Ok((u, it, res, damped));
        }
        let mut trip = prob.jacobian(&u, &act);
        let mut dx: Vec<f64> = r.iter().map(|x| -x).collect();
        sparse_solve(nrows, &mut trip, &mut dx)?;
        if dx.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonConvergence { iterations: it, residual: res });
        }
        let merit = merit_of(&r);
        let mut theta = 1.0;
        let mut best: Option<(f64, f64)> = None;
        let accepted = loop {
            let mut trial = u.clone();
            prob.scatter(&mut trial, &dx, theta);
            let (rt, at) = prob.residual(&trial);
            let m = merit_of(&rt);
            if m <= (1.0 - 1e-4 * theta) * merit {
                break Some((trial, rt, at, theta));
            }
            if best.map_or(true, |b| m < b.1) {
                best = Some((theta, m));
            }
            theta *= 0.5;
            if theta < cfg.min_step {
                break None;
            }
        };
        let (trial, rt, at, theta) = match accepted {
            Some(a) => a,
            None => match best {
                // No sufficient decrease: take the best trial if it improves at all.
                Some((t, m)) if m < merit => {
                    let mut trial = u.clone();
                    prob.scatter(&mut trial, &dx, t);
                    let (rt, at) = prob.residual(&trial);
                    (trial, rt, at, t)
                }
                _ => return Err(Error::NonConvergence { iterations: it, residual: res }),
            },
        };
        if theta < 1.0 {
            damped += 1;
        }
        u = trial;
        r = rt;
        act = at;
        res = linf(&r);
    }
    if res <= cfg.tol {
        Ok((u, cfg.max_iter, res, damped))
    } else {
        Err(Error::NonConvergence { iterations: cfg.max_iter, residual: res })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResidualStats {
    pub max: f64,
    pub l1: f64,
    pub nodes: usize,
}

/// Scheme residual of an arbitrary field. Dirichlet fields use the solver's
/// boundary treatment; other fields are evaluated only where every stencil
/// arm lands on a grid node.
pub fn residual(u: &ConvexField, rhs: &RhsSpec, directions: usize) -> Result<ResidualStats> {
    let fr = frames(u.grid.n, directions)?;
    let st = Stencil::build(&u.grid, u.domain.as_ref(), &u.kind, u.dirichlet_zero, fr);
    let (g, _) = st.eval(&u.values);
    let mut max = 0.0f64;
    let mut l1 = 0.0;
    for (v, idx) in g.iter().zip(&st.rows) {
        let d = (v - rhs.eval(u.grid.point(*idx))).abs();
        max = max.max(d);
        l1 += d;
    }
    Ok(ResidualStats { max, l1: l1 * u.grid.cell_volume(), nodes: st.rows.len() })
}

/// `u(x) = c^{1/n} (|x|^2 - R^2) / 2` on the ball of radius R.
pub fn radial_reference(grid: &Grid, radius: f64, c: f64) -> ConvexField {
    let n = grid.n;
    let k = c.powf(1.0 / n as f64);
    let domain = DomainSpec {
        n,
        shape: Shape::Ball { radius },
        premap: None,
        inradius: radius,
        circumradius: radius,
        contains_unit_ball: radius >= 1.0,
        inside_ball_n: radius <= n as f64,
    };
    let q = Quadratic { m: Sym::diag(n, [k; 3]), b: [0.0; 3], c: -0.5 * k * radius * radius };
    let mut u = ConvexField::from_analytic(grid.clone(), Some(domain), Arc::new(q));
    u.dirichlet_zero = true;
    u.label = format!("radial reference R = {radius}, c = {c}");
    u
}
