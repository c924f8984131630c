//! Degenerate right-hand sides `mu = sum g_i |P_i|^{alpha_i} dx`, the
//! doubling-type condition `mu(E)/mu(S) >= gamma (|E|/|S|)^beta` and the
//! regularity pipeline driven by such a measure.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{AffineMap, DomainSpec};
use crate::error::{Error, Result};
use crate::field::{discrete_hessian, sup_norm_and_interior, ConvexField, HessianField};
use crate::grid::Grid;
use crate::regularity::{
    decay_iterate_with, level_decompose, measure_decay_check, tail_bound_check, DecayReport, LevelDecomposition,
    MeasureDecay, TailReport,
};
use crate::sections::{compute_section, john_normalize, estimate_delta, Normalization, Section};
use crate::solver::{solve_dirichlet, DensityFn, RhsSpec, SolveReport, SolverConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub coef: f64,
    pub powers: [u32; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polynomial {
    pub monomials: Vec<Monomial>,
}

impl Polynomial {
    pub fn eval(&self, p: [f64; 3]) -> f64 {
        self.monomials
            .iter()
            .map(|m| m.coef * p[0].powi(m.powers[0] as i32) * p[1].powi(m.powers[1] as i32) * p[2].powi(m.powers[2] as i32))
            .sum()
    }

    pub fn is_zero(&self) -> bool {
        self.monomials.iter().all(|m| m.coef == 0.0)
    }

    pub fn is_constant(&self) -> bool {
        self.monomials.iter().all(|m| m.coef == 0.0 || m.powers == [0, 0, 0])
    }

    /// The coordinate `x_{axis+1}`.
    pub fn coordinate(axis: usize) -> Polynomial {
        let mut powers = [0; 3];
        powers[axis] = 1;
        Polynomial { monomials: vec![Monomial { coef: 1.0, powers }] }
    }

    pub fn one() -> Polynomial {
        Polynomial { monomials: vec![Monomial { coef: 1.0, powers: [0; 3] }] }
    }
}

/// The bounded factor `g_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Weight {
    Constant { value: f64 },
    /// `mean + amplitude cos(frequency . x)`.
    Cosine { mean: f64, amplitude: f64, frequency: [f64; 3] },
    /// Only the bounds are known; the midpoint is used.
    Bounds,
}

impl Default for Weight {
    fn default() -> Weight {
        Weight::Bounds
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub lambda: f64,
    pub big_lambda: f64,
    #[serde(default)]
    pub weight: Weight,
    pub poly: Polynomial,
    pub alpha: f64,
}

impl Term {
    fn g(&self, p: [f64; 3]) -> f64 {
        match &self.weight {
            Weight::Constant { value } => *value,
            Weight::Cosine { mean, amplitude, frequency } => {
                mean + amplitude * (frequency[0] * p[0] + frequency[1] * p[1] + frequency[2] * p[2]).cos()
            }
            Weight::Bounds => 0.5 * (self.lambda + self.big_lambda),
        }
    }

    pub fn density(&self, p: [f64; 3]) -> f64 {
        let v = self.poly.eval(p).abs();
        let pow = if self.alpha == 0.0 { 1.0 } else { v.powf(self.alpha) };
        self.g(p) * pow
    }
}

pub const MAX_TERMS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureSpec {
    pub terms: Vec<Term>,
    /// Overall factor applied by mass normalization.
    #[serde(default = "unit")]
    pub scale: f64,
}

fn unit() -> f64 {
    1.0
}

impl MeasureSpec {
    pub fn lebesgue() -> MeasureSpec {
        MeasureSpec::single(Polynomial::one(), 0.0)
    }

    /// `|x_1|^alpha dx`.
    pub fn power_x1(alpha: f64) -> MeasureSpec {
        MeasureSpec::single(Polynomial::coordinate(0), alpha)
    }

    fn single(poly: Polynomial, alpha: f64) -> MeasureSpec {
        MeasureSpec {
            terms: vec![Term { lambda: 1.0, big_lambda: 1.0, weight: Weight::Constant { value: 1.0 }, poly, alpha }],
            scale: 1.0,
        }
    }

    pub fn from_json(text: &str) -> Result<MeasureSpec> {
        let m: MeasureSpec = serde_json::from_str(text).map_err(|e| Error::Config(format!("measure spec: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.terms.is_empty() || self.terms.len() > MAX_TERMS {
            return Err(Error::Config(format!("measure needs 1 to {MAX_TERMS} terms, got {}", self.terms.len())));
        }
        if !(self.scale > 0.0) {
            return Err(Error::Config(format!("measure scale {} must be positive", self.scale)));
        }
        for (i, t) in self.terms.iter().enumerate() {
            if !(t.lambda > 0.0) || t.big_lambda < t.lambda {
                return Err(Error::Config(format!("term {i}: bounds [{}, {}] invalid", t.lambda, t.big_lambda)));
            }
            if !(t.alpha >= 0.0) {
                return Err(Error::Config(format!("term {i}: exponent {} negative", t.alpha)));
            }
            if t.poly.is_zero() {
                return Err(Error::Config(format!("term {i}: polynomial vanishes identically")));
            }
            let (lo, hi) = match &t.weight {
                Weight::Constant { value } => (*value, *value),
                Weight::Cosine { mean, amplitude, .. } => (mean - amplitude.abs(), mean + amplitude.abs()),
                Weight::Bounds => (t.lambda, t.big_lambda),
            };
            if lo < t.lambda * (1.0 - 1e-12) || hi > t.big_lambda * (1.0 + 1e-12) {
                return Err(Error::Config(format!("term {i}: weight range [{lo}, {hi}] leaves its bounds")));
            }
        }
        Ok(())
    }

    /// Some factor is known by its bounds only.
    pub fn bounds_only(&self) -> bool {
        self.terms.iter().any(|t| t.weight == Weight::Bounds)
    }

    pub fn density(&self, p: [f64; 3]) -> f64 {
        self.scale * self.terms.iter().map(|t| t.density(p)).sum::<f64>()
    }

    pub fn density_fn(&self) -> DensityFn {
        let m = self.clone();
        Arc::new(move |p| m.density(p))
    }

    /// `P_i` for the terms that degenerate.
    pub fn zero_sets(&self) -> Vec<DensityFn> {
        self.terms
            .iter()
            .filter(|t| t.alpha > 0.0 && !t.poly.is_constant())
            .map(|t| {
                let p = t.poly.clone();
                Arc::new(move |x: [f64; 3]| p.eval(x)) as DensityFn
            })
            .collect()
    }

    /// Rescales so that `mu(domain) <= 1` on the grid quadrature.
    pub fn normalized(&self, grid: &Grid, domain: &DomainSpec) -> MeasureSpec {
        let mask: Vec<bool> = (0..grid.len()).map(|i| domain.contains(grid.point(i))).collect();
        let mass = mu_of_set(self, grid, &mask);
        let mut out = self.clone();
        if mass > 1.0 {
            out.scale /= mass;
        }
        out
    }
}

/// Cell quadrature of the density over a node mask.
pub fn mu_of_set(spec: &MeasureSpec, grid: &Grid, mask: &[bool]) -> f64 {
    let cell = grid.cell_volume();
    (0..grid.len()).filter(|&i| mask[i]).map(|i| spec.density(grid.point(i))).sum::<f64>() * cell
}

/// Density and degeneracy sets fed to the doubling sampler.
#[derive(Clone)]
pub struct DoublingInput {
    pub density: DensityFn,
    pub zero_sets: Vec<DensityFn>,
}

impl DoublingInput {
    pub fn from_spec(spec: &MeasureSpec) -> DoublingInput {
        DoublingInput { density: spec.density_fn(), zero_sets: spec.zero_sets() }
    }

    /// Push-forward under `x -> a x + b` with `det a = 1`.
    pub fn pushed(&self, a: [[f64; 2]; 2], b: [f64; 2]) -> DoublingInput {
        let inv = crate::geometry::inverse2(&a);
        let back = move |y: [f64; 3]| {
            let q = crate::geometry::apply2(&inv, [y[0] - b[0], y[1] - b[1]]);
            [q[0], q[1], 0.0]
        };
        let d = self.density.clone();
        DoublingInput {
            density: Arc::new(move |y| d(back(y))),
            zero_sets: self
                .zero_sets
                .iter()
                .map(|z| {
                    let z = z.clone();
                    Arc::new(move |y: [f64; 3]| z(back(y))) as DensityFn
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub sets: usize,
    pub subsets: usize,
    /// Quadrature cells per axis of the reference body.
    pub resolution: usize,
    /// Slab widths `2^-j max|P|`, `j = 1..=slab_levels`.
    pub slab_levels: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> SamplerConfig {
        SamplerConfig { sets: 200, subsets: 50, resolution: 192, slab_levels: 7, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyKind {
    Ellipse,
    Triangle,
}

/// Convex body `S = a Ref + b` with `Ref` the unit disk or the standard simplex.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ConvexBody {
    pub kind: BodyKind,
    pub a: [[f64; 2]; 2],
    pub b: [f64; 2],
    pub seed: u64,
}

impl ConvexBody {
    fn reference_nodes(&self, res: usize) -> Vec<[f64; 2]> {
        let mut out = Vec::new();
        for j in 0..res {
            for i in 0..res {
                match self.kind {
                    BodyKind::Ellipse => {
                        let q = [-1.0 + (2 * i + 1) as f64 / res as f64, -1.0 + (2 * j + 1) as f64 / res as f64];
                        if q[0] * q[0] + q[1] * q[1] < 1.0 {
                            out.push(q);
                        }
                    }
                    BodyKind::Triangle => {
                        let q = [(2 * i + 1) as f64 / (2 * res) as f64, (2 * j + 1) as f64 / (2 * res) as f64];
                        if q[0] + q[1] < 1.0 {
                            out.push(q);
                        }
                    }
                }
            }
        }
        out
    }

    fn image(&self, q: [f64; 2]) -> [f64; 3] {
        let p = crate::geometry::apply2(&self.a, q);
        [p[0] + self.b[0], p[1] + self.b[1], 0.0]
    }

    /// `T' S` for `T' x = a x + b`.
    pub fn mapped(&self, a: [[f64; 2]; 2], b: [f64; 2]) -> ConvexBody {
        let m = [
            [a[0][0] * self.a[0][0] + a[0][1] * self.a[1][0], a[0][0] * self.a[0][1] + a[0][1] * self.a[1][1]],
            [a[1][0] * self.a[0][0] + a[1][1] * self.a[1][0], a[1][0] * self.a[0][1] + a[1][1] * self.a[1][1]],
        ];
        let s = crate::geometry::apply2(&a, self.b);
        ConvexBody { kind: self.kind, a: m, b: [s[0] + b[0], s[1] + b[1]], seed: self.seed }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetKind {
    /// Slab around a zero set splitting the body with at least `CENTRAL_CUT` on each side.
    CentralSlab,
    Slab,
    Ball,
    HalfPlane,
    Scatter,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RatioSample {
    pub body: usize,
    pub kind: SubsetKind,
    /// `|E| / |S|`
    pub lebesgue: f64,
    /// `mu(E) / mu(S)`
    pub mu: f64,
    /// Quadrature nodes in `E`.
    pub nodes: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MuInftyReport {
    pub gamma: f64,
    pub beta: f64,
    /// Least-squares slope of the lower envelope, before clamping at 1.
    pub envelope_slope: f64,
    pub envelope_rms: f64,
    /// Largest slope over slab sequences shrinking onto a zero set through the middle of a body.
    pub slab_slope: Option<f64>,
    /// Smallest `mu(E)/mu(S) / (|E|/|S|)^beta`, attained by `worst`.
    pub worst: RatioSample,
    pub samples: usize,
    pub description: String,
    #[serde(skip)]
    pub ratios: Vec<RatioSample>,
}

impl MuInftyReport {
    /// Every sample satisfies the fitted inequality.
    pub fn certified(&self) -> bool {
        self.ratios.iter().all(|r| r.mu >= self.gamma * r.lebesgue.powf(self.beta))
    }
}

pub const BETA_MAX: f64 = 16.0;
/// Volume fraction on each side of a zero set for its slabs to enter the exponent fit.
pub const CENTRAL_CUT: f64 = 0.25;
/// Thinnest slabs of each body used for the slab exponent.
const SLAB_FIT_POINTS: usize = 4;
/// Slabs with fewer nodes are too thin for the quadrature to resolve the density profile.
const SLAB_FIT_NODES: usize = 256;
/// Subsets with fewer quadrature nodes are skipped.
const MIN_SUBSET_NODES: usize = 4;

/// Random ellipses and triangles inside the domain.
pub fn sample_bodies(domain: &DomainSpec, cfg: &SamplerConfig) -> Vec<ConvexBody> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let r = domain.outer_radius();
    let point = |rng: &mut ChaCha8Rng| loop {
        let p = [rng.random_range(-r..r), rng.random_range(-r..r), 0.0];
        if domain.contains(p) {
            return [p[0], p[1]];
        }
    };
    let mut out = Vec::with_capacity(cfg.sets);
    while out.len() < cfg.sets {
        let seed = rng.random::<u64>();
        if out.len() % 2 == 0 {
            let c = point(&mut rng);
            let th = rng.random_range(0.0..PI);
            let (ax, ay) = (rng.random_range(0.05..0.6) * r, rng.random_range(0.05..0.6) * r);
            let (cs, sn) = (th.cos(), th.sin());
            let a = [[cs * ax, -sn * ay], [sn * ax, cs * ay]];
            let body = ConvexBody { kind: BodyKind::Ellipse, a, b: c, seed };
            let inside = (0..32).all(|k| {
                let t = 2.0 * PI * k as f64 / 32.0;
                domain.contains(body.image([t.cos(), t.sin()]))
            });
            if inside {
                out.push(body);
            }
        } else {
            let (p0, p1, p2) = (point(&mut rng), point(&mut rng), point(&mut rng));
            let a = [[p1[0] - p0[0], p2[0] - p0[0]], [p1[1] - p0[1], p2[1] - p0[1]]];
            if crate::geometry::det2(&a).abs() > 1e-3 * r * r {
                out.push(ConvexBody { kind: BodyKind::Triangle, a, b: p0, seed });
            }
        }
    }
    out
}

/// Ratios for every body; subsets are drawn in reference coordinates from the body's seed.
pub fn sample_ratios(input: &DoublingInput, bodies: &[ConvexBody], cfg: &SamplerConfig) -> Vec<RatioSample> {
    bodies
        .par_iter()
        .enumerate()
        .map(|(bi, body)| {
            let nodes = body.reference_nodes(cfg.resolution);
            let pts: Vec<[f64; 3]> = nodes.iter().map(|q| body.image(*q)).collect();
            let dens: Vec<f64> = pts.iter().map(|p| (input.density)(*p)).collect();
            let total: f64 = dens.iter().sum();
            let n = nodes.len() as f64;
            let mut out = Vec::new();
            let push = |kind: SubsetKind, mask: &dyn Fn(usize) -> bool, out: &mut Vec<RatioSample>| {
                let mut count = 0usize;
                let mut mass = 0.0;
                for i in 0..nodes.len() {
                    if mask(i) {
                        count += 1;
                        mass += dens[i];
                    }
                }
                if count >= MIN_SUBSET_NODES && count < nodes.len() {
                    out.push(RatioSample { body: bi, kind, lebesgue: count as f64 / n, mu: mass / total, nodes: count });
                }
            };
            for z in &input.zero_sets {
                let signed: Vec<f64> = pts.iter().map(|p| z(*p)).collect();
                let pos = signed.iter().filter(|v| **v > 0.0).count() as f64 / n;
                let kind = if pos.min(1.0 - pos) >= CENTRAL_CUT { SubsetKind::CentralSlab } else { SubsetKind::Slab };
                let vals: Vec<f64> = signed.iter().map(|v| v.abs()).collect();
                let top = vals.iter().cloned().fold(0.0, f64::max);
                for j in 1..=cfg.slab_levels {
                    let w = top * 0.5f64.powi(j as i32);
                    push(kind, &|i| vals[i] < w, &mut out);
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(body.seed);
            let mut k = 0;
            while out.len() < cfg.subsets && k < 4 * cfg.subsets {
                let q0 = nodes[rng.random_range(0..nodes.len())];
                match k % 3 {
                    0 => {
                        let rad = rng.random_range(0.02..1.0f64);
                        push(
                            SubsetKind::Ball,
                            &|i| (nodes[i][0] - q0[0]).powi(2) + (nodes[i][1] - q0[1]).powi(2) < rad * rad,
                            &mut out,
                        );
                    }
                    1 => {
                        let th = rng.random_range(0.0..2.0 * PI);
                        let d = [th.cos(), th.sin()];
                        let c = d[0] * q0[0] + d[1] * q0[1];
                        push(SubsetKind::HalfPlane, &|i| d[0] * nodes[i][0] + d[1] * nodes[i][1] < c, &mut out);
                    }
                    _ => {
                        let p = rng.random_range(0.01..0.9f64);
                        let keep: Vec<bool> = (0..nodes.len()).map(|_| rng.random::<f64>() < p).collect();
                        push(SubsetKind::Scatter, &|i| keep[i], &mut out);
                    }
                }
                k += 1;
            }
            out
        })
        .flatten()
        .collect()
}

/// Fits `(gamma, beta)`: `beta` from the lower envelope of `log mu-ratio` against
/// `log |E|/|S|` in dyadic bins, `gamma` as the largest constant valid for all samples.
pub fn fit_doubling(ratios: Vec<RatioSample>, description: String) -> Result<MuInftyReport> {
    if let Some(z) = ratios.iter().find(|r| !(r.mu > 0.0)) {
        return Err(Error::PropertyViolated(format!(
            "subset of relative volume {:.3e} carries no mass (body {})",
            z.lebesgue, z.body
        )));
    }
    let mut env: std::collections::BTreeMap<i64, f64> = Default::default();
    for r in &ratios {
        let bin = (-r.lebesgue.log2()).floor() as i64;
        let e = env.entry(bin).or_insert(f64::INFINITY);
        *e = e.min(r.mu.ln());
    }
    // Bin centers against the envelope.
    let xs: Vec<f64> = env.keys().map(|b| -(*b as f64 + 0.5) * std::f64::consts::LN_2).collect();
    let ys: Vec<f64> = env.values().cloned().collect();
    let (_, slope, rms) = crate::regularity::line_fit(&xs, &ys)
        .ok_or_else(|| Error::PropertyViolated(format!("only {} envelope bins", xs.len())))?;
    // Local slope at the finest scales.
    let n = xs.len();
    let local = if n >= 3 { (ys[n - 1] - ys[n - 3]) / (xs[n - 1] - xs[n - 3]) } else { slope };
    if !(slope <= BETA_MAX) || !(local <= BETA_MAX) {
        return Err(Error::PropertyViolated(format!("envelope slope {slope:.2} (finest {local:.2}) exceeds {BETA_MAX}")));
    }
    // Slab sequences of one body shrink onto a zero set and carry the extremal exponent.
    let mut slab_slope = f64::NEG_INFINITY;
    let mut by_body: std::collections::BTreeMap<usize, Vec<&RatioSample>> = Default::default();
    for r in ratios.iter().filter(|r| r.kind == SubsetKind::CentralSlab) {
        by_body.entry(r.body).or_default().push(r);
    }
    for seq in by_body.values() {
        let seq: Vec<&RatioSample> = seq.iter().copied().filter(|r| r.nodes >= SLAB_FIT_NODES).collect();
        let seq = &seq[seq.len().saturating_sub(SLAB_FIT_POINTS)..];
        let lx: Vec<f64> = seq.iter().map(|r| r.lebesgue.ln()).collect();
        let ly: Vec<f64> = seq.iter().map(|r| r.mu.ln()).collect();
        if let Some((_, b, _)) = crate::regularity::line_fit(&lx, &ly) {
            slab_slope = slab_slope.max(b);
        }
    }
    if !(slab_slope <= BETA_MAX) && slab_slope.is_finite() {
        return Err(Error::PropertyViolated(format!("slab slope {slab_slope:.2} exceeds {BETA_MAX}")));
    }
    let beta = slope.max(slab_slope).max(1.0);
    let (gamma, worst) = ratios
        .iter()
        .map(|r| (r.mu / r.lebesgue.powf(beta), *r))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .ok_or_else(|| Error::PropertyViolated("no samples".into()))?;
    // Absorb the rounding of the power so the certificate holds exactly.
    let gamma = gamma * (1.0 - 1e-12);
    Ok(MuInftyReport {
        gamma,
        beta,
        envelope_slope: slope,
        envelope_rms: rms,
        slab_slope: slab_slope.is_finite().then_some(slab_slope),
        worst,
        samples: ratios.len(),
        description,
        ratios,
    })
}

pub fn check_doubling_input(input: &DoublingInput, domain: &DomainSpec, cfg: &SamplerConfig) -> Result<MuInftyReport> {
    if domain.n != 2 {
        return Err(Error::Config("the doubling sampler is implemented in two dimensions".into()));
    }
    let bodies = sample_bodies(domain, cfg);
    let ratios = sample_ratios(input, &bodies, cfg);
    let desc = format!(
        "{} bodies (ellipses and triangles), up to {} subsets each, {} cells per axis, seed {}",
        cfg.sets, cfg.subsets, cfg.resolution, cfg.seed
    );
    fit_doubling(ratios, desc)
}

pub fn check_doubling(spec: &MeasureSpec, domain: &DomainSpec, cfg: &SamplerConfig) -> Result<MuInftyReport> {
    spec.validate()?;
    check_doubling_input(&DoublingInput::from_spec(spec), domain, cfg)
}

/// Normalization relative to `mu`: inclusion radii measured against `h mu(S_h)^{-1/n}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MuNormalization {
    pub john: Normalization,
    pub mass: f64,
    /// `h^{-1} mu(S_h)^{1/n}`
    pub scale: f64,
    /// `h^{-1} mu(S_h)^{2/n} ||A||^2`
    pub alpha: f64,
    pub sigma: f64,
}

impl MuNormalization {
    /// `x -> h^{-1} mu(S_h)^{1/n} A (x - x0)`.
    pub fn map(&self) -> AffineMap {
        let s = self.scale;
        let a = &self.john.matrix;
        let x0 = self.john.x0;
        let mut m = [[0.0; 3]; 3];
        for i in 0..2 {
            for j in 0..2 {
                m[i][j] = s * a[i][j];
            }
        }
        m[2][2] = 1.0;
        let shift = [-(m[0][0] * x0[0] + m[0][1] * x0[1]), -(m[1][0] * x0[0] + m[1][1] * x0[1]), 0.0];
        AffineMap { matrix: m, shift }
    }
}

pub fn mu_normalize_section(u: &ConvexField, sec: &Section, spec: &MeasureSpec) -> Result<MuNormalization> {
    let mask = sec.mask(u.grid.len());
    let mass = mu_of_set(spec, &u.grid, &mask);
    if !(mass > 0.0) {
        return Err(Error::ZeroMuMass);
    }
    let john = john_normalize(sec)?;
    let n = u.n() as f64;
    let scale = mass.powf(1.0 / n) / sec.height;
    let alpha = mass.powf(2.0 / n) / sec.height * john.alpha;
    // r_in B <= A(S - x0) <= r_out B, rescaled.
    let sigma = (john.r_in * scale).min(1.0 / (john.r_out * scale));
    Ok(MuNormalization { john, mass, scale, alpha, sigma })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GoodDeterminant {
    /// `int_{S_1} Delta u`
    pub c1_big: f64,
    /// `|S_delta(0)|`
    pub c1: f64,
    /// `gamma (c1/4)^{beta-1} / (2 C)` with `C = |S_1|^beta / mu(S_1)`.
    pub c2: f64,
    /// `|{||D^2 u|| <= 2 C1/c1} cap {det D^2 u > c2} cap S_delta(0)|`
    pub measure: f64,
    /// `c1 / 4`, the size the argument guarantees.
    pub expected: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Thm2Config {
    pub cells: usize,
    pub solver: SolverConfig,
    pub sampler: SamplerConfig,
    pub m: f64,
    pub delta_samples: usize,
}

impl Default for Thm2Config {
    fn default() -> Thm2Config {
        Thm2Config { cells: 128, solver: SolverConfig::default(), sampler: SamplerConfig::default(), m: 4.0, delta_samples: 40 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Thm2Report {
    pub measure: MeasureSpec,
    pub bounds_only: bool,
    pub doubling: MuInftyReport,
    pub solve: SolveReport,
    pub levels: LevelDecomposition,
    pub measure_decay: Option<MeasureDecay>,
    pub tails: TailReport,
    pub decay: DecayReport,
    pub good: GoodDeterminant,
    pub eps_fit: Option<f64>,
}

/// Mass-normalized measure on `grid` and the matching right-hand side.
pub fn mu_rhs(spec: &MeasureSpec, grid: &Grid, domain: &DomainSpec) -> (MeasureSpec, RhsSpec) {
    let spec = spec.normalized(grid, domain);
    let sup = (0..grid.len())
        .filter(|&i| domain.contains(grid.point(i)))
        .map(|i| spec.density(grid.point(i)))
        .fold(0.0, f64::max);
    let rhs = RhsSpec::measure("mu", sup, spec.density_fn());
    (spec, rhs)
}

/// Solves `det D^2 u = mu` and runs the level, tail and decay analysis with
/// `mu`-relative sizes.
pub fn thm2_pipeline(domain: &DomainSpec, spec: &MeasureSpec, cfg: &Thm2Config) -> Result<(ConvexField, Thm2Report)> {
    spec.validate()?;
    let doubling = check_doubling(spec, domain, &cfg.sampler).map_err(|e| e.in_stage("doubling"))?;
    let grid = Grid::cube(domain.n, domain.outer_radius() * 1.01, cfg.cells);
    let (spec, rhs) = mu_rhs(spec, &grid, domain);
    let (u, solve) = solve_dirichlet(&grid, domain, &rhs, &cfg.solver).map_err(|e| e.in_stage("solve"))?;
    let h = discrete_hessian(&u)?;
    let (supn, omega) = sup_norm_and_interior(&u)?;
    let levels = level_decompose(&h, &omega, cfg.m, None)?;
    let measure_decay = measure_decay_check(&levels).ok();
    let tails = tail_bound_check(&levels);

    let center = (0..grid.len())
        .filter(|&i| u.usable(i))
        .min_by(|&a, &b| u.values[a].total_cmp(&u.values[b]))
        .ok_or_else(|| Error::Config("no interior nodes".into()))?;
    let base = compute_section(&u, center, supn / 4.0).map_err(|e| e.in_stage("base section"))?;
    let delta = estimate_delta(&u, cfg.delta_samples, cfg.sampler.seed).map_err(|e| e.in_stage("engulfing"))?.delta;
    let good = good_determinant(&u, &h, &base, delta, &spec, &doubling)?;
    let bm = base.mask(grid.len());
    let base_levels = level_decompose(&h, &bm, cfg.m, None)?;
    let size = |s: &Section| mu_normalize_section(&u, s, &spec).map(|n| n.alpha);
    let mut decay = decay_iterate_with(&u, &h, &base, &base_levels, delta, 2.0, &size).map_err(|e| e.in_stage("decay"))?;
    decay.constants.c1 = Some(good.c1_big);
    decay.constants.c1_small = Some(good.c1);
    decay.constants.c2_small = Some(good.c2);
    let eps_fit = measure_decay.as_ref().map(|m| m.eps_fit);
    let report = Thm2Report {
        bounds_only: spec.bounds_only(),
        measure: spec,
        doubling,
        solve,
        levels,
        measure_decay,
        tails,
        decay,
        good,
        eps_fit,
    };
    Ok((u, report))
}

pub fn good_determinant(
    u: &ConvexField,
    h: &HessianField,
    base: &Section,
    delta: f64,
    spec: &MeasureSpec,
    doubling: &MuInftyReport,
) -> Result<GoodDeterminant> {
    let cell = u.grid.cell_volume();
    let c1_big: f64 =
        base.nodes.iter().filter(|&&i| h.valid[i as usize]).map(|&i| h.h[i as usize].trace()).sum::<f64>() * cell;
    let small = compute_section(u, base.center, delta * base.height)?;
    let c1 = small.measure;
    let mu_base = mu_of_set(spec, &u.grid, &base.mask(u.grid.len()));
    if !(mu_base > 0.0) {
        return Err(Error::ZeroMuMass);
    }
    let big_c = base.measure.powf(doubling.beta) / mu_base;
    let c2 = doubling.gamma * (c1 / 4.0).powf(doubling.beta - 1.0) / (2.0 * big_c);
    let bound = 2.0 * c1_big / c1;
    let measure = small
        .nodes
        .iter()
        .map(|&i| i as usize)
        .filter(|&i| h.valid[i] && h.norm[i] <= bound && h.h[i].det() > c2)
        .count() as f64
        * cell;
    Ok(GoodDeterminant { c1_big, c1, c2, measure, expected: c1 / 4.0 })
}
