//! Super-level sets of the Hessian norm, truncated energies, tail and
//! measure decay, and the `W^{2,1+eps}` integral.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{hessian, Analytic, ConvexField, HessianField, NodeKind};
use crate::wang::WangField;
use crate::sections::{compute_section, MIN_SECTION_NODES, john_normalize, rescale_solution, vitali_cover, Section};

/// Sets with fewer nodes are treated as empty.
pub const RESOLUTION_FLOOR: usize = 4;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Level {
    pub k: usize,
    pub threshold: f64,
    pub nodes: usize,
    pub measure: f64,
    pub energy: f64,
    pub resolved: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TailPoint {
    pub k_value: f64,
    pub nodes: usize,
    pub measure: f64,
    pub resolved: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LevelDecomposition {
    pub base: f64,
    pub region_nodes: usize,
    pub region_measure: f64,
    pub levels: Vec<Level>,
    pub tails: Vec<TailPoint>,
    /// Node lists of `D_k`.
    #[serde(skip)]
    pub sets: Vec<Vec<u32>>,
}

impl LevelDecomposition {
    /// Consecutive resolved levels starting at `k = 0`.
    pub fn resolved_levels(&self) -> usize {
        self.levels.iter().take_while(|l| l.resolved).count()
    }

    pub fn energies(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.energy).collect()
    }
}

/// Region nodes with a usable Hessian.
pub fn region_nodes(h: &HessianField, region: &[bool]) -> Vec<u32> {
    (0..h.grid.len()).filter(|&i| region[i] && h.valid[i]).map(|i| i as u32).collect()
}

/// Hessian norms with quadrature weights.
#[derive(Clone, Debug, Default)]
pub struct NormSamples {
    pub norms: Vec<f64>,
    pub weights: Vec<f64>,
}

impl NormSamples {
    pub fn from_hessian(h: &HessianField, region: &[bool]) -> NormSamples {
        let cell = h.grid.cell_volume();
        let nodes = region_nodes(h, region);
        NormSamples { norms: nodes.iter().map(|&i| h.norm[i as usize]).collect(), weights: vec![cell; nodes.len()] }
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    pub fn measure(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Samples ordered by decreasing norm.
    fn sorted(&self) -> (Vec<f64>, Vec<f64>) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.norms[b].total_cmp(&self.norms[a]));
        (idx.iter().map(|&i| self.norms[i]).collect(), idx.iter().map(|&i| self.weights[i]).collect())
    }
}

/// Nested boxes `(2^-j X, 2^{-a j} Y)`, `j = 0..=depth`, each sampled at
/// `nodes x nodes` cell centers; a sample belongs to the finest box holding it.
/// Resolves fields whose Hessian blows up at the origin with anisotropy `a`.
pub fn graded_samples(
    field: &dyn Analytic,
    half: [f64; 2],
    aniso: f64,
    nodes: usize,
    depth: usize,
    region: &(dyn Fn([f64; 3]) -> bool + Sync),
) -> NormSamples {
    let boxes: Vec<[f64; 2]> =
        (0..=depth + 1).map(|j| [half[0] * 0.5f64.powi(j as i32), half[1] * 0.5f64.powf(aniso * j as f64)]).collect();
    let per_box: Vec<NormSamples> = (0..=depth)
        .into_par_iter()
        .map(|j| {
            let b = boxes[j];
            let inner = boxes[j + 1];
            let (dx, dy) = (2.0 * b[0] / nodes as f64, 2.0 * b[1] / nodes as f64);
            let mut s = NormSamples::default();
            for iy in 0..nodes {
                let y = -b[1] + (iy as f64 + 0.5) * dy;
                for ix in 0..nodes {
                    let x = -b[0] + (ix as f64 + 0.5) * dx;
                    if j < depth && x.abs() < inner[0] && y.abs() < inner[1] {
                        continue;
                    }
                    let p = [x, y, 0.0];
                    if region(p) {
                        s.norms.push(field.hessian(p).norm());
                        s.weights.push(dx * dy);
                    }
                }
            }
            s
        })
        .collect();
    let mut out = NormSamples::default();
    for s in per_box {
        out.norms.extend(s.norms);
        out.weights.extend(s.weights);
    }
    out
}

/// Samples of a homogeneous solution over its unit section `{U < 1}`.
pub fn wang_samples(w: &WangField, nodes: usize, depth: usize) -> NormSamples {
    let b = w.level_box(1.0);
    graded_samples(w, [1.02 * b[0], 1.02 * b[1]], w.raw.alpha, nodes, depth, &|p| w.value(p) < 1.0)
}

/// `D_k = {||D^2 u|| >= M^k}` for `k = 0..=k_max`; with `k_max = None` levels
/// are added until one falls below the resolution floor.
pub fn level_decompose(h: &HessianField, region: &[bool], m: f64, k_max: Option<usize>) -> Result<LevelDecomposition> {
    let nodes = region_nodes(h, region);
    let mut d = level_decompose_samples(&NormSamples::from_hessian(h, region), m, k_max)?;
    d.sets = d
        .levels
        .iter()
        .map(|l| nodes.iter().copied().filter(|&i| h.norm[i as usize] >= l.threshold).collect())
        .collect();
    Ok(d)
}

/// As [`level_decompose`] without node lists.
pub fn level_decompose_samples(s: &NormSamples, m: f64, k_max: Option<usize>) -> Result<LevelDecomposition> {
    if !(m > 1.0) {
        return Err(Error::Config(format!("level base {m} must exceed 1")));
    }
    let (sorted, w) = s.sorted();
    let mut mass = Vec::with_capacity(sorted.len() + 1);
    let mut energy = Vec::with_capacity(sorted.len() + 1);
    mass.push(0.0);
    energy.push(0.0);
    for (v, wt) in sorted.iter().zip(&w) {
        mass.push(mass.last().unwrap() + wt);
        energy.push(energy.last().unwrap() + v * wt);
    }
    let above = |t: f64| sorted.partition_point(|v| *v >= t);
    let mut levels = Vec::new();
    let mut k = 0;
    loop {
        let threshold = m.powi(k as i32);
        let c = above(threshold);
        let resolved = c >= RESOLUTION_FLOOR;
        levels.push(Level { k, threshold, nodes: c, measure: mass[c], energy: energy[c], resolved });
        let done = match k_max {
            Some(km) => k >= km,
            None => !resolved || k >= 64,
        };
        if done {
            break;
        }
        k += 1;
    }
    // F_K for K = 2^{1 + j/4} up to the largest resolved norm.
    let kmax = sorted.get(RESOLUTION_FLOOR - 1).copied().unwrap_or(0.0);
    let mut tails = Vec::new();
    let mut j = 0;
    loop {
        let kv = 2f64.powf(1.0 + j as f64 / 4.0);
        if kv > kmax && j > 0 {
            break;
        }
        let c = above(kv);
        tails.push(TailPoint { k_value: kv, nodes: c, measure: mass[c], resolved: c >= RESOLUTION_FLOOR });
        j += 1;
        if kv > kmax {
            break;
        }
    }
    Ok(LevelDecomposition {
        base: m,
        region_nodes: sorted.len(),
        region_measure: *mass.last().unwrap(),
        levels,
        tails,
        sets: Vec::new(),
    })
}

/// Least-squares line `y = a + b x`, with the RMS residual.
pub fn line_fit(x: &[f64], y: &[f64]) -> Option<(f64, f64, f64)> {
    let n = x.len();
    if n < 3 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let rms = (x.iter().zip(y).map(|(p, q)| (q - a - b * p).powi(2)).sum::<f64>() / n as f64).sqrt();
    Some((a, b, rms))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TailReport {
    /// `(K, |F_K|)` over resolved `K`.
    pub points: Vec<(f64, f64)>,
    /// Smallest `c` with `|F_K| <= c / (K log K)` at every resolved `K`.
    pub c_uniform: f64,
    /// Least-squares `c` in log space.
    pub c_fit: f64,
    pub fit_rms: f64,
    /// Log-log slope of `|F_K|` against `K`.
    pub slope: Option<f64>,
    pub slope_rms: Option<f64>,
}

pub fn tail_bound_check(d: &LevelDecomposition) -> TailReport {
    let pts: Vec<(f64, f64)> =
        d.tails.iter().filter(|t| t.resolved && t.k_value >= 2.0).map(|t| (t.k_value, t.measure)).collect();
    let scaled: Vec<f64> = pts.iter().map(|(k, f)| f * k * k.ln()).collect();
    let c_uniform = scaled.iter().cloned().fold(0.0, f64::max);
    let logs: Vec<f64> = scaled.iter().map(|v| v.ln()).collect();
    let (c_fit, fit_rms) = if logs.is_empty() {
        (0.0, 0.0)
    } else {
        let mean = logs.iter().sum::<f64>() / logs.len() as f64;
        let rms = (logs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / logs.len() as f64).sqrt();
        (mean.exp(), rms)
    };
    let lx: Vec<f64> = pts.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    let fit = line_fit(&lx, &ly);
    TailReport { points: pts, c_uniform, c_fit, fit_rms, slope: fit.map(|f| f.1), slope_rms: fit.map(|f| f.2) }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeasureDecay {
    /// `min_k (log(|D_k| / |D_{k+1}|) / log M - 1) / 2`
    pub eps_fit: f64,
    pub per_level: Vec<f64>,
    /// Same exponent from a log-linear fit of `|D_k|`.
    pub eps_slope: Option<f64>,
    pub levels_used: usize,
}

pub fn measure_decay_check(d: &LevelDecomposition) -> Result<MeasureDecay> {
    let used = d.resolved_levels();
    if used < 3 {
        return Err(Error::InsufficientLevels(used));
    }
    let lm = d.base.ln();
    let meas: Vec<f64> = d.levels[..used].iter().map(|l| l.measure).collect();
    let per_level: Vec<f64> = meas.windows(2).map(|w| ((w[0] / w[1]).ln() / lm - 1.0) / 2.0).collect();
    let eps_fit = per_level.iter().cloned().fold(f64::INFINITY, f64::min);
    let ks: Vec<f64> = (0..used).map(|k| k as f64).collect();
    let logs: Vec<f64> = meas.iter().map(|v| v.ln()).collect();
    let eps_slope = line_fit(&ks, &logs).map(|(_, b, _)| (-b / lm - 1.0) / 2.0);
    Ok(MeasureDecay { eps_fit, per_level, eps_slope, levels_used: used })
}

/// `eps_fit` at the smallest base in `bases` where it is positive. The first
/// levels of a field can be pre-asymptotic; the estimate assumes `M` large.
pub fn eps_fit_large_m(s: &NormSamples, bases: &[f64]) -> Option<(f64, MeasureDecay)> {
    bases.iter().find_map(|&m| {
        let d = level_decompose_samples(s, m, None).ok()?;
        let md = measure_decay_check(&d).ok()?;
        (md.eps_fit > 0.0).then_some((m, md))
    })
}

/// Relative tolerance between the direct and layer-cake integrals.
pub const LAYER_CAKE_TOL: f64 = 0.01;
/// Quadrature points per octave of `t` in the layer-cake route, per unit of `1 + eps`.
const LAYER_POINTS_PER_OCTAVE: f64 = 64.0;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct W21Norm {
    pub eps: f64,
    pub direct: f64,
    pub layer_cake: f64,
    pub rel_diff: f64,
}

pub fn w21eps_norm(h: &HessianField, region: &[bool], eps: f64) -> Result<W21Norm> {
    w21eps_samples(&NormSamples::from_hessian(h, region), eps)
}

/// `int ||D^2 u||^{1+eps}` by direct quadrature and by
/// `int_{v<1} v^{1+eps} + E(1) + eps int_1^inf t^{eps-1} E(t) dt`,
/// `E(t) = int_{v >= t} v`, the last integral by the trapezoid rule in `log t`.
pub fn w21eps_samples(s: &NormSamples, eps: f64) -> Result<W21Norm> {
    if !(eps >= 0.0) {
        return Err(Error::Config(format!("exponent {eps} must be nonnegative")));
    }
    let direct: f64 = s.norms.iter().zip(&s.weights).map(|(v, w)| v.powf(1.0 + eps) * w).sum();
    let (v, w) = s.sorted();
    let mut prefix = Vec::with_capacity(v.len() + 1);
    prefix.push(0.0);
    for (x, wt) in v.iter().zip(&w) {
        prefix.push(prefix.last().unwrap() + x * wt);
    }
    let energy_above = |t: f64| -> f64 { prefix[v.partition_point(|x| *x >= t)] };
    let below: f64 = v.iter().zip(&w).filter(|(x, _)| **x < 1.0).map(|(x, wt)| x.powf(1.0 + eps) * wt).sum();
    let mut layer = below + energy_above(1.0);
    let vmax = v.first().copied().unwrap_or(0.0);
    if eps > 0.0 && vmax > 1.0 {
        let n = ((vmax.log2() * LAYER_POINTS_PER_OCTAVE * (1.0 + eps)).ceil() as usize).max(1);
        let ds = vmax.ln() / n as f64;
        let f = |s: f64| (eps * s).exp() * energy_above(s.exp());
        let mut acc = 0.5 * (f(0.0) + f(vmax.ln()));
        for i in 1..n {
            acc += f(i as f64 * ds);
        }
        layer += eps * acc * ds;
    }
    let rel_diff = if direct > 0.0 { (layer - direct).abs() / direct } else { layer.abs() };
    if rel_diff > LAYER_CAKE_TOL {
        return Err(Error::LayerCakeMismatch { direct, layer_cake: layer });
    }
    Ok(W21Norm { eps, direct, layer_cake: layer, rel_diff })
}

/// `eps = 2^j` for `j` in this range.
pub const EPS_EXPONENTS: std::ops::RangeInclusive<i32> = -6..=2;
/// Largest allowed growth of the integral per refinement.
pub const STABILITY_GROWTH: f64 = 0.10;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpsRow {
    pub eps: f64,
    pub norms: Vec<f64>,
    pub stable: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpsilonEstimate {
    /// Largest dyadic `eps` such that it and every smaller tested value are stable; 0 if none.
    pub eps: f64,
    pub table: Vec<EpsRow>,
}

pub fn epsilon_estimate(family: &[(&HessianField, &[bool])]) -> Result<EpsilonEstimate> {
    let samples: Vec<NormSamples> = family.iter().map(|(h, r)| NormSamples::from_hessian(h, r)).collect();
    epsilon_estimate_samples(&samples)
}

/// `family` runs from coarse to fine.
pub fn epsilon_estimate_samples(family: &[NormSamples]) -> Result<EpsilonEstimate> {
    if family.len() < 3 {
        return Err(Error::Config(format!("epsilon estimate needs 3 grids, got {}", family.len())));
    }
    epsilon_table(family)
}

/// Stability table over any refinement family of at least 2 members; the
/// headline estimate needs 3 (see [`epsilon_estimate_samples`]).
pub fn epsilon_table(family: &[NormSamples]) -> Result<EpsilonEstimate> {
    if family.len() < 2 {
        return Err(Error::Config(format!("stability table needs 2 grids, got {}", family.len())));
    }
    let mut table = Vec::new();
    for j in EPS_EXPONENTS {
        let eps = 2f64.powi(j);
        let norms = family.iter().map(|s| w21eps_samples(s, eps).map(|w| w.direct)).collect::<Result<Vec<_>>>()?;
        let stable = norms.windows(2).all(|w| w[1] <= (1.0 + STABILITY_GROWTH) * w[0]);
        table.push(EpsRow { eps, norms, stable });
    }
    let eps = table.iter().take_while(|r| r.stable).last().map_or(0.0, |r| r.eps);
    Ok(EpsilonEstimate { eps, table })
}

/// Dyadic budget for the constant `C0 = 2^j`.
pub const C0_EXPONENTS: std::ops::RangeInclusive<i32> = 0..=20;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BasicReport {
    /// `int_{S_h(x0)} ||D^2 u||`
    pub lhs: f64,
    /// `int_{S_h(x0)} Delta u`
    pub trace_integral: f64,
    /// `|S_{delta h}(x0) cap S_t(y)|`
    pub overlap: f64,
    /// `|{||D^2 u|| <= 2 C1 / c1} cap S_{delta h}(x0) cap S_t(y)|` with `C1` the trace
    /// integral and `c1` the overlap.
    pub chebyshev_measure: f64,
    /// Normalized size scaling the good set (1 for the unscaled lemma).
    pub alpha: f64,
    pub c0: f64,
    /// Good-set measure at `c0`.
    pub good: f64,
}

/// Good set selector: matrix bounds `C^{-1} I <= D^2 u <= C I` or norm band
/// `C^{-1} alpha <= ||D^2 u|| <= C alpha`.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Good {
    Matrix,
    Band(f64),
}

fn basic_eval(h: &HessianField, base: &[u32], small: &[u32], outer: &dyn Fn(usize) -> bool, cell: f64, good: Good) -> Result<BasicReport> {
    let lhs: f64 = base.iter().filter(|&&i| h.valid[i as usize]).map(|&i| h.norm[i as usize]).sum::<f64>() * cell;
    let trace: f64 = base.iter().filter(|&&i| h.valid[i as usize]).map(|&i| h.h[i as usize].trace()).sum::<f64>() * cell;
    let inter: Vec<usize> = small.iter().map(|&i| i as usize).filter(|&i| h.valid[i] && outer(i)).collect();
    let overlap = inter.len() as f64 * cell;
    let cheb_level = if overlap > 0.0 { 2.0 * trace / overlap } else { f64::INFINITY };
    let chebyshev_measure = inter.iter().filter(|&&i| h.norm[i] <= cheb_level).count() as f64 * cell;
    let alpha = match good {
        Good::Matrix => 1.0,
        Good::Band(a) => a,
    };
    for j in C0_EXPONENTS {
        let c0 = 2f64.powi(j);
        let count = inter
            .iter()
            .filter(|&&i| match good {
                Good::Matrix => {
                    let m = &h.h[i];
                    m.min_eig() >= 1.0 / c0 && m.max_eig() <= c0
                }
                Good::Band(a) => h.norm[i] >= a / c0 && h.norm[i] <= a * c0,
            })
            .count();
        let g = count as f64 * cell;
        if lhs <= c0 * alpha * g {
            return Ok(BasicReport { lhs, trace_integral: trace, overlap, chebyshev_measure, alpha, c0, good: g });
        }
    }
    Err(Error::NoPassingConstant(2f64.powi(*C0_EXPONENTS.end())))
}

/// Smallest dyadic `C0` with `int_{S_h(x0)} ||D^2 u|| <= C0 |{C0^{-1} I <= D^2 u <= C0 I} cap S_{delta h}(x0) cap S_t(y)|`.
pub fn lemma_basic_check(u: &ConvexField, h: &HessianField, base: &Section, outer: &Section, delta: f64) -> Result<BasicReport> {
    let small = compute_section(u, base.center, delta * base.height)?;
    let cell = u.grid.cell_volume();
    basic_eval(h, &base.nodes, &small.nodes, &|i| outer.contains(i), cell, Good::Matrix)
}

/// Relative agreement required between the direct and rescaled routes.
pub const RESCALE_TOL: f64 = 0.05;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BasicScReport {
    pub direct: BasicReport,
    /// Same quantities computed on the rescaled field and pulled back by `|det T|^{-1}`.
    pub rescaled: BasicReport,
    /// The unscaled lemma applied to the rescaled field.
    pub rescaled_basic: Option<BasicReport>,
    pub alpha: f64,
    pub lhs_rel_diff: f64,
    pub good_rel_diff: f64,
}

/// Cells per axis of the grid used for the rescaled route.
pub const RESCALE_CELLS: usize = 128;

pub fn lemma_basic_sc_check(
    u: &ConvexField,
    h: &HessianField,
    sec: &Section,
    outer: &Section,
    delta: f64,
) -> Result<BasicScReport> {
    let doubled = compute_section(u, sec.center, 2.0 * sec.height)?;
    if !doubled.compact {
        return Err(Error::Config(format!("S_2h at node {} is not compactly included", sec.center)));
    }
    let norm = john_normalize(sec)?;
    let alpha = norm.alpha;
    let small = compute_section(u, sec.center, delta * sec.height)?;
    let cell = u.grid.cell_volume();
    let direct = basic_eval(h, &sec.nodes, &small.nodes, &|i| outer.contains(i), cell, Good::Band(alpha))?;

    let rs = rescale_solution(u, sec, &norm, RESCALE_CELLS)?;
    let v = &rs.field;
    let hv = hessian(v)?;
    let a = norm.matrix;
    // Pull the rescaled Hessian back: D^2 u = A^T D^2 v A.
    let pulled: Vec<f64> = (0..v.grid.len())
        .into_par_iter()
        .map(|i| {
            if !hv.valid[i] {
                return 0.0;
            }
            let m = &hv.h[i];
            let mm = [[m.get(0, 0), m.get(0, 1)], [m.get(1, 0), m.get(1, 1)]];
            let mut r = [[0.0; 2]; 2];
            for p in 0..2 {
                for q in 0..2 {
                    for k in 0..2 {
                        for l in 0..2 {
                            r[p][q] += a[k][p] * mm[k][l] * a[l][q];
                        }
                    }
                }
            }
            crate::field::Sym::new2(r[0][0], 0.5 * (r[0][1] + r[1][0]), r[1][1]).norm()
        })
        .collect();
    let hp = HessianField { grid: v.grid.clone(), h: hv.h.clone(), norm: pulled, valid: hv.valid.clone(), one_sided: hv.one_sided.clone() };
    let base_t: Vec<u32> = (0..v.grid.len()).filter(|&i| rs.section_mask[i]).map(|i| i as u32).collect();
    let small_t: Vec<u32> = (0..v.grid.len())
        .filter(|&i| v.kind[i] != NodeKind::Exterior && v.values[i] < delta && rs.section_mask[i])
        .map(|i| i as u32)
        .collect();
    // T(S_t(y)): v values give u back at the preimage.
    let sh = sec.height.sqrt();
    let inv = crate::geometry::inverse2(&a);
    let outer_t = |i: usize| -> bool {
        if v.kind[i] == NodeKind::Exterior {
            return false;
        }
        let pt = v.grid.point(i);
        let q = crate::geometry::apply2(&inv, [pt[0], pt[1]]);
        let x = [sec.x0[0] + sh * q[0], sec.x0[1] + sh * q[1]];
        let ux = sec.height * v.values[i] + sec.u0 + sec.slope[0] * (x[0] - sec.x0[0]) + sec.slope[1] * (x[1] - sec.x0[1]);
        ux < outer.u0 + outer.slope[0] * (x[0] - outer.x0[0]) + outer.slope[1] * (x[1] - outer.x0[1]) + outer.height
    };
    // |det T|^{-1} = h in two dimensions.
    let cell_t = v.grid.cell_volume() * sec.height;
    let mut rescaled = basic_eval(&hp, &base_t, &small_t, &outer_t, cell_t, Good::Band(alpha))?;
    rescaled.trace_integral = f64::NAN;
    let rescaled_basic = basic_eval(&hv, &base_t, &small_t, &outer_t, v.grid.cell_volume(), Good::Matrix).ok();
    let lhs_rel_diff = (rescaled.lhs - direct.lhs).abs() / direct.lhs.max(f64::MIN_POSITIVE);
    // Good sets compared at the direct route's constant.
    let good_at = |hf: &HessianField, nodes: &[u32], outer: &dyn Fn(usize) -> bool, cell: f64| -> f64 {
        nodes
            .iter()
            .map(|&i| i as usize)
            .filter(|&i| hf.valid[i] && outer(i) && hf.norm[i] >= alpha / direct.c0 && hf.norm[i] <= alpha * direct.c0)
            .count() as f64
            * cell
    };
    let g1 = good_at(h, &small.nodes, &|i| outer.contains(i), cell);
    let g2 = good_at(&hp, &small_t, &outer_t, cell_t);
    let good_rel_diff = (g1 - g2).abs() / g1.max(f64::MIN_POSITIVE);
    let report = BasicScReport { direct, rescaled, rescaled_basic, alpha, lhs_rel_diff, good_rel_diff };
    let c0_ratio = (report.rescaled.c0 / report.direct.c0).log2().abs();
    if (lhs_rel_diff > RESCALE_TOL || good_rel_diff > RESCALE_TOL) && c0_ratio > 1.0 {
        return Err(Error::RescaleMismatch(format!(
            "lhs {:.3e} vs {:.3e}, good {:.3e} vs {:.3e}",
            report.direct.lhs, report.rescaled.lhs, g1, g2
        )));
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecayStep {
    pub k: usize,
    /// Target normalized size `sqrt(M) M^k`.
    pub alpha: f64,
    pub targets: usize,
    pub excluded: usize,
    pub cover_size: usize,
    /// `int_{D_{k+1}} ||D^2 u||`
    pub energy_next: f64,
    /// `int_{D_k \ D_{k+1}} ||D^2 u||`
    pub energy_band: f64,
    /// `energy_next / energy_band`
    pub contraction: f64,
    /// Sum of the per-section right-hand sides `C alpha |good cap S_{delta h_i}(x_i) cap S_1|`.
    pub chain_bound: f64,
    pub chain_constant: f64,
    /// Sections where `int_{S_{h_i}} ||D^2 u|| <= C alpha |good|` failed at the given constant.
    pub section_failures: usize,
    pub valid: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecayReport {
    pub base: f64,
    pub c0: f64,
    pub delta: f64,
    pub energies: Vec<f64>,
    pub steps: Vec<DecayStep>,
    /// Largest observed contraction `C`.
    pub contraction_max: f64,
    /// `1 / (1 + C)`
    pub tau: f64,
    /// `1 - exp(slope)` of a log-linear fit of the energies, when 3 levels exist.
    pub tau_fit: Option<f64>,
    pub tau_fit_rms: Option<f64>,
    pub strictly_decreasing: bool,
    pub eps_fit: Option<f64>,
    pub constants: Constants,
}

/// Empirical constants; `None` when not measured in this run.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Constants {
    /// Good-set constant of the basic inequality.
    pub c0: Option<f64>,
    /// `int_{S_1} Delta u`
    pub c1: Option<f64>,
    /// Level base `M`.
    pub c2: Option<f64>,
    /// `|S_delta(0) cap S_t(y)|`
    pub c1_small: Option<f64>,
    /// Determinant threshold of the degenerate argument.
    pub c2_small: Option<f64>,
}

/// Heights `h_top 2^{-j}`, `j < SIZE_SEARCH_LEVELS`.
pub const SIZE_SEARCH_LEVELS: i32 = 20;
/// A decay step is valid when fewer than this fraction of targets is excluded.
pub const MAX_EXCLUDED: f64 = 0.01;

/// Largest dyadic height `h <= h_top` with `S_h(x)` compact inside `within` and
/// normalized size at least `alpha`.
pub fn size_search(
    u: &ConvexField,
    x: usize,
    alpha: f64,
    h_top: f64,
    within: &Section,
    size: &(dyn Fn(&Section) -> Result<f64> + Sync),
) -> Option<f64> {
    let height = |j: i32| h_top * 0.5f64.powi(j);
    let resolved = |j: i32| compute_section(u, x, height(j)).is_ok_and(|s| s.len() >= MIN_SECTION_NODES);
    let ok = |j: i32| -> bool {
        match compute_section(u, x, height(j)) {
            Ok(s) if s.compact && s.is_subset_of(within) => size(&s).is_ok_and(|a| a >= alpha),
            _ => false,
        }
    };
    let first_true = |pred: &dyn Fn(i32) -> bool, mut lo: i32, mut hi: i32| -> Option<i32> {
        // pred(lo) false, pred(hi) true
        if !pred(hi) {
            return None;
        }
        if pred(lo) {
            return Some(lo);
        }
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if pred(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Some(hi)
    };
    // Deepest resolved height, then the largest height reaching the target size.
    let last = SIZE_SEARCH_LEVELS - 1;
    let deepest = if resolved(last) {
        last
    } else {
        first_true(&|j| !resolved(j), 0, last)? - 1
    };
    if deepest < 0 {
        return None;
    }
    first_true(&ok, 0, deepest).map(height)
}

/// Normalized size from the inscribed-ellipse normalization.
pub fn john_size(s: &Section) -> Result<f64> {
    john_normalize(s).map(|n| n.alpha)
}

/// Runs the covering chain for every `k` with `D_{k+1}` resolved.
pub fn decay_iterate(
    u: &ConvexField,
    h: &HessianField,
    base: &Section,
    d: &LevelDecomposition,
    delta: f64,
    c0: f64,
) -> Result<DecayReport> {
    decay_iterate_with(u, h, base, d, delta, c0, &john_size)
}

/// As [`decay_iterate`] with a caller-supplied normalized size.
pub fn decay_iterate_with(
    u: &ConvexField,
    h: &HessianField,
    base: &Section,
    d: &LevelDecomposition,
    delta: f64,
    c0: f64,
    size: &(dyn Fn(&Section) -> Result<f64> + Sync),
) -> Result<DecayReport> {
    let m = d.base;
    let cell = u.grid.cell_volume();
    let doubled = compute_section(u, base.center, 2.0 * base.height)?;
    let mut steps = Vec::new();
    let energies = d.energies();
    let size_c = m.sqrt();
    for k in 0..d.levels.len().saturating_sub(1) {
        if !d.levels[k + 1].resolved {
            break;
        }
        let alpha = size_c * m.powi(k as i32);
        let targets: Vec<usize> = d.sets[k + 1].iter().map(|&i| i as usize).collect();
        let found: Vec<Option<f64>> =
            targets.par_iter().map(|&x| size_search(u, x, alpha, base.height, &doubled, size)).collect();
        let mut heights = vec![f64::NAN; u.grid.len()];
        let mut kept = Vec::new();
        for (x, f) in targets.iter().zip(&found) {
            if let Some(hh) = f {
                heights[*x] = *hh;
                kept.push(*x);
            }
        }
        let excluded = targets.len() - kept.len();
        let energy_next = d.levels[k + 1].energy;
        let energy_band = d.levels[k].energy - energy_next;
        let contraction = energy_next / energy_band;
        let (cover_size, chain_bound, section_failures) = if kept.is_empty() {
            (0, 0.0, 0)
        } else {
            let cover = vitali_cover(u, &kept, &|x| heights[x], delta).map_err(|e| e.in_stage("decay cover"))?;
            let mut chain = 0.0;
            let mut fails = 0;
            for (full, small) in cover.sections.iter().zip(&cover.shrunk) {
                let a = size(full).unwrap_or(alpha);
                let lhs: f64 =
                    full.nodes.iter().filter(|&&i| h.valid[i as usize]).map(|&i| h.norm[i as usize]).sum::<f64>() * cell;
                let good = small
                    .nodes
                    .iter()
                    .map(|&i| i as usize)
                    .filter(|&i| h.valid[i] && base.contains(i) && h.norm[i] >= a / c0 && h.norm[i] <= a * c0)
                    .count() as f64
                    * cell;
                let rhs = c0 * a * good;
                if lhs > rhs {
                    fails += 1;
                }
                chain += rhs;
            }
            (cover.selected.len(), chain, fails)
        };
        steps.push(DecayStep {
            k,
            alpha,
            targets: targets.len(),
            excluded,
            cover_size,
            energy_next,
            energy_band,
            contraction,
            chain_bound,
            chain_constant: chain_bound / energy_band,
            section_failures,
            valid: (excluded as f64) < MAX_EXCLUDED * targets.len() as f64,
        });
    }
    let used = d.resolved_levels();
    let big_c = steps.iter().map(|s| s.contraction).fold(0.0, f64::max);
    let tau = 1.0 / (1.0 + big_c);
    let ks: Vec<f64> = (0..used).map(|k| k as f64).collect();
    let le: Vec<f64> = energies[..used].iter().map(|e| e.ln()).collect();
    let fit = line_fit(&ks, &le);
    let strictly_decreasing = used >= 3 && energies[..used].windows(2).all(|w| w[1] < w[0]);
    let eps_fit = measure_decay_check(d).ok().map(|r| r.eps_fit);
    Ok(DecayReport {
        base: m,
        c0,
        delta,
        energies,
        steps,
        contraction_max: big_c,
        tau,
        tau_fit: fit.map(|f| 1.0 - f.1.exp()),
        tau_fit_rms: fit.map(|f| f.2),
        strictly_decreasing,
        eps_fit,
        constants: Constants { c0: Some(c0), c2: Some(m), ..Default::default() },
    })
}
