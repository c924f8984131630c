//! Configuration-driven runs: solve, sections, cover, decay, tails, epsilon
//! and the degenerate-measure checks, with JSON/CSV/SVG outputs and a manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{build_domain, DomainSpec, ShapeDescriptor};
use crate::error::{Error, Result};
use crate::field::{hessian, mask_measure, sup_norm_and_interior, write_field, Analytic, ConvexField, HessianField, NodeKind, Quadratic, Sym};
use crate::grid::Grid;
use crate::measure::{check_doubling, good_determinant, mu_normalize_section, mu_rhs, GoodDeterminant, MeasureSpec, MuInftyReport, MuNormalization, SamplerConfig};
use crate::regularity::{
    epsilon_table, eps_fit_large_m, john_size, lemma_basic_check, level_decompose, level_decompose_samples, line_fit, measure_decay_check,
    size_search, tail_bound_check, w21eps_samples, wang_samples, Constants, DecayReport, EpsRow, LevelDecomposition,
    MeasureDecay, NormSamples, TailReport,
};
use crate::report::{render_overlay, render_plot, write_csv, write_json, Overlay, Plot, Series};
use crate::sections::{compute_section, estimate_delta, john_normalize, Normalization, Section, SizePoint, VitaliCover};
use crate::solver::{solve_dirichlet, RhsSpec, SolveReport, SolverConfig};
use crate::wang::{wang_construct, OscillatoryProblem, WangReport};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Problem {
    /// `f = 1` on the unit disk, exact solution `(|x|^2 - 1) / 2`.
    Radial,
    /// Two-valued density (`lambda = 0.1`, `Lambda = 1.9`) on a convex level set
    /// of a homogeneous profile; the profile is the reference solution.
    Oscillatory,
    /// Homogeneous solution `u(tx, t^alpha y) = t^{1+alpha} u(x, y)`.
    Wang { alpha: f64 },
    /// Degenerate measure from a JSON file, on the unit disk.
    Mu { spec: PathBuf },
}

impl Problem {
    pub fn selector(&self) -> String {
        match self {
            Problem::Radial => "radial".into(),
            Problem::Oscillatory => "oscillatory-f".into(),
            Problem::Wang { alpha } => format!("wang({alpha})"),
            Problem::Mu { spec } => format!("mu({})", spec.display()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Section pairs sampled by the engulfing search.
    pub delta_samples: usize,
    /// Points of the normalized-size curve, halving from the base height.
    pub curve_heights: usize,
    /// Base section height as a fraction of `||u||_inf`.
    pub base_height: f64,
    /// Good-set constant for the decay chain; measured on the base section if absent.
    pub c0: Option<f64>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { delta_samples: 40, curve_heights: 8, base_height: 0.25, c0: None }
    }
}

/// Graded sampler used for homogeneous fields in place of a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WangSampling {
    /// Nodes per axis in each box.
    pub nodes: usize,
    /// Nesting depths of the refinement family, coarse to fine.
    pub depths: Vec<usize>,
}

impl Default for WangSampling {
    fn default() -> Self {
        WangSampling { nodes: 128, depths: vec![10, 12, 14] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_grids")]
    pub grids: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_sweep")]
    pub m_sweep: Vec<f64>,
    /// Refinement-based checks (convergence order, stability tables).
    #[serde(default = "default_true")]
    pub refinement: bool,
    pub problem: Problem,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub wang: WangSampling,
}

fn default_grids() -> Vec<usize> {
    vec![64, 128]
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}
fn default_sweep() -> Vec<f64> {
    vec![2.0, 4.0, 8.0, 16.0]
}
fn default_true() -> bool {
    true
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            grids: default_grids(),
            seed: 0,
            out: default_out(),
            m_sweep: default_sweep(),
            refinement: true,
            problem: Problem::Oscillatory,
            solver: SolverConfig::default(),
            search: SearchConfig::default(),
            sampler: SamplerConfig::default(),
            wang: WangSampling::default(),
        }
    }
}

const TEMPLATE: &str = r#"# Experiment configuration. Every key is optional except [problem];
# the values below are the defaults.

# Cells per axis of the refinement family, coarse to fine.
grids = [64, 128]
# Seed for every sampled quantity (section pairs, doubling sampler).
seed = 0
# Output directory.
out = "out"
# Level bases M of the D_k decomposition.
m_sweep = [2.0, 4.0, 8.0, 16.0]
# Refinement-based checks; need at least 2 grids.
refinement = true

[problem]
# radial | oscillatory | wang (with alpha = ...) | mu (with spec = "measure.json")
kind = "oscillatory"

[solver]
tol = 1e-8
max_iter = 80
# Stencil directions: 4, 8 or 16; 0 picks 8.
directions = 0
min_step = 0.0009765625
guard = 0.001
# paraboloid | poisson | nested
init = "nested"

[search]
# Section pairs sampled by the engulfing (delta) search.
delta_samples = 40
# Points of the normalized-size curve, halving from the base height.
curve_heights = 8
# Base section height as a fraction of ||u||.
base_height = 0.25
# Good-set constant of the decay chain; measured when omitted.
# c0 = 2.0

[sampler]
# Convex bodies and subsets per body of the doubling sampler.
sets = 200
subsets = 50
resolution = 192
slab_levels = 7
# Overridden by the top-level seed.
seed = 0

[wang]
# Graded sampler for homogeneous fields: nodes per axis and nesting depths.
nodes = 128
depths = [10, 12, 14]
"#;

impl ExperimentConfig {
    /// Commented configuration with every default spelled out.
    pub fn template() -> &'static str {
        TEMPLATE
    }

    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        ExperimentConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.grids.is_empty() {
            return bad("no grid sizes".into());
        }
        if self.grids.iter().any(|&g| g < 16) {
            return bad(format!("grid sizes below 16 cells: {:?}", self.grids));
        }
        if self.grids.windows(2).any(|w| w[1] <= w[0]) {
            return bad(format!("grid sizes must increase: {:?}", self.grids));
        }
        if self.refinement && self.grids.len() < 2 {
            return bad("refinement checks need at least 2 grid sizes".into());
        }
        if self.m_sweep.is_empty() || self.m_sweep.iter().any(|&m| !(m > 1.0)) {
            return bad(format!("every M must exceed 1: {:?}", self.m_sweep));
        }
        if !(self.solver.tol > 0.0) || self.solver.max_iter == 0 {
            return bad("solver tolerance and iteration budget must be positive".into());
        }
        if self.search.delta_samples == 0 || !(self.search.base_height > 0.0 && self.search.base_height <= 1.0) {
            return bad("search budgets out of range".into());
        }
        if let Some(c) = self.search.c0 {
            if !(c >= 1.0) {
                return bad(format!("c0 = {c} below 1"));
            }
        }
        match &self.problem {
            Problem::Wang { alpha } if !(*alpha > 1.0) => return bad(format!("wang alpha = {alpha} must exceed 1")),
            Problem::Wang { .. } if self.refinement && self.wang.depths.len() < 2 => {
                return bad("refinement checks need at least 2 sampler depths".into())
            }
            Problem::Mu { spec } => {
                load_measure(spec)?;
            }
            _ => {}
        }
        Ok(())
    }

    /// SHA-256 of the configuration with the output directory blanked.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn load_measure(path: &Path) -> Result<MeasureSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    MeasureSpec::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Stages selected for a run. Grid-based stages imply the solve stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Stages {
    pub solve: bool,
    pub sections: bool,
    pub cover: bool,
    pub decay: bool,
    pub tails: bool,
    pub epsilon: bool,
    pub wang: bool,
    pub mu: bool,
}

impl Stages {
    pub fn all() -> Stages {
        Stages { solve: true, sections: true, cover: true, decay: true, tails: true, epsilon: true, wang: true, mu: true }
    }

    fn needs_grid(&self) -> bool {
        self.solve || self.sections || self.cover || self.decay || self.tails || self.epsilon
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmittedFile {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub config_hash: String,
    pub problem: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    /// Wall-clock times; the only non-reproducible part of a run.
    pub timings: Vec<StageTiming>,
    pub files: Vec<EmittedFile>,
    pub summary: RunSummary,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<RunManifest> {
        let path = if path.is_dir() { path.join(MANIFEST) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }
}

pub const MANIFEST: &str = "manifest.json";

/// Bases tried by the large-`M` estimate.
pub const LARGE_M: [f64; 3] = [4.0, 16.0, 256.0];

/// Per-M results.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SweepRow {
    pub m: f64,
    pub resolved_levels: usize,
    pub eps_fit: Option<f64>,
    pub eps_slope: Option<f64>,
    /// `1 - exp(slope)` of the level energies over the analysis region.
    pub energy_tau_fit: Option<f64>,
    pub energies_decreasing: bool,
    pub tau: Option<f64>,
    pub tau_fit: Option<f64>,
    pub chain_valid: Option<bool>,
    pub chain_decreasing: Option<bool>,
    pub constants: Option<Constants>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CoverSummary {
    pub m: f64,
    pub targets: usize,
    pub excluded: usize,
    pub selected: usize,
    pub uncovered: usize,
    pub conflicts: usize,
    pub shrunk_disjoint: bool,
}

/// Numbers and flags used by [`compare`].
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunSummary {
    pub grids: Vec<usize>,
    pub solve_errors: Vec<f64>,
    pub convergence_order: Option<f64>,
    pub omega_measure: Option<f64>,
    pub delta: Option<f64>,
    pub c0: Option<f64>,
    pub c0_error: Option<String>,
    pub base_alpha: Option<f64>,
    pub sweep: Vec<SweepRow>,
    pub all_tau_positive: Option<bool>,
    pub all_eps_positive: Option<bool>,
    /// `(M, eps_fit)` at the smallest of `LARGE_M` with a positive value.
    pub eps_fit_large_m: Option<(f64, f64)>,
    pub tail_c: Option<f64>,
    pub tail_slope: Option<f64>,
    pub tail_c_by_grid: Vec<f64>,
    pub eps_estimate: Option<f64>,
    pub eps_stable: Vec<bool>,
    pub layer_cake_max_rel: Option<f64>,
    pub cover: Option<CoverSummary>,
    pub doubling_gamma: Option<f64>,
    pub doubling_beta: Option<f64>,
    pub doubling_certified: Option<bool>,
    pub good_measure: Option<f64>,
    pub wang_scale_error: Option<f64>,
    pub sharp_exponent: Option<f64>,
}

struct Setup {
    domain: DomainSpec,
    kind: SetupKind,
}

enum SetupKind {
    Solved { rhs: RhsSpec, reference: Option<Arc<dyn Analytic>> },
    Measure { spec: MeasureSpec },
    Exact { field: Arc<dyn Analytic>, wang: WangReport, samples: Box<crate::wang::WangField> },
}

fn unit_disk() -> Result<DomainSpec> {
    build_domain(&ShapeDescriptor::Ball { n: 2, radius: 1.0 })
}

fn setup(problem: &Problem) -> Result<Setup> {
    Ok(match problem {
        Problem::Radial => {
            let q = Quadratic { m: Sym::diag(2, [1.0; 3]), b: [0.0; 3], c: -0.5 };
            Setup {
                domain: unit_disk()?,
                kind: SetupKind::Solved { rhs: RhsSpec::constant(1.0), reference: Some(Arc::new(q)) },
            }
        }
        Problem::Oscillatory => {
            let p = OscillatoryProblem::standard()?;
            Setup { domain: p.domain.clone(), kind: SetupKind::Solved { rhs: p.rhs(), reference: Some(Arc::new(p.reference())) } }
        }
        Problem::Wang { alpha } => {
            let w = wang_construct(*alpha, 1e-6)?;
            let p = OscillatoryProblem::new(*alpha, w.report.kappa, 1.05, 720)?;
            Setup {
                domain: p.domain.clone(),
                kind: SetupKind::Exact { field: Arc::new(p.reference()), wang: w.report, samples: Box::new(w.field) },
            }
        }
        Problem::Mu { spec } => Setup { domain: unit_disk()?, kind: SetupKind::Measure { spec: load_measure(spec)? } },
    })
}

struct GridField {
    cells: usize,
    u: ConvexField,
    h: HessianField,
    omega: Vec<bool>,
    sup: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SolveRow {
    cells: usize,
    spacing: f64,
    iterations: usize,
    residual: f64,
    unknowns: usize,
    damped_steps: usize,
    max_error: Option<f64>,
    sup_norm: f64,
    omega_measure: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SolveOutput {
    cells: usize,
    spacing: f64,
    report: Option<SolveReport>,
    max_error: Option<f64>,
    sup_norm: f64,
    omega_measure: f64,
    field_file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SectionSummary {
    center: usize,
    x0: [f64; 3],
    height: f64,
    nodes: usize,
    measure: f64,
    compact: bool,
    hull: Vec<[f64; 2]>,
}

impl SectionSummary {
    fn of(s: &Section) -> SectionSummary {
        SectionSummary {
            center: s.center,
            x0: s.x0,
            height: s.height,
            nodes: s.len(),
            measure: s.measure,
            compact: s.compact,
            hull: s.hull.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SectionsOutput {
    cells: usize,
    sup_norm: f64,
    base: SectionSummary,
    normalization: Normalization,
    mu_normalization: Option<MuNormalization>,
    curve: Vec<SizePoint>,
    delta: crate::sections::DeltaEstimate,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CoverOutput {
    summary: CoverSummary,
    cover: VitaliCover,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LevelRow {
    k: usize,
    threshold: f64,
    nodes: usize,
    measure: f64,
    energy: f64,
    resolved: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LevelsOutput {
    decomposition: LevelDecomposition,
    measure_decay: Option<MeasureDecay>,
    measure_decay_error: Option<String>,
    energy_tau_fit: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DecayRow {
    k: usize,
    alpha: f64,
    targets: usize,
    excluded: usize,
    cover_size: usize,
    measure_next: f64,
    energy_next: f64,
    energy_band: f64,
    contraction: f64,
    chain_bound: f64,
    section_failures: usize,
    valid: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TailRow {
    k_value: f64,
    nodes: usize,
    measure: f64,
    resolved: bool,
    bound: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TailsOutput {
    report: TailReport,
    c_uniform_by_grid: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LayerRow {
    eps: f64,
    direct: f64,
    layer_cake: f64,
    rel_diff: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EpsilonOutput {
    family: Vec<String>,
    table: Vec<EpsRow>,
    /// Largest stable dyadic `eps`; reported only for families of 3 or more.
    estimate: Option<f64>,
    layer_cake: Vec<LayerRow>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct MuOutput {
    doubling: MuInftyReport,
    good: Option<GoodDeterminant>,
    eps_fit: Vec<(f64, Option<f64>)>,
}

struct Runner {
    out: PathBuf,
    files: Vec<String>,
    timings: Vec<StageTiming>,
}

impl Runner {
    fn emit_json<T: Serialize>(&mut self, name: &str, v: &T) -> Result<()> {
        write_json(&self.out.join(name), v)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn emit_csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        write_csv(&self.out.join(name), rows)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn emit_text(&mut self, name: &str, text: &str) -> Result<()> {
        std::fs::write(self.out.join(name), text)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Runner) -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let r = f(self).map_err(|e| match e {
            Error::Stage { .. } => e,
            e => e.in_stage(name),
        });
        self.timings.push(StageTiming { stage: name.to_string(), seconds: t.elapsed().as_secs_f64() });
        r
    }
}

fn m_label(m: f64) -> String {
    format!("{m}")
}

fn energy_tau_fit(d: &LevelDecomposition) -> Option<f64> {
    let used = d.resolved_levels();
    let ks: Vec<f64> = (0..used).map(|k| k as f64).collect();
    let logs: Vec<f64> = d.levels[..used].iter().map(|l| l.energy.ln()).collect();
    line_fit(&ks, &logs).map(|(_, b, _)| 1.0 - b.exp())
}

fn strictly_decreasing(d: &LevelDecomposition) -> bool {
    let used = d.resolved_levels();
    d.levels[..used].windows(2).all(|w| w[1].energy < w[0].energy)
}

/// Slope of `log y` against `log x` by least squares; 2 points suffice.
fn log_slope(pts: &[(f64, f64)]) -> Option<f64> {
    let p: Vec<(f64, f64)> = pts.iter().filter(|q| q.0 > 0.0 && q.1 > 0.0).map(|q| (q.0.ln(), q.1.ln())).collect();
    if p.len() < 2 {
        return None;
    }
    let n = p.len() as f64;
    let mx = p.iter().map(|q| q.0).sum::<f64>() / n;
    let my = p.iter().map(|q| q.1).sum::<f64>() / n;
    let sxx: f64 = p.iter().map(|q| (q.0 - mx).powi(2)).sum();
    let sxy: f64 = p.iter().map(|q| (q.0 - mx) * (q.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn solve_grid(setup: &Setup, cfg: &ExperimentConfig, cells: usize) -> Result<(GridField, Option<SolveReport>, Option<f64>)> {
    let grid = Grid::cube(2, setup.domain.outer_radius() * 1.01, cells);
    let (u, report, reference) = match &setup.kind {
        SetupKind::Solved { rhs, reference } => {
            let (u, r) = solve_dirichlet(&grid, &setup.domain, rhs, &cfg.solver)?;
            (u, Some(r), reference.clone())
        }
        SetupKind::Measure { spec } => {
            let (_, rhs) = mu_rhs(spec, &grid, &setup.domain);
            let (u, r) = solve_dirichlet(&grid, &setup.domain, &rhs, &cfg.solver)?;
            (u, Some(r), None)
        }
        SetupKind::Exact { field, .. } => {
            (ConvexField::from_analytic(grid.clone(), Some(setup.domain.clone()), field.clone()), None, None)
        }
    };
    let error = reference.map(|r| {
        (0..grid.len())
            .filter(|&i| u.kind[i] == NodeKind::Interior)
            .map(|i| (u.values[i] - r.value(grid.point(i))).abs())
            .fold(0.0, f64::max)
    });
    let h = hessian(&u)?;
    let (sup, omega) = sup_norm_and_interior(&u)?;
    Ok((GridField { cells, u, h, omega, sup }, report, error))
}

/// Normalized size: `mu`-relative for measure problems.
fn size_for<'a>(u: &'a ConvexField, spec: Option<&'a MeasureSpec>) -> Box<dyn Fn(&Section) -> Result<f64> + Sync + 'a> {
    match spec {
        Some(spec) => Box::new(move |sec: &Section| mu_normalize_section(u, sec, spec).map(|n| n.alpha)),
        None => Box::new(john_size),
    }
}

fn argmin(u: &ConvexField) -> Result<usize> {
    (0..u.grid.len())
        .filter(|&i| u.usable(i))
        .min_by(|&a, &b| u.values[a].total_cmp(&u.values[b]))
        .ok_or_else(|| Error::Config("no interior nodes".into()))
}

fn domain_outline(d: &DomainSpec) -> Vec<[f64; 2]> {
    d.outline_2d(256)
}

fn level_rows(d: &LevelDecomposition) -> Vec<LevelRow> {
    d.levels
        .iter()
        .map(|l| LevelRow { k: l.k, threshold: l.threshold, nodes: l.nodes, measure: l.measure, energy: l.energy, resolved: l.resolved })
        .collect()
}

/// Runs the selected stages and writes outputs plus `manifest.json` to `cfg.out`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunManifest> {
    run_stages(cfg, Stages::all())
}

pub fn run_stages(cfg: &ExperimentConfig, stages: Stages) -> Result<RunManifest> {
    cfg.validate()?;
    let mut sampler = cfg.sampler.clone();
    sampler.seed = cfg.seed;
    std::fs::create_dir_all(&cfg.out)?;
    let mut r = Runner { out: cfg.out.clone(), files: Vec::new(), timings: Vec::new() };
    let mut s = RunSummary { grids: cfg.grids.clone(), ..Default::default() };
    let st = r.stage("setup", |_| setup(&cfg.problem))?;
    let is_wang = matches!(st.kind, SetupKind::Exact { .. });

    if let SetupKind::Exact { wang, .. } = &st.kind {
        if stages.wang {
            r.stage("wang", |r| r.emit_json("wang.json", wang))?;
        }
        s.wang_scale_error = Some(wang.scale_error);
        s.sharp_exponent = Some(wang.sharp_exponent);
    }

    // Solve (or sample) on every grid.
    let mut fields: Vec<GridField> = Vec::new();
    if stages.needs_grid() {
        fields = r.stage("solve", |r| {
            let mut fields = Vec::new();
            let mut outs = Vec::new();
            for &cells in &cfg.grids {
                let (f, report, err) = solve_grid(&st, cfg, cells)?;
                let name = format!("field_{cells}.bin");
                write_field(&r.out.join(&name), &f.u)?;
                r.files.push(name.clone());
                r.files.push(format!("field_{cells}.json"));
                outs.push(SolveOutput {
                    cells,
                    spacing: f.u.grid.min_spacing(),
                    report,
                    max_error: err,
                    sup_norm: f.sup,
                    omega_measure: mask_measure(&f.u.grid, &f.omega),
                    field_file: name,
                });
                fields.push(f);
            }
            let rows: Vec<SolveRow> = outs
                .iter()
                .map(|o| SolveRow {
                    cells: o.cells,
                    spacing: o.spacing,
                    iterations: o.report.as_ref().map_or(0, |x| x.iterations),
                    residual: o.report.as_ref().map_or(0.0, |x| x.residual),
                    unknowns: o.report.as_ref().map_or(0, |x| x.unknowns),
                    damped_steps: o.report.as_ref().map_or(0, |x| x.damped_steps),
                    max_error: o.max_error,
                    sup_norm: o.sup_norm,
                    omega_measure: o.omega_measure,
                })
                .collect();
            r.emit_json("solve.json", &outs)?;
            r.emit_csv("solve.csv", &rows)?;
            s.solve_errors = outs.iter().filter_map(|o| o.max_error).collect();
            if cfg.refinement && s.solve_errors.len() == outs.len() {
                let pts: Vec<(f64, f64)> = outs.iter().map(|o| (o.spacing, o.max_error.unwrap_or(0.0))).collect();
                s.convergence_order = log_slope(&pts);
            }
            s.omega_measure = outs.last().map(|o| o.omega_measure);
            Ok(fields)
        })?;
    }
    let fine = fields.last();

    // Sections, normalization and the engulfing constant on the finest grid.
    let mut base: Option<(Section, f64)> = None;
    let measure_spec = match &st.kind {
        SetupKind::Measure { spec } => fine.map(|f| mu_rhs(spec, &f.u.grid, &st.domain).0),
        _ => None,
    };
    if let Some(f) = fine.filter(|_| stages.sections || stages.cover || stages.decay || stages.mu) {
        base = Some(r.stage("sections", |r| {
            let center = argmin(&f.u)?;
            let sec = compute_section(&f.u, center, cfg.search.base_height * f.sup)?;
            let norm = john_normalize(&sec)?;
            let mu_norm = match &measure_spec {
                Some(spec) => Some(mu_normalize_section(&f.u, &sec, spec)?),
                None => None,
            };
            let mut curve = Vec::new();
            let mut hulls = vec![(sec.hull.clone(), "#1f77b4".to_string(), false)];
            for j in 1..=cfg.search.curve_heights {
                let hh = sec.height * 0.5f64.powi(j as i32);
                let Ok(sj) = compute_section(&f.u, center, hh) else { break };
                let Ok(nz) = john_normalize(&sj) else { break };
                let hn = f.h.norm[center];
                curve.push(SizePoint { height: hh, alpha: nz.alpha, sigma: nz.sigma, ratio: nz.alpha / hn });
                hulls.push((sj.hull.clone(), "#1f77b4".to_string(), true));
            }
            let delta = estimate_delta(&f.u, cfg.search.delta_samples, cfg.seed)?;
            s.delta = Some(delta.delta);
            s.base_alpha = Some(mu_norm.as_ref().map_or(norm.alpha, |m| m.alpha));
            r.emit_csv("size_curve.csv", &curve)?;
            let out = SectionsOutput {
                cells: f.cells,
                sup_norm: f.sup,
                base: SectionSummary::of(&sec),
                normalization: norm,
                mu_normalization: mu_norm,
                curve,
                delta: delta.clone(),
            };
            r.emit_json("sections.json", &out)?;
            let svg = render_overlay(&Overlay {
                title: format!("S_h(x0), h = {:.4} halving; delta = {}", sec.height, delta.delta),
                outline: domain_outline(&st.domain),
                polygons: hulls,
                points: Vec::new(),
            });
            r.emit_text("sections.svg", &svg)?;
            Ok((sec, delta.delta))
        })?);
    }

    // Vitali cover of D_1 inside the base section.
    if let (Some(f), Some((sec, delta)), true) = (fine, &base, stages.cover) {
        r.stage("cover", |r| {
            let m = if cfg.m_sweep.contains(&4.0) { 4.0 } else { cfg.m_sweep[0] };
            let bm = sec.mask(f.u.grid.len());
            let d = level_decompose(&f.h, &bm, m, Some(1))?;
            let targets: Vec<usize> = d.sets.get(1).map_or(Vec::new(), |t| t.iter().map(|&i| i as usize).collect());
            let doubled = compute_section(&f.u, sec.center, 2.0 * sec.height)?;
            let size = size_for(&f.u, measure_spec.as_ref());
            let found: Vec<Option<f64>> = {
                use rayon::prelude::*;
                targets.par_iter().map(|&x| size_search(&f.u, x, m.sqrt(), sec.height, &doubled, size.as_ref())).collect()
            };
            let mut heights = vec![f64::NAN; f.u.grid.len()];
            let mut kept = Vec::new();
            for (x, h) in targets.iter().zip(&found) {
                if let Some(h) = h {
                    heights[*x] = *h;
                    kept.push(*x);
                }
            }
            let cover = crate::sections::vitali_cover(&f.u, &kept, &|x| heights[x], *delta)?;
            let summary = CoverSummary {
                m,
                targets: targets.len(),
                excluded: targets.len() - kept.len(),
                selected: cover.selected.len(),
                uncovered: cover.uncovered.len(),
                conflicts: cover.conflicts.len(),
                shrunk_disjoint: cover.shrunk_disjoint(),
            };
            let mut polys: Vec<(Vec<[f64; 2]>, String, bool)> = vec![(sec.hull.clone(), "black".into(), true)];
            polys.extend(cover.sections.iter().map(|c| (c.hull.clone(), "#1f77b4".to_string(), false)));
            polys.extend(cover.shrunk.iter().map(|c| (c.hull.clone(), "#d62728".to_string(), false)));
            let points = targets.iter().map(|&i| {
                let p = f.u.grid.point(i);
                [p[0], p[1]]
            });
            let svg = render_overlay(&Overlay {
                title: format!("Vitali cover of D_1 (M = {m}): {} sections", cover.selected.len()),
                outline: domain_outline(&st.domain),
                polygons: polys,
                points: points.collect(),
            });
            r.emit_text("cover.svg", &svg)?;
            r.emit_json("cover.json", &CoverOutput { summary: summary.clone(), cover })?;
            s.cover = Some(summary);
            Ok(())
        })?;
    }

    // Level decompositions: the region is Omega' on the finest grid, or the
    // graded sampler for homogeneous fields.
    let wang_family: Vec<NormSamples> = match &st.kind {
        SetupKind::Exact { samples, .. } if stages.tails || stages.decay || stages.epsilon => {
            r.stage("sampling", |_| Ok(cfg.wang.depths.iter().map(|&d| wang_samples(samples, cfg.wang.nodes, d)).collect()))?
        }
        _ => Vec::new(),
    };
    let decompose = |m: f64| -> Result<Option<LevelDecomposition>> {
        if let Some(w) = wang_family.last() {
            return level_decompose_samples(w, m, None).map(Some);
        }
        match fine {
            Some(f) => level_decompose(&f.h, &f.omega, m, None).map(Some),
            None => Ok(None),
        }
    };

    if stages.decay || stages.tails {
        let mut sweep = Vec::new();
        let mut energy_series = Vec::new();
        let mut measure_series = Vec::new();
        // A field without a passing constant still gets its level, tail and
        // epsilon outputs; only the covering chain needs C0.
        let c0 = match (&base, fine, cfg.search.c0) {
            (_, _, Some(c)) => Some(c),
            (Some((sec, delta)), Some(f), None) if stages.decay => {
                let t = Instant::now();
                let b = lemma_basic_check(&f.u, &f.h, sec, sec, *delta);
                r.timings.push(StageTiming { stage: "basic".into(), seconds: t.elapsed().as_secs_f64() });
                s.c0_error = b.as_ref().err().map(|e| e.to_string());
                b.ok().map(|b| b.c0)
            }
            _ => None,
        };
        s.c0 = c0;
        for &m in &cfg.m_sweep {
            let name = m_label(m);
            let Some(d) = r.stage(&format!("levels M={name}"), |_| decompose(m))? else { continue };
            let md = measure_decay_check(&d);
            let levels = LevelsOutput {
                measure_decay: md.as_ref().ok().cloned(),
                measure_decay_error: md.as_ref().err().map(|e| e.to_string()),
                energy_tau_fit: energy_tau_fit(&d),
                decomposition: d.clone(),
            };
            r.emit_json(&format!("levels_M{name}.json"), &levels)?;
            r.emit_csv(&format!("levels_M{name}.csv"), &level_rows(&d))?;
            let used = d.resolved_levels();
            energy_series.push(Series::line(&format!("M = {name}"), (0..used).map(|k| (k as f64, d.levels[k].energy)).collect()));
            measure_series.push(Series::line(&format!("M = {name}"), (0..used).map(|k| (k as f64, d.levels[k].measure)).collect()));
            let mut row = SweepRow {
                m,
                resolved_levels: used,
                eps_fit: levels.measure_decay.as_ref().map(|x| x.eps_fit),
                eps_slope: levels.measure_decay.as_ref().and_then(|x| x.eps_slope),
                energy_tau_fit: levels.energy_tau_fit,
                energies_decreasing: strictly_decreasing(&d),
                ..Default::default()
            };
            if let (true, Some(f), Some((sec, delta)), Some(c0)) = (stages.decay, fine, &base, c0) {
                let rep: DecayReport = r.stage(&format!("decay M={name}"), |_| {
                    let bm = sec.mask(f.u.grid.len());
                    let bd = level_decompose(&f.h, &bm, m, None)?;
                    let size = size_for(&f.u, measure_spec.as_ref());
                    crate::regularity::decay_iterate_with(&f.u, &f.h, sec, &bd, *delta, c0, size.as_ref())
                })?;
                let rows: Vec<DecayRow> = rep
                    .steps
                    .iter()
                    .map(|st| DecayRow {
                        k: st.k,
                        alpha: st.alpha,
                        targets: st.targets,
                        excluded: st.excluded,
                        cover_size: st.cover_size,
                        measure_next: st.targets as f64 * f.u.grid.cell_volume(),
                        energy_next: st.energy_next,
                        energy_band: st.energy_band,
                        contraction: st.contraction,
                        chain_bound: st.chain_bound,
                        section_failures: st.section_failures,
                        valid: st.valid,
                    })
                    .collect();
                r.emit_json(&format!("decay_M{name}.json"), &rep)?;
                r.emit_csv(&format!("decay_M{name}.csv"), &rows)?;
                row.tau = Some(rep.tau);
                row.tau_fit = rep.tau_fit;
                row.chain_valid = Some(rep.steps.iter().all(|x| x.valid));
                row.chain_decreasing = Some(rep.strictly_decreasing);
                row.constants = Some(rep.constants.clone());
            }
            sweep.push(row);
        }
        if !energy_series.is_empty() {
            let plot = |title: &str, y: &str, series: Vec<Series>| Plot {
                title: title.into(),
                x_label: "k".into(),
                y_label: y.into(),
                log_x: false,
                log_y: true,
                series,
            };
            r.emit_text("energies.svg", &render_plot(&plot("Truncated energies over D_k", "energy", energy_series)))?;
            r.emit_text("measures.svg", &render_plot(&plot("Level-set measures |D_k|", "|D_k|", measure_series)))?;
        }
        s.all_tau_positive = stages.decay.then(|| sweep.iter().all(|x| x.tau.is_some_and(|t| t > 0.0)));
        let eps: Vec<f64> = sweep.iter().filter_map(|x| x.eps_fit).collect();
        s.all_eps_positive = (!eps.is_empty()).then(|| eps.iter().all(|&e| e > 0.0));
        s.sweep = sweep;
        let region = match (wang_family.last(), fine) {
            (Some(w), _) => Some(w.clone()),
            (None, Some(f)) => Some(NormSamples::from_hessian(&f.h, &f.omega)),
            _ => None,
        };
        s.eps_fit_large_m = region.and_then(|w| eps_fit_large_m(&w, &LARGE_M)).map(|(m, d)| (m, d.eps_fit));
    }

    if stages.tails {
        r.stage("tails", |r| {
            let Some(d) = decompose(cfg.m_sweep[0])? else { return Ok(()) };
            let rep = tail_bound_check(&d);
            let by_grid: Vec<(usize, f64)> = if is_wang {
                cfg.wang
                    .depths
                    .iter()
                    .zip(&wang_family)
                    .map(|(&dp, w)| level_decompose_samples(w, 2.0, Some(0)).map(|d| (dp, tail_bound_check(&d).c_uniform)))
                    .collect::<Result<_>>()?
            } else {
                fields
                    .iter()
                    .map(|f| level_decompose(&f.h, &f.omega, 2.0, Some(0)).map(|d| (f.cells, tail_bound_check(&d).c_uniform)))
                    .collect::<Result<_>>()?
            };
            let rows: Vec<TailRow> = d
                .tails
                .iter()
                .map(|t| TailRow {
                    k_value: t.k_value,
                    nodes: t.nodes,
                    measure: t.measure,
                    resolved: t.resolved,
                    bound: rep.c_uniform / (t.k_value * t.k_value.ln()),
                })
                .collect();
            r.emit_csv("tails.csv", &rows)?;
            let mut series = vec![Series {
                label: "|F_K|".into(),
                points: rep.points.clone(),
                dashed: false,
                scatter: true,
            }];
            series.push(Series {
                label: "c/(K log K)".into(),
                points: rep.points.iter().map(|&(k, _)| (k, rep.c_uniform / (k * k.ln()))).collect(),
                dashed: true,
                scatter: false,
            });
            if let (Some(slope), Some(&(k0, f0))) = (rep.slope, rep.points.first()) {
                series.push(Series {
                    label: format!("slope {slope:.3}"),
                    points: rep.points.iter().map(|&(k, _)| (k, f0 * (k / k0).powf(slope))).collect(),
                    dashed: true,
                    scatter: false,
                });
            }
            let plot = Plot {
                title: "Tail measures |F_K|".into(),
                x_label: "K".into(),
                y_label: "|F_K|".into(),
                log_x: true,
                log_y: true,
                series,
            };
            r.emit_text("tails.svg", &render_plot(&plot))?;
            s.tail_c = Some(rep.c_uniform);
            s.tail_slope = rep.slope;
            s.tail_c_by_grid = by_grid.iter().map(|x| x.1).collect();
            r.emit_json("tails.json", &TailsOutput { report: rep, c_uniform_by_grid: by_grid })
        })?;
    }

    if stages.epsilon {
        r.stage("epsilon", |r| {
            let (family, names): (Vec<NormSamples>, Vec<String>) = if is_wang {
                (wang_family.clone(), cfg.wang.depths.iter().map(|d| format!("depth {d}")).collect())
            } else {
                (
                    fields.iter().map(|f| NormSamples::from_hessian(&f.h, &f.omega)).collect(),
                    fields.iter().map(|f| format!("{} cells", f.cells)).collect(),
                )
            };
            let table = if family.len() >= 2 { epsilon_table(&family)?.table } else { Vec::new() };
            let estimate = (family.len() >= 3).then(|| table.iter().take_while(|x| x.stable).last().map_or(0.0, |x| x.eps));
            let mut layer = Vec::new();
            if let Some(fs) = family.last() {
                for j in crate::regularity::EPS_EXPONENTS {
                    let eps = 2f64.powi(j);
                    let (direct, lc) = match w21eps_samples(fs, eps) {
                        Ok(w) => (w.direct, w.layer_cake),
                        Err(Error::LayerCakeMismatch { direct, layer_cake }) => (direct, layer_cake),
                        Err(e) => return Err(e),
                    };
                    let rel_diff = if direct == 0.0 { 0.0 } else { (direct - lc).abs() / direct };
                    layer.push(LayerRow { eps, direct, layer_cake: lc, rel_diff });
                }
            }
            #[derive(Serialize)]
            struct EpsCsv {
                eps: f64,
                stable: bool,
                norms: String,
            }
            let rows: Vec<EpsCsv> = table
                .iter()
                .map(|x| EpsCsv {
                    eps: x.eps,
                    stable: x.stable,
                    norms: x.norms.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(";"),
                })
                .collect();
            r.emit_csv("epsilon.csv", &rows)?;
            r.emit_csv("layer_cake.csv", &layer)?;
            s.eps_estimate = estimate;
            s.eps_stable = table.iter().map(|x| x.stable).collect();
            s.layer_cake_max_rel = layer.iter().map(|x| x.rel_diff).reduce(f64::max);
            r.emit_json("epsilon.json", &EpsilonOutput { family: names, table, estimate, layer_cake: layer })
        })?;
    }

    if let (true, SetupKind::Measure { spec }) = (stages.mu, &st.kind) {
        r.stage("mu", |r| {
            let doubling = check_doubling(spec, &st.domain, &sampler)?;
            #[derive(Serialize)]
            struct RatioRow {
                body: usize,
                kind: crate::measure::SubsetKind,
                lebesgue: f64,
                mu: f64,
                nodes: usize,
            }
            let rows: Vec<RatioRow> = doubling
                .ratios
                .iter()
                .map(|x| RatioRow { body: x.body, kind: x.kind, lebesgue: x.lebesgue, mu: x.mu, nodes: x.nodes })
                .collect();
            r.emit_csv("doubling.csv", &rows)?;
            let plot = Plot {
                title: format!("mu(E)/mu(S) >= {:.3} (|E|/|S|)^{:.3}", doubling.gamma, doubling.beta),
                x_label: "|E|/|S|".into(),
                y_label: "mu(E)/mu(S)".into(),
                log_x: true,
                log_y: true,
                series: vec![
                    Series { label: "samples".into(), points: rows.iter().map(|x| (x.lebesgue, x.mu)).collect(), dashed: false, scatter: true },
                    Series {
                        label: "fit".into(),
                        points: {
                            let lo = rows.iter().map(|x| x.lebesgue).fold(1.0, f64::min).max(1e-12);
                            (0..=20).map(|i| lo.powf(1.0 - i as f64 / 20.0)).map(|t| (t, doubling.gamma * t.powf(doubling.beta))).collect()
                        },
                        dashed: true,
                        scatter: false,
                    },
                ],
            };
            r.emit_text("doubling.svg", &render_plot(&plot))?;
            s.doubling_gamma = Some(doubling.gamma);
            s.doubling_beta = Some(doubling.beta);
            s.doubling_certified = Some(doubling.certified());
            let good = match (fine, &base, &measure_spec) {
                (Some(f), Some((sec, delta)), Some(ms)) => Some(good_determinant(&f.u, &f.h, sec, *delta, ms, &doubling)?),
                _ => None,
            };
            s.good_measure = good.as_ref().map(|g| g.measure);
            let eps_fit = s.sweep.iter().map(|x| (x.m, x.eps_fit)).collect();
            r.emit_json("mu.json", &MuOutput { doubling, good, eps_fit })
        })?;
    }

    let mut files = Vec::new();
    for name in &r.files {
        let bytes = std::fs::read(cfg.out.join(name))?;
        files.push(EmittedFile { path: name.clone(), sha256: hex(&Sha256::digest(&bytes)), bytes: bytes.len() as u64 });
    }
    let manifest = RunManifest {
        artifact_version: ARTIFACT_VERSION.into(),
        config_hash: cfg.hash(),
        problem: cfg.problem.selector(),
        seed: cfg.seed,
        config: cfg.clone(),
        timings: r.timings,
        files,
        summary: s,
    };
    write_json(&cfg.out.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiffRow {
    pub key: String,
    pub a: f64,
    pub b: f64,
    /// `|a - b| / max(|a|, |b|)`, 0 when both vanish.
    pub rel_diff: f64,
    /// Declared stability tolerance for this quantity, if any.
    pub tolerance: Option<f64>,
    pub within: Option<bool>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlagRow {
    pub key: String,
    pub a: bool,
    pub b: bool,
    pub agree: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiffReport {
    pub problem: String,
    pub same_config: bool,
    pub rows: Vec<DiffRow>,
    pub flags: Vec<FlagRow>,
    pub only_in_a: Vec<String>,
    pub only_in_b: Vec<String>,
    /// Emitted files present in both runs with different contents.
    pub differing_files: Vec<String>,
}

impl DiffReport {
    pub fn all_zero(&self) -> bool {
        self.rows.iter().all(|r| r.rel_diff == 0.0) && self.differing_files.is_empty()
    }

    pub fn flags_agree(&self) -> bool {
        self.flags.iter().all(|f| f.agree)
    }
}

/// Relative tolerances for quantities that are expected to be stable under refinement.
fn tolerance(key: &str) -> Option<f64> {
    let leaf = key.rsplit('.').next().unwrap_or(key);
    match leaf {
        // One dyadic step.
        "c0" => Some(0.5),
        "tail_c" => Some(0.25),
        _ if key.starts_with("tail_c_by_grid") => Some(0.25),
        _ => None,
    }
}

#[derive(Default)]
struct Leaves {
    numbers: BTreeMap<String, f64>,
    flags: BTreeMap<String, bool>,
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut Leaves) {
    use serde_json::Value;
    let join = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match v {
        Value::Number(n) => {
            if let Some(x) = n.as_f64() {
                out.numbers.insert(prefix.to_string(), x);
            }
        }
        Value::Bool(b) => {
            out.flags.insert(prefix.to_string(), *b);
        }
        Value::Array(a) => {
            for (i, x) in a.iter().enumerate() {
                flatten(&format!("{prefix}[{i}]"), x, out);
            }
        }
        Value::Object(o) => {
            for (k, x) in o {
                flatten(&join(k), x, out);
            }
        }
        _ => {}
    }
}

/// Side-by-side comparison of two runs of the same problem.
pub fn compare(a: &RunManifest, b: &RunManifest) -> Result<DiffReport> {
    if a.problem != b.problem {
        return Err(Error::IncompatibleManifests(format!("problems differ: {} vs {}", a.problem, b.problem)));
    }
    if a.artifact_version != b.artifact_version {
        return Err(Error::IncompatibleManifests(format!(
            "artifact versions differ: {} vs {}",
            a.artifact_version, b.artifact_version
        )));
    }
    let leaves = |m: &RunManifest| {
        let mut l = Leaves::default();
        flatten("", &serde_json::to_value(&m.summary).expect("summary serializes"), &mut l);
        l
    };
    let (la, lb) = (leaves(a), leaves(b));
    let mut rows = Vec::new();
    let mut only_in_a = Vec::new();
    for (k, &x) in &la.numbers {
        match lb.numbers.get(k) {
            Some(&y) => {
                let scale = x.abs().max(y.abs());
                let rel_diff = if scale == 0.0 || x == y { 0.0 } else { (x - y).abs() / scale };
                let tol = tolerance(k);
                rows.push(DiffRow { key: k.clone(), a: x, b: y, rel_diff, tolerance: tol, within: tol.map(|t| rel_diff <= t) });
            }
            None => only_in_a.push(k.clone()),
        }
    }
    let only_in_b = lb.numbers.keys().filter(|k| !la.numbers.contains_key(*k)).cloned().collect();
    let flags = la
        .flags
        .iter()
        .filter_map(|(k, &x)| lb.flags.get(k).map(|&y| FlagRow { key: k.clone(), a: x, b: y, agree: x == y }))
        .collect();
    let files_b: BTreeMap<&str, &str> = b.files.iter().map(|f| (f.path.as_str(), f.sha256.as_str())).collect();
    let differing_files =
        a.files.iter().filter(|f| files_b.get(f.path.as_str()).is_some_and(|h| *h != f.sha256)).map(|f| f.path.clone()).collect();
    Ok(DiffReport {
        problem: a.problem.clone(),
        same_config: a.config_hash == b.config_hash,
        rows,
        flags,
        only_in_a,
        only_in_b,
        differing_files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_parses_to_defaults() {
        let cfg = ExperimentConfig::from_toml(ExperimentConfig::template()).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.problem = Problem::Wang { alpha: 3.0 };
        cfg.search.c0 = Some(4.0);
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn single_grid_refinement_rejected() {
        let text = "grids = [64]\n[problem]\nkind = \"radial\"\n";
        assert!(matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))));
        let text = "grids = [64]\nrefinement = false\n[problem]\nkind = \"radial\"\n";
        assert!(ExperimentConfig::from_toml(text).is_ok());
    }

    #[test]
    fn invalid_values_rejected() {
        for text in [
            "grids = [128, 64]\n[problem]\nkind = \"radial\"\n",
            "m_sweep = [1.0]\n[problem]\nkind = \"radial\"\n",
            "[problem]\nkind = \"wang\"\nalpha = 0.5\n",
            "[problem]\nkind = \"mu\"\nspec = \"/nonexistent/measure.json\"\n",
            "[problem]\nkind = \"bogus\"\n",
            "unknown_key = 1\n[problem]\nkind = \"radial\"\n",
        ] {
            assert!(matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn hash_ignores_output_directory() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn log_slope_two_points() {
        let s = log_slope(&[(0.1, 0.01), (0.05, 0.0025)]).unwrap();
        assert!((s - 2.0).abs() < 1e-12);
    }

    fn manifest(problem: &str, tau: f64) -> RunManifest {
        RunManifest {
            artifact_version: ARTIFACT_VERSION.into(),
            config_hash: "h".into(),
            problem: problem.into(),
            seed: 0,
            config: ExperimentConfig::default(),
            timings: Vec::new(),
            files: Vec::new(),
            summary: RunSummary {
                c0: Some(4.0),
                sweep: vec![SweepRow { m: 4.0, tau: Some(tau), ..Default::default() }],
                all_tau_positive: Some(tau > 0.0),
                ..Default::default()
            },
        }
    }

    #[test]
    fn compare_reports_relative_differences() {
        let d = compare(&manifest("radial", 0.5), &manifest("radial", 0.25)).unwrap();
        let row = d.rows.iter().find(|r| r.key == "sweep[0].tau").unwrap();
        assert!((row.rel_diff - 0.5).abs() < 1e-15);
        assert!(d.flags_agree());
        assert!(!d.all_zero());
        let same = compare(&manifest("radial", 0.5), &manifest("radial", 0.5)).unwrap();
        assert!(same.all_zero());
        let c0 = same.rows.iter().find(|r| r.key == "c0").unwrap();
        assert_eq!(c0.within, Some(true));
    }

    #[test]
    fn compare_rejects_different_problems() {
        assert!(matches!(
            compare(&manifest("radial", 0.5), &manifest("oscillatory-f", 0.5)),
            Err(Error::IncompatibleManifests(_))
        ));
    }
}
