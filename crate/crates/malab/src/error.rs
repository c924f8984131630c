use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain is not convex: {0}")]
    NonConvexDomain(String),
    #[error("no unit-determinant affine map puts the domain between B_1 and B_n: {0}")]
    NormalizationImpossible(String),
    #[error("insufficient stencil: {0}")]
    InsufficientStencil(String),
    #[error("field has positive interior value {value:e} at node {node}")]
    PositiveInteriorValue { node: usize, value: f64 },
    #[error("Newton iteration did not converge: {iterations} iterations, residual {residual:e}")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("degenerate right-hand side: {0}")]
    DegenerateRhs(String),
    #[error("profile integration failed: {0}")]
    ProfileBlowup(String),
    #[error("Monge-Ampere measure not pinched: lambda = {0:e}")]
    PinchFailure(f64),
    #[error("section at node {node} with height {height:e} is empty")]
    EmptySection { node: usize, height: f64 },
    #[error("degenerate section: {0}")]
    DegenerateSection(String),
    #[error("resampling point outside the source domain: {0}")]
    ResamplingOutOfDomain(String),
    #[error("no dyadic delta passes the engulfing checks: {0}")]
    NoPassingDelta(String),
    #[error("coverage gap: {} uncovered nodes; failing pair {pair:?}", uncovered.len())]
    CoverageGap { uncovered: Vec<usize>, pair: Option<(usize, usize)> },
    #[error("no passing constant within the dyadic budget (last tried {0})")]
    NoPassingConstant(f64),
    #[error("direct and rescaled routes disagree: {0}")]
    RescaleMismatch(String),
    #[error("no height with the requested normalized size at {0} nodes")]
    SectionSearchFailure(usize),
    #[error("fewer than 3 nonempty consecutive levels ({0})")]
    InsufficientLevels(usize),
    #[error("direct {direct:e} and layer-cake {layer_cake:e} integrals disagree")]
    LayerCakeMismatch { direct: f64, layer_cake: f64 },
    #[error("no (gamma, beta) fits the sampled doubling ratios: {0}")]
    PropertyViolated(String),
    #[error("section has zero mu-mass")]
    ZeroMuMass,
    #[error("incompatible manifests: {0}")]
    IncompatibleManifests(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("stage {stage} failed: {source}")]
    Stage { stage: String, source: Box<Error> },
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    pub fn in_stage(self, stage: &str) -> Error {
        Error::Stage { stage: stage.to_string(), source: Box::new(self) }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
