use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("action component {dim} = {value} outside [0, {bound}]")]
    InfeasibleAction { dim: usize, value: i64, bound: i64 },

    #[error("action box has {count} actions, above the enumeration cap {cap}; use the mcd engine")]
    EnumerationCap { count: u128, cap: u128 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("training failed at period {period}: {source}")]
    PeriodTraining {
        period: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("lp solver: {0}")]
    Lp(String),

    #[error("milp solver: {0}")]
    Milp(String),

    #[error("integer optimality cut rejected: upper bound {upper} is below anchor value {anchor}")]
    CutBound { upper: f64, anchor: f64 },

    #[error("transition is not affine in the action over the box (max deviation {deviation:e})")]
    NotAffine { deviation: f64 },

    #[error(
        "state lattice too large for exact DP: {states} states x {actions} actions x {periods} periods, \
         O(|X|^2 x |K| x T) ~ {estimate:e} operations"
    )]
    LatticeTooLarge {
        states: usize,
        actions: usize,
        periods: usize,
        estimate: f64,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("problem too large: {0}")]
    SizeCap(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag, used by the binary's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InfeasibleAction { .. } => "infeasible_action",
            Error::EnumerationCap { .. } => "enumeration_cap",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InvalidInput(_) => "invalid_input",
            Error::Training(_) | Error::PeriodTraining { .. } => "training",
            Error::Lp(_) => "lp",
            Error::Milp(_) => "milp",
            Error::CutBound { .. } => "cut_bound",
            Error::NotAffine { .. } => "not_affine",
            Error::LatticeTooLarge { .. } => "lattice_too_large",
            Error::SizeCap(_) => "size_cap",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
