use thiserror::Error;

#[derive(Debug, Error)]
pub enum NswError {
    #[error("invalid instance: {}", .0.join("; "))]
    InvalidInstance(Vec<String>),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("allocation is not integral")]
    NotIntegral,

    #[error("search space of {size} states exceeds limit {limit}")]
    SearchSpaceTooLarge { size: f64, limit: f64 },

    #[error("invalid market state: {0}")]
    InvalidMarketState(String),

    #[error("price increase did not terminate after {iterations} iterations (surplus {surplus:.3e})")]
    IterationCap { iterations: usize, surplus: f64 },

    #[error("market precondition violated: {0}")]
    MarketPrecondition(String),

    #[error("invalid spending graph: {0}")]
    InvalidSpendingGraph(String),

    #[error("polynomial evaluation failed: {0}")]
    Polynomial(String),

    #[error("invalid sampling input: {0}")]
    Sampling(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed document: {0}")]
    Format(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl NswError {
    /// Stable snake_case name of the variant, for machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            NswError::InvalidInstance(_) => "invalid_instance",
            NswError::ShapeMismatch(_) => "shape_mismatch",
            NswError::IndexOutOfRange(_) => "index_out_of_range",
            NswError::NotIntegral => "not_integral",
            NswError::SearchSpaceTooLarge { .. } => "search_space_too_large",
            NswError::InvalidMarketState(_) => "invalid_market_state",
            NswError::IterationCap { .. } => "iteration_cap",
            NswError::MarketPrecondition(_) => "market_precondition",
            NswError::InvalidSpendingGraph(_) => "invalid_spending_graph",
            NswError::Polynomial(_) => "polynomial",
            NswError::Sampling(_) => "sampling",
            NswError::Io(_) => "io",
            NswError::Format(_) => "format",
            NswError::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, NswError>;
