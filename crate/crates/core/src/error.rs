use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate box [{x1}, {y1}, {x2}, {y2}]: requires x1 < x2 and y1 < y2")]
    DegenerateBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("negative or non-finite coordinate in box [{x1}, {y1}, {x2}, {y2}]")]
    NegativeCoordinate { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("ground-truth answer has no tokens after normalization")]
    EmptyGroundTruth,

    #[error("vector dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("cannot normalize a zero vector")]
    ZeroVector,

    #[error("encoder provider unavailable: {0}")]
    ProviderUnavailable(String),

    #[error("page index {index} out of range for {pages} page(s)")]
    PageOutOfRange { index: u32, pages: usize },

    #[error("box lies entirely outside the {width}x{height} page")]
    EmptyAfterClamp { width: u32, height: u32 },

    #[error("failed to decode page image {locator}: {message}")]
    Decode { locator: String, message: String },

    #[error(
        "page {page_id} declares {expected_w}x{expected_h} but image is {actual_w}x{actual_h}"
    )]
    PageDimensionMismatch {
        page_id: String,
        expected_w: u32,
        expected_h: u32,
        actual_w: u32,
        actual_h: u32,
    },

    #[error("group advantage needs at least 2 rewards, got {0}")]
    GroupTooSmall(usize),

    #[error("need {needed} candidate pages besides the source, only {available} available")]
    InsufficientCandidates { needed: usize, available: usize },

    #[error("prediction references unknown query_id {0:?}")]
    UnresolvedQueryId(String),

    #[error("trajectory cannot be serialized: {0}")]
    UnserializableTrajectory(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Errors worth retrying at a higher level (remote encoder outages).
    pub fn is_retriable(&self) -> bool {
        matches!(self, Error::ProviderUnavailable(_))
    }

    /// Stable machine-readable name used in report rows.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DegenerateBox { .. } => "degenerate_box",
            Error::NegativeCoordinate { .. } => "negative_coordinate",
            Error::EmptyGroundTruth => "empty_ground_truth",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::ZeroVector => "zero_vector",
            Error::ProviderUnavailable(_) => "provider_unavailable",
            Error::PageOutOfRange { .. } => "page_out_of_range",
            Error::EmptyAfterClamp { .. } => "empty_after_clamp",
            Error::Decode { .. } => "decode_error",
            Error::PageDimensionMismatch { .. } => "page_dimension_mismatch",
            Error::GroupTooSmall(_) => "group_too_small",
            Error::InsufficientCandidates { .. } => "insufficient_candidates",
            Error::UnresolvedQueryId(_) => "unresolved_query_id",
            Error::UnserializableTrajectory(_) => "unserializable_trajectory",
            Error::Schema(_) => "schema",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Io(_) => "io",
        }
    }
}
