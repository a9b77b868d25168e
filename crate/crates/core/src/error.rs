use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("no client updates supplied")]
    EmptyUpdateSet,

    /// `client_id` is `None` for binary weight operations that have no client context.
    #[error("shape mismatch at layer {layer_index}{}", client_suffix(*.client_id))]
    ShapeMismatch {
        client_id: Option<usize>,
        layer_index: usize,
    },

    #[error("invalid tensor shape: {0}")]
    InvalidShape(String),

    #[error("non-finite value at layer {layer_index}, index {index}")]
    NonFinite { layer_index: usize, index: usize },

    #[error("coordinate ({layer_index}, {coord_index}) missing from selection")]
    MissingCoordinate { layer_index: usize, coord_index: usize },

    #[error("coordinate ({layer_index}, {coord_index}) is outside the template")]
    ExtraCoordinate { layer_index: usize, coord_index: usize },

    #[error("sample is degenerate (fewer than two distinct values)")]
    DegenerateSample,

    #[error("coordinate vector is empty")]
    EmptyVector,

    #[error("K-S sample is empty")]
    EmptySample,

    #[error("cannot trim {trim} values from each end of {clients} clients")]
    TrimTooLarge { trim: usize, clients: usize },

    #[error("krum needs K - f - 2 >= 1 (K = {clients}, f = {f})")]
    TooFewClients { clients: usize, f: usize },

    #[error("subset size {subset} must be smaller than the client count {clients}")]
    SubsetTooLarge { subset: usize, clients: usize },

    #[error("perturbation direction undefined: mean malicious weights have zero norm")]
    ZeroNorm,

    #[error("unknown client id {0}")]
    UnknownClientId(usize),

    #[error("malformed weight dump: {0}")]
    MalformedDump(String),

    #[error("unsupported weight-dump version {0}")]
    UnsupportedVersion(u64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

fn client_suffix(client_id: Option<usize>) -> String {
    match client_id {
        Some(id) => format!(" (client {id})"),
        None => String::new(),
    }
}
