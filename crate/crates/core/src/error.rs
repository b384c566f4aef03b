use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at layer {layer}: {detail}")]
    ShapeMismatch { layer: usize, detail: String },

    #[error("tensor shape {shape:?} does not hold {len} values")]
    BadTensor { shape: Vec<usize>, len: usize },

    #[error("activation record does not match this network: {0}")]
    StaleRecord(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid layer specification: {0}")]
    BadLayerSpec(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid group count {count} for layer {layer} ({filters} filters)")]
    BadGroupCount {
        layer: usize,
        count: usize,
        filters: usize,
    },

    #[error("clustering requires 1 <= k <= {n}, got k = {k}")]
    BadClusterCount { k: usize, n: usize },

    #[error("group assignment inconsistent with network: {0}")]
    BadAssignment(String),

    #[error("fine-tuning diverged at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("invalid configuration: {0}")]
    BadConfig(String),

    #[error("{path}: {detail} at byte offset {offset}")]
    BadFormat {
        path: String,
        detail: String,
        offset: usize,
    },

    #[error("dataset error: {0}")]
    BadDataset(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
