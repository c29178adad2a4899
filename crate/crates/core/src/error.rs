use crate::numerics::DType;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("{op} requires a float dtype, got {dtype}")]
    NotFloat { op: &'static str, dtype: DType },

    #[error("{op}: cannot reduce over an empty axis")]
    EmptyReduction { op: &'static str },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: i64, classes: usize },

    #[error("payload of length {len} does not fit shape {shape:?}")]
    PayloadLength { shape: Vec<usize>, len: usize },

    #[error("value {value} is not a valid {dtype} element")]
    InvalidElement { value: f32, dtype: DType },

    #[error("tree structure mismatch at `{path}`: expected {expected}, found {found}")]
    StructureMismatch {
        path: String,
        expected: String,
        found: String,
    },

    #[error("at `{path}`: {source}")]
    AtPath {
        path: String,
        #[source]
        source: Box<Error>,
    },

    #[error("differentiated function must return a scalar, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{0}")]
    Message(String),
}

impl Error {
    pub(crate) fn at(self, path: &str) -> Error {
        match self {
            // keep the innermost path, it is the most specific
            e @ Error::AtPath { .. } => e,
            e => Error::AtPath {
                path: path.to_string(),
                source: Box::new(e),
            },
        }
    }
}
