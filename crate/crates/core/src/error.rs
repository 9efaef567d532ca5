use std::path::PathBuf;

use thiserror::Error;

/// Broad failure classes, used by front-ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("missing file for field `{field}`: {path}")]
    MissingFile { field: String, path: PathBuf },

    #[error("malformed `{field}`: {reason}")]
    Malformed { field: String, reason: String },

    #[error("non-finite value in `{field}` at element {index}")]
    NonFinite { field: String, index: usize },

    #[error("variant {variant} requires the {modality} modality, which the dataset does not provide")]
    MissingModality {
        variant: &'static str,
        modality: &'static str,
    },

    #[error("dataset is unlabeled ({unlabeled} of {total} cells have no label)")]
    Unlabeled { unlabeled: usize, total: usize },

    #[error("classes absent from training data: {}", .0.join(", "))]
    AbsentClasses(Vec<String>),

    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("cannot split: {0}")]
    Split(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Numeric(_) => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], found: &[usize]) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_vec(),
            found: found.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(field: impl Into<String>, reason: impl ToString) -> Self {
        Error::Malformed {
            field: field.into(),
            reason: reason.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
