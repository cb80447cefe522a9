use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the pipeline can surface.
///
/// Variants split into two groups: input/validation problems (bad slide,
/// bad config, missing upstream artifact) and runtime failures (I/O,
/// numerical divergence). [`Error::is_validation`] tells them apart so the
/// CLI can choose an exit status.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid slide: {0}")]
    InvalidSlide(String),

    #[error("patch index ({grid_x}, {grid_y}) outside {cols}x{rows} grid")]
    IndexOutOfRange {
        grid_x: u32,
        grid_y: u32,
        cols: u32,
        rows: u32,
    },

    #[error("XML parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("identity mismatch: {0}")]
    Identity(String),

    #[error("slide {0} has no scorable tissue patches")]
    EmptySlide(String),

    #[error("insufficient tissue for stain estimation: {usable} usable pixels, need {required}")]
    InsufficientTissue { usable: usize, required: usize },

    #[error("degenerate stain matrix: {0}")]
    DegenerateStains(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("training data lacks class {0}")]
    ClassCoverage(String),

    #[error("training diverged at epoch {epoch} (loss {loss}); try a lower learning_rate")]
    Divergence { epoch: usize, loss: f64 },

    #[error("unknown patch key {0}")]
    Join(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("cohort generation failed: {0}")]
    Generation(String),

    #[error("fewer than min_pts points ({points} < {min_pts}); all points form one cluster")]
    SingleClusterFallback { points: usize, min_pts: usize },

    #[error("missing artifact {}: run `{stage}` first", path.display())]
    MissingArtifact { path: PathBuf, stage: &'static str },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input or configuration rather than a
    /// failure during computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::MissingArtifact { .. }
                | Error::InvalidSlide(_)
                | Error::Parse { .. }
                | Error::Identity(_)
                | Error::Validation(_)
                | Error::Join(_)
                | Error::Stratification(_)
                | Error::ClassCoverage(_)
        )
    }
}
