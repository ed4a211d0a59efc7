//! Error type shared across the core modules.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(
        "label bank generation failed after {attempts} attempts: embed_dim {embed_dim} is too \
         small to place {num_classes} classes at pairwise coherence <= {coherence_bound}"
    )]
    CoherenceRejection {
        attempts: usize,
        embed_dim: usize,
        num_classes: usize,
        coherence_bound: f64,
    },

    #[error("rank-deficient system while {context}; supply a positive ridge term")]
    RankDeficient { context: String },

    #[error("zero-norm vector: cosine similarity is undefined")]
    UndefinedSimilarity,

    #[error("embedding norm {norm:.3e} is below 1e-12: input gradient is singular")]
    SingularGradient { norm: f64 },

    #[error("non-finite value encountered in {context}")]
    NumericFailure { context: String },

    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("invalid grid dimensions: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("consensus draw {draw_index} failed twice: {source}")]
    DrawFailed {
        draw_index: usize,
        #[source]
        source: Box<CoreError>,
    },
}

pub type Result<T> = std::result::Result<T, CoreError>;
