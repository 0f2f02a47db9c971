//! Temporal alignment for control.
//!
//! Learns one sub-policy per sub-task from demonstrations that are annotated
//! only with a *task sketch*, the ordered list of sub-tasks performed, by
//! maximising the joint likelihood of the sketch and the demonstrated actions
//! given the states. The forward lattice over all sketch-consistent alignments
//! is differentiated end to end, so alignment and imitation inform each other.
//!
//! The crate also carries the two baselines the method is usually compared
//! against (behavioural cloning on ground-truth segmentations, and two-stage CTC
//! alignment followed by cloning), the NavWorld benchmark, and the evaluation
//! harness for task, sub-task and alignment accuracy.
//!
//! Module map:
//!
//! - [`autodiff`]: reverse-mode differentiation over dense arrays.
//! - [`policy`]: sub-policy networks (Gaussian action head plus stop head) and
//!   the CTC sub-task classifier.
//! - [`alignment`]: CTC and joint forward lattices, brute-force path oracles,
//!   argmax decoding, soft alignments and derived stop targets.
//! - [`training`]: the four learners and the optimizer.
//! - [`navworld`]: the 2D navigation domain and demonstration generator.
//! - [`evaluation`]: sketch-driven rollouts and the accuracy metrics.
//! - [`cli`]: the `taco` command-line surface.
//!
//! Runnable walkthroughs for each capability live in `examples/`.

pub mod alignment;
pub mod autodiff;
pub mod cli;
pub mod evaluation;
pub mod navworld;
pub mod policy;
pub mod rng;
pub mod training;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, dimensions, ids or required inputs do not fit together.
    #[error("structural error: {0}")]
    Structural(String),
    #[error("numeric error at {node}: {message}")]
    Numeric {
        node: String,
        index: usize,
        message: String,
    },
    #[error("degenerate lattice: every entry of row t={t} underflowed")]
    DegenerateLattice { t: usize },
    #[error("refused: {0}")]
    Refused(String),
    #[error("demonstration generation failed: {0}")]
    Generation(String),
    /// Malformed or incompatible data files.
    #[error("data error: {0}")]
    Data(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
