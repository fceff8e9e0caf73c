//! The shared-weight three-tower descriptor network.
//!
//! One compact convolutional tower maps a 224x224x3 input to a place
//! descriptor; anchor, positive and negative pass through the same
//! parameter set, so the weight sharing is structural rather than copied.
//! Training minimizes the bounded triplet loss
//!
//! ```text
//! E = max(0, 1 - d_n / (margin + d_p))
//! ```
//!
//! with plain-L2 descriptor distances, via analytic gradients and SGD.
//! When validation loss plateaus on the random-negative database, training
//! is resumed once on the hard-negative database.
//!
//! Everything runs in f64. Batch gradients may be computed in parallel but
//! are reduced in batch order, so training is deterministic under a seed
//! regardless of thread count.

mod io;
mod loss;
mod net;
mod train;

pub(crate) use loss::l2;

pub use io::{load_weights, load_weights_expecting, save_weights, write_training_log};
pub use loss::{
    loss_gradients, pair_distance, triplet_loss, triplet_loss_value, LossConfig, TripletGradients,
};
pub use net::{
    forward, Activation, ConvParams, ConvStage, DenseParams, DescriptorVector, GradientSet,
    NetworkConfig, TowerWeights,
};
pub use train::{
    detect_plateau, fine_tune_hard, train, EpochLog, TrainConfig, TrainOutcome, TrainPhase,
    TrainState,
};

use thiserror::Error;

use crate::SampleId;

#[derive(Debug, Error)]
pub enum DescriptorError {
    #[error("input shape {found:?} does not match configured {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        found: Vec<usize>,
    },
    #[error("descriptor lengths differ: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("distances must be nonnegative, got d_p={d_p}, d_n={d_n}")]
    NegativeDistance { d_p: f64, d_n: f64 },
    #[error("margin must be > 0, got {margin}")]
    BadMargin { margin: f64 },
    #[error("bad network config: {0}")]
    BadConfig(String),
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("training diverged at epoch {epoch}; last good checkpoint attached")]
    Diverged {
        epoch: usize,
        last_good: Box<TowerWeights>,
    },
    #[error("triplet database is empty")]
    EmptyDb,
    #[error("hard fine-tune requires a plateau on the random_db phase first")]
    PhaseOrder,
    #[error("no network input available for sample {id}")]
    MissingInput { id: SampleId },
    #[error("weight file version {found}, this build reads version {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("weight file rejected: {0}")]
    CorruptWeights(String),
    #[error("weight file descriptor_dim {found} does not match expected {expected}")]
    ConfigMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
