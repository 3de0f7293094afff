//! Reconstruction-guided attention network for corruption-robust digit
//! recognition.
//!
//! The model is an iterative encoder-decoder classifier over 28x28 grayscale
//! digits. A convolutional encoder groups its feature maps into 8-dimensional
//! feature capsules; a routing stage binds those features to ten
//! 16-dimensional object capsules whose vector norms are the class scores;
//! a fully-connected decoder renders the winning object capsule back into
//! image space. The reconstruction is used twice as top-down feedback:
//!
//! * as a spatial mask that gates and renormalizes the input for the next
//!   global step, and
//! * as a per-class reconstruction score that suppresses feature-to-object
//!   routing toward object hypotheses that reconstruct the input poorly.
//!
//! Global steps repeat until the entropy of the class-score distribution
//! falls below a threshold, up to a fixed step budget. The number of steps taken
//! is reported as the model's reaction time (RT).

pub mod baseline;
pub mod binding;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod global_loop;
pub mod model;
pub mod nn;
pub mod training;
pub mod types;

pub use config::{EncoderKind, ModelConfig, ReconTargetMode};
pub use error::{Error, Result};
pub use types::{
    FeatureCapsuleField, ImageBatch, InferenceTrace, ObjectCapsuleSet, RoutingState, VoteWeights,
};
