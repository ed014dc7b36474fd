//! Two-stage vision transformer with learned part discovery and hard input masking.
//!
//! Stage 1 assigns every patch token to one of `K` shared foreground parts or the
//! background. The foreground parts are merged into a binary token mask, and stage 2
//! classifies the image through attention masks that make masked-out patches invisible.
//! Test-time interventions (part removal, token removal) edit the mask without retraining.

pub mod audit;
pub mod databench;
pub mod error;
pub mod interventions;
pub mod model;
pub mod numcore;
pub mod predictor;
pub mod selector;
pub mod trainer;
pub mod vit;

pub use error::{Error, Result};
pub use numcore::{Graph, ParamStore, Rng, Tensor, Var};
