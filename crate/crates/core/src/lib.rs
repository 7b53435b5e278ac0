//! Ranking, filtering and merging of mask proposals for few-shot segmentation.
//!
//! Each proposal gets four scores in `[0, 1]` from precomputed model outputs
//! (a [`bundle_io::FeatureBundle`]); their mean decides which proposals are
//! OR-merged into the final prediction.

pub mod ablation;
pub mod bundle_io;
pub mod cli;
pub mod eval;
pub mod mask;
pub mod pipeline;
pub mod saliency;
pub mod scoring;
pub mod select;
pub mod synth;
pub mod transport;
pub mod visual;
