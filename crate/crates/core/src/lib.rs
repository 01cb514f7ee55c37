//! Morphable prototype detector.
//!
//! A small network maps proposal descriptors to a feature vector, a
//! background logit and box deltas. Classes are unit prototypes in feature
//! space, scored by dot product against the feature. Training alternates SGD
//! on the network (prototypes frozen) with prototype refreshes from
//! class-mean features (network frozen). New classes are added after training
//! by averaging the features of a few exemplars; no gradients are computed.

pub mod em_trainer;
pub mod embedder;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod morph_inference;
pub mod numkernel;
pub mod objective;
pub mod parallel;
pub mod prototype_store;
pub mod toyworld;

pub use em_trainer::{train, DetectorState, TrainConfig, TrainOutcome};
pub use embedder::{EmbedderConfig, EmbedderParams, Gradients, ProposalOutputs};
pub use error::{Error, Result};
pub use evalkit::{evaluate, EvalReport};
pub use geometry::BBox;
pub use morph_inference::{detect, morph, DetectConfig, Detection};
pub use objective::{ClassScores, LossBreakdown, LossWeights};
pub use prototype_store::{Prototype, PrototypeSet};
pub use toyworld::{Proposal, Scene, SceneConfig, Universe, UniverseConfig};
