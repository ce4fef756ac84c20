//! Cross-modal hierarchical matching for fine-grained sketch-to-photo
//! retrieval.
//!
//! Region features of a sketch and a photo are projected to a shared width,
//! enriched by gated co-attention, and merged pair by pair into one vector
//! per branch. Pair selection uses a Gumbel-softmax sample discretized with
//! the straight-through estimator, so the whole pipeline trains end to end
//! under a paired triplet loss on the bundled reverse-mode engine.

pub mod autodiff;
pub mod checkpoint;
pub mod coattention;
pub mod config;
pub mod data;
pub mod embedder;
pub mod error;
pub mod harness;
pub mod hierarchy;
pub mod params;
pub mod tensor;

pub use autodiff::{Gradients, Graph, Var};
pub use embedder::{Model, ModelConfig, ModeFlags, PairEmbedding};
pub use error::{Error, Result};
pub use hierarchy::{Branch, GumbelConfig, HierarchyTrace, NoiseMode, Relaxation, TraceEntry};
pub use params::{Adam, ParamId, ParamStore};
pub use tensor::{Shape, Tensor};
