//! Knowledge graph completion with disentangled structure prompts.
//!
//! Entity embeddings are split into `K` components by relation-aware attentive
//! aggregation over the graph, projected into per-layer prefix prompts for a
//! frozen transformer encoder, and decoded by two parallel heads: a textual
//! head scoring the `[MASK]` state against frozen entity-text embeddings and a
//! structural head scoring the transformed prompt states with a KGE function.
//! The two score vectors are fused with learned uncertainty weights.

pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph_learner;
pub mod kg;
pub mod model;
pub mod predictors;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Adam, Checkpoint, ParamId, ParamStore, Parameter, Tape, Tensor, Var};
