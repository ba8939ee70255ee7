//! Training-data attribution: given a candidate corpus and pre-extracted
//! response/document features, rank the documents most likely to support
//! each target-model response.
//!
//! The engine covers the benchmark data model ([`corpus`]), lexical and
//! dense baselines ([`lexical`], [`retrieval`]), a supervised contrastive
//! scorer ([`scorer`]), activation-steering scores ([`steering`]), rank
//! fusion ([`fusion`]) and Recall@k reporting ([`eval`]). [`pipeline`] ties
//! them into reproducible runs.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod features;
pub mod fusion;
pub mod lexical;
pub mod pipeline;
pub mod ranking;
pub mod retrieval;
pub mod scorer;
pub mod steering;

pub use error::{Error, Result};
