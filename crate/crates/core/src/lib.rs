//! Automatic tensor-parallel sharding planner.
//!
//! The pipeline loads a model graph, trims auxiliary operators and groups the
//! rest by name scope ([`ir`]), folds repeated blocks into shared subgraphs
//! ([`prune`]), searches weight sharding plans over each shared subgraph
//! ([`search`]) under an analytical communication model ([`cost`]), rewrites
//! the winner into per-device graphs ([`rewrite`]) and checks it against the
//! single-device graph on a reference interpreter ([`interp`]).

pub mod bench;
pub mod cost;
pub mod error;
pub mod interp;
pub mod ir;
pub mod patterns;
pub mod pipeline;
pub mod prune;
pub mod rewrite;
pub mod search;

pub use error::{Error, Result};
