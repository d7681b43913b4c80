//! Multi-hop reasoning agents over knowledge graphs, trained per relation
//! with REINFORCE and meta-initialized across relations so that rare
//! relations can be learned from a handful of examples.

pub mod error;
pub mod kg;
pub mod tensor;
pub mod embed;
pub mod env;
pub mod policy;
pub mod reinforce;
pub mod meta;
pub mod eval;
pub mod synthetic;
pub mod config;
pub mod cli;

pub use error::{Error, Result};
