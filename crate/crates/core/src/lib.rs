//! Video/text matching with mutually conditioned embeddings.

pub mod cli;
pub mod conditioning;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod hierarchy;
pub mod retrieval;
pub mod seqenc;
pub mod training;

pub use error::{Error, Result};
