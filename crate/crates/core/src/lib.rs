//! Visually enhanced text embeddings: sentence encoders trained so that
//! caption embeddings correlate with projected image features.

pub mod cli;
pub mod contrastive;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod optim;
pub mod search;
pub mod seed;
pub mod tensor;

pub use error::{ErrorCategory, Result, VeteError};
