//! Sequential recommendation with local feature privacy and noisy graph
//! aggregation.

pub mod error;
pub mod eval;
pub mod gnn;
pub mod graph_pipeline;
pub mod ldp_feature;
pub mod privacy_accountant;

pub use error::{Error, Result};
