pub mod backends;
pub mod classifier;
pub mod dataset;
pub mod embeddings;
pub mod error;
pub mod memory;
pub mod metrics;
pub mod pipeline;
pub mod router;
pub mod synthetic;

pub use error::{Error, Result};
