pub mod cluster;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod numeric;
pub mod pipeline;
pub mod report;
pub mod search;

pub use error::{DiecError, Result};
