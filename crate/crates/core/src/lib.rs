pub mod analytics;
pub mod engine;
pub mod error;
pub mod exit;
pub mod model;
pub mod prompts;
pub mod sampling;

pub use error::{Error, Result};
