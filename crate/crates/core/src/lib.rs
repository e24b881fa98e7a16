pub mod behavior;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod features;
pub mod fixtures;
pub mod params;
pub mod pipeline;
pub mod prompting;
pub mod tuning;

pub use error::{Error, Result};
