pub mod data;
pub mod diagnostics;
pub mod error;
pub mod expansion;
pub mod fit;
pub mod likelihood;
pub mod model;
pub mod priors;
pub mod run;
pub mod sampler;
pub mod syntax;

pub use error::{Error, Result};
