pub mod aggregate;
pub mod annotation;
pub mod error;
pub mod evaluate;
pub mod manifest;
pub mod model;
pub mod patching;
pub mod pipeline;
pub mod preprocess;
pub mod records;
pub mod rng;
pub mod scorer;
pub mod synth;
pub mod viz;

pub use error::{Error, Result};
