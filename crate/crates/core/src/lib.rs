pub mod autodiff;
pub mod error;
pub mod dependency;
pub mod encoder;
pub mod estimator;
pub mod fusion;
pub mod harness;
pub mod model;
pub mod nn;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
