pub mod augmentation;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod harness;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
