pub mod autodiff;
pub mod data;
pub mod encoder;
pub mod engine;
pub mod error;

pub use error::{Error, ErrorClass, Result};
pub mod model;
pub mod pool;
pub mod vocab;
