pub mod bench;
pub mod cli;
pub mod comm;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod layer;
pub mod lsh;
pub mod real;
pub mod sparse;

pub use error::{DataError, Error, Result, TransportError};
