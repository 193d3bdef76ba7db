pub mod contrastive;
pub mod corpus;
pub mod decode;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod tokenize;

pub use error::{Error, Result};
pub mod model;
pub mod train;
pub mod synthetic;
pub mod config;
pub mod checkpoint;
pub mod cli;
