pub mod config;
pub mod data_io;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod network;
pub mod numeric;
pub mod oracle;
pub mod pipeline;
pub mod regression;
pub mod sampler;
pub mod simplex_qp;

pub use error::{Error, Result};
