//! Job service and command-line front end for privacy risk estimation.

pub mod api;
pub mod backend;
pub mod cli;
pub mod error;
pub mod estimate;
pub mod jobs;

pub use error::ServerError;
