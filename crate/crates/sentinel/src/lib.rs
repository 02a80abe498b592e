//! Operator surface for the detection engine: backend wiring, the scan and
//! evaluate commands, the review log, and the HTTP review service.

pub mod backends;
pub mod cli;
pub mod config;
pub mod error;
pub mod review;
pub mod scan;
pub mod service;

pub use error::{AppError, AppResult};
