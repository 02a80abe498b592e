//! Contextual sensitive-data detection for tabular datasets.
//!
//! Two pipelines share one engine:
//!
//! * **detect-then-reflect** classifies each column into a PII type
//!   ([`detect`]) and then re-assesses the candidates inside the whole
//!   table ([`reflect`]);
//! * **retrieve-then-detect** looks up country-keyed sensitivity rules
//!   ([`rulebook`]) and grounds a per-column assessment in them
//!   ([`domain`]).
//!
//! [`eval`] scores either pipeline against gold labels, and [`pipeline`]
//! runs a whole corpus end to end. Model calls go through [`gateway`],
//! which can record and replay them byte for byte.

pub mod corpus;
pub mod detect;
pub mod domain;
pub mod error;
pub mod eval;
pub mod gateway;
mod par;
pub mod pipeline;
pub mod reflect;
pub mod rulebook;
pub mod table;
pub mod taxonomy;

pub use error::{Error, Result};
