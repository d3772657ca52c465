// `!(x > 0.0)` deliberately rejects NaN; index loops mirror the matrix formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod alignment;
pub mod embedding;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod ingest;
pub mod numeric;
pub mod rules;
pub mod simulator;

pub use error::{Error, Result};

/// Library version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
