#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod constitution;
pub mod error;
pub mod mi;
pub mod ot;
pub mod policy;
pub mod prob_metrics;
pub mod rep_metrics;
pub mod rewards;
pub mod task;

pub use error::{Error, Result};
pub mod trainer;
