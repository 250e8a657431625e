// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod battery;
pub mod cli;
pub mod config;
pub mod downstream;
pub mod error;
pub mod probes;
pub mod recurrent;
pub mod synthdata;
pub mod training;
pub mod vaeve;

pub use error::{Error, Result};
