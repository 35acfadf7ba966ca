// `!(x > y)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cascade;
pub mod codec;
pub mod config;
pub mod container;
pub mod entropy;
pub mod error;
pub mod experiments;
pub mod image_io;
pub mod metrics;
pub mod simulator;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
