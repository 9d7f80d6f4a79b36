// `!(x > 0.0)` style guards are used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checksum;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod dsp;
pub mod encoder;
pub mod error;
pub mod evalhub;
pub mod fed;
pub mod numcore;
pub mod promptgan;
pub mod rng;

pub use config::ExperimentConfig;
pub use datagen::DomainId;
pub use error::{Error, Result};
