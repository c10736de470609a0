//! Cascade super-resolution for images degraded by blur, downsampling and noise.

pub mod cascade;
pub mod corpus;
pub mod degrade;
pub mod error;
pub mod metrics;
pub mod operator;
pub mod tensor;
pub mod train;
pub mod wiener;

pub use error::{Error, Result};
