pub mod ablation;
pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod net;
pub mod objective;
pub mod sampler;
pub mod selftest;
pub mod train;

pub use error::{CoreError, Result};
