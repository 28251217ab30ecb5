pub mod algos;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod forgetting;
pub mod harness;
pub mod hessian;
pub mod landscape;
pub mod linalg;
pub mod mlp;
pub mod quadsim;
pub mod tasks;

pub use error::{Error, Result};
