pub mod adjfuse;
pub mod cells;
pub mod config;
pub mod error;
pub mod eval;
pub mod jepa;
pub mod measures;
pub mod nn;
pub mod traj;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
