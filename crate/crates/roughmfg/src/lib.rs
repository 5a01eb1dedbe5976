//! Configuration, file formats and experiment orchestration on top of
//! [`roughmfg_core`].

pub mod config;
pub mod error;
pub mod io;
pub mod manifest;
pub mod run;

pub use config::{validate, Config};
pub use error::{RunError, RunResult};
pub use run::{run, Outcome, RunOptions};
