#![no_std]

extern crate alloc;

pub mod controlled;
pub mod error;
pub mod math;
pub mod measureflow;
pub mod mfg;
pub mod models;
pub mod policy;
pub mod quadrature;
pub mod randomize;
pub mod rng;
pub mod roughpath;
pub mod rsde;
pub mod stats;
pub mod vectorfield;

pub use error::{Error, Result};
pub use roughpath::{rho_alpha, BracketMode, HolderReport, RoughPath, TimeGrid};
