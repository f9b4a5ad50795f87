//! Importance weighting for joint distribution shift with warm-started
//! projected-gradient weight estimation.

pub mod config;
pub mod constraints;
pub mod critic;
pub mod data;
pub mod error;
pub mod experiment;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod optim;
pub mod pgd;
pub mod ratiobench;
pub mod selftest;
pub mod trainer;
pub mod weights;

pub use error::{Error, Result};
