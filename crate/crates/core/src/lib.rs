//! A desk-scale laboratory for gradient leakage in federated learning.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod eggv;
pub mod error;
pub mod fl;
pub mod harness;
pub mod io;
pub mod lambda;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pgla;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
