pub mod autodiff;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod problems;
pub mod riccati;
pub mod sde;
pub mod solver;

pub use error::{Error, Result};
