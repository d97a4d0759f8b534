pub mod analysis;
pub mod cli;
pub mod config;
pub mod conv;
pub mod dyadic;
pub mod error;
pub mod grid;
pub mod io;
pub mod linalg;
pub mod operators;
pub mod pde;
pub mod scalar;
pub mod sparse;
pub mod suite;
pub mod weight;

pub use error::{MatwError, Result};
