pub mod adapt;
pub mod backend;
pub mod config;
pub mod error;
pub mod eval;
pub mod inversion;
pub mod io;
pub mod kernel;
pub mod mask;
pub mod real;
pub mod refine;

pub use error::{Error, Result};
pub mod toy;
pub mod run;
