pub mod error;
pub mod cli;
pub mod dataio;
pub mod forest;
pub mod harness;
pub mod impute;
pub mod linreg;
pub mod neural;
pub mod numerics;
pub mod report;
pub mod synth;

pub use error::{Error, Result};
