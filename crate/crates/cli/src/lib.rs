//! File formats, benchmarks, visualization and the `sapa` command line
//! on top of `sapa-core`.

pub mod bench;
pub mod checks;
pub mod cli;
pub mod error;
pub mod method;
pub mod params;
pub mod pgm;
pub mod tensorfile;

pub use error::{CliError, CliResult};
pub use tensorfile::{Payload, TensorFile};
