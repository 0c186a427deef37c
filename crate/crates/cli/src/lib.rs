//! Config-driven front end for pdespline: `fit`, `simulate` and `calibrate`.

pub mod config;
pub mod error;
pub mod run;
pub mod surface;

pub use config::{parse_config, parse_config_str, RunConfig};
pub use error::CliError;
pub use run::{run, RunOptions, RunReport};
