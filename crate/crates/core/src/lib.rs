pub mod band;
pub mod basis;
pub mod bayes;
pub mod error;
pub mod finance;
pub mod freq;
pub mod optim;
pub mod pde;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
