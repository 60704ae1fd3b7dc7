pub mod buyers;
pub mod calibration;
pub mod error;
pub mod estimation;
pub mod harness;
pub mod instances;
pub mod model;
pub mod policies;
pub mod rng;
pub mod solver;

pub use error::{Error, Result};
pub use model::{DemandParams, Environment, Group};
