pub mod backbone;
pub mod baselines;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gpak;
pub mod losses;
pub mod model;
pub mod params;
pub mod report;
pub mod rng;
pub mod tape;
pub mod trainer;

pub use error::{GaitError, Result};
