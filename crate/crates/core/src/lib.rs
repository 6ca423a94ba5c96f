//! Non-stationary spatial extreme-value modeling of precipitation.

pub mod covariate;
pub mod data;
pub mod error;
pub mod extent;
pub mod gam;
pub mod marginal;
pub mod normal;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod rpareto;
pub mod simulate;
pub mod stats;

pub use error::{Error, Result};
