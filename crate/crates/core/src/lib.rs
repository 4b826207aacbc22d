pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod frontend;
pub mod metrics;
pub mod network;
pub mod objectives;
pub mod params;
pub mod tokens;
pub mod trainer;
pub mod workbench;

pub use error::{Error, Result};
