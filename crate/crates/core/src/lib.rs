pub mod autodiff;
pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod experiment;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod pointnet;
pub mod preprocess;
pub mod synth;
pub mod trainer;
pub mod widedeep;

pub use error::{Error, Result};
