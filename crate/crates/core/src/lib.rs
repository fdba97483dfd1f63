pub mod autodiff;
pub mod error;

pub use error::{Error, Result};
pub mod encoder;
pub mod rng;
pub mod objective;
pub mod splitter;
pub mod optim;
pub mod metrics;
pub mod synth;
pub mod checkpoint;
pub mod adapt;
