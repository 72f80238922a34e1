pub mod decoder;
pub mod encoder;
pub mod error;
pub mod frontend;
pub mod imageio;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod selfcheck;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
