//! Semantic segmentation over a simulated noisy channel: a windowed-attention
//! backbone on the transmitter, a lightweight decoder on the receiver.

pub mod augment;
pub mod channel;
pub mod checkpoint;
pub mod datamodel;
pub mod datasets;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod seeds;
pub mod swin;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
