//! Human-in-the-loop test-time adaptation for segmentation networks.

pub mod backbone;
pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod feedback_adapt;
pub mod harness;
pub mod mask;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod oracle;
pub mod pre_adapt;
pub mod raster;
pub mod styleaug;
pub mod tensor;

pub use error::{Error, Result};
