//! Multi-scale residual transformer (MSRT) for classifying 1-D VLF
//! lightning transient waveforms, together with the tooling around it:
//! a small reverse-mode autodiff engine, the signal preprocessing chain,
//! a synthetic waveform generator, and training/evaluation metrics.

pub mod datagen;
pub mod dsp;
pub mod encoder;
pub mod error;
pub mod msr;
pub mod nn;
pub mod tensor;
pub mod train;

pub use encoder::{
    predict, BaselineTransformer, Classifier, Model, ModelConfig, MsrtModel, CLASS_NAMES,
};
pub use error::{Error, Result};
pub use tensor::{Graph, Param, Tensor};
