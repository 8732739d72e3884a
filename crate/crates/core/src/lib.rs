//! Missing-modality-robust multimodal classification with cross-modal proxy
//! tokens.
//!
//! Two frozen transformer encoders, one per modality, each gain a learnable
//! proxy token that is trained to approximate the class token of the other
//! modality. When a modality is absent at inference time, the proxy token of
//! the present modality stands in for it. Everything here builds on a small
//! reverse-mode autodiff tape over `f64` matrices and runs without `std`.

#![no_std]

extern crate alloc;

pub mod autodiff;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{ParamId, ParamStore, Tape, Var};
pub use data::{apply_protocol, generate, Dataset, DatasetConfig, MissingProtocol, Sample, SplitStats};
pub use encoder::{EncoderConfig, LoraConfig, Modality};
pub use error::{Error, Result};
pub use fusion::{GateCase, PresenceMask};
pub use metrics::Metrics;
pub use model::{CmptModel, TrainingMode};
pub use objectives::{LabelMode, LabelTarget};
pub use tensor::Tensor2D;
pub use train::{EpochLog, PretrainConfig, TrainConfig};
