pub mod config;
pub mod convlstm;
pub mod cross_modal;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod tensor;
pub mod training;
pub mod volume;

pub use error::{Error, FormatError, Result};
pub use network::{ModelConfig, ModelParams};
pub use tensor::{Real, Tensor};
pub use volume::{LabelVolume, MultiModalVolume};
