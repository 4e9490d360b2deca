//! A small Transformer encoder whose hidden states can be gated mid-stack by
//! per-example auxiliary features, together with the baselines, training
//! loop and metric suite used to compare fusion strategies.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense `f64` tensors and a define-by-run tape.
//! - [`data`]: tokenization, feature standardization, stratified splits and
//!   the synthetic interaction task.
//! - [`encoder`]: embeddings, attention, post-norm blocks and the classifier head.
//! - [`isfl`]: gate generation and hidden-state modulation.
//! - [`models`]: the four fusion modes assembled into one [`Model`].
//! - [`training`]: AdamW and the epoch loop.
//! - [`metrics`]: accuracy, macro F1, MCC, Brier, log loss, ECE, ROC-AUC, AP.
//! - [`checkpoint`] and [`experiment`]: persistence and end-to-end runs.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod isfl;
pub mod metrics;
pub mod models;
pub mod tensor;
pub mod training;

pub use autodiff::{
    check_gradient, check_gradient_sampled, GradCheck, Graph, ParamId, ParamStore, Parameter, Var,
};
pub use error::{Error, Result};
pub use models::{FusionMode, Model, ModelConfig};
pub use tensor::Tensor;
