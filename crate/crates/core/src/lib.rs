//! Joint video object segmentation and optical flow.
//!
//! A two-branch convolutional network predicts a foreground mask and a dense
//! flow field for a pair of consecutive frames, exchanging features between
//! the branches at several scales. The crate carries everything needed to
//! train and evaluate it at desk scale: a small reverse-mode tensor engine,
//! the losses, the alternating offline trainer and online fine-tuner, data
//! augmentation, DAVIS-style metrics, `.flo` I/O and a synthetic
//! moving-shapes generator.

pub mod augmentation;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;
pub mod types;

pub use error::{Error, FloError, Result};
pub use model::{
    build_flow_branch, build_segmentation_branch, Branch, FeaturePyramid, ModelConfig, SegFlowModel, SegFlowOutput,
};
pub use tensor::Tensor;
pub use types::{FramePair, Mask};
