//! Skeleton-based action recognition with a semantics-guided graph network.
//!
//! The crate is self-contained: a reverse-mode tensor engine, NTU skeleton
//! parsing and the canonical dataset format, preprocessing, the three
//! network stages (dynamics representation, joint-level graph convolution,
//! frame-level temporal head), model assembly at one or three temporal
//! scales, and a deterministic training/evaluation harness.

pub mod autodiff;
pub mod checkpoint;
pub mod dynamics;
pub mod error;
pub mod frame_temporal;
pub mod gradcheck;
pub mod joint_graph;
pub mod model;
pub mod optim;
pub mod params;
pub mod preprocess;
pub mod skeleton;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use autodiff::{BatchNormState, Graph, Var};
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use optim::AdamState;
pub use params::{Param, ParamId, ParamSet};
pub use skeleton::{DatasetManifest, Protocol, SkeletonSequence, Split};
pub use tensor::Tensor;
pub use trainer::{TrainConfig, Trainer};
