//! HResFormer: a hybrid 2D/3D transformer for volumetric segmentation.
//!
//! A 2D pyramid transformer segments each axial slice; a fusion module
//! mixes the stacked slice predictions with the raw volume; a windowed 3D
//! transformer then predicts a residual correction on top of the 2D
//! logits. Everything, including the autodiff tensor core, is implemented
//! in this crate.

pub mod attention;
pub mod backbone2d;
pub mod backbone3d;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod hlgm;
pub mod kernels;
pub mod loss;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod suite;
pub mod phantom;
pub mod tensor;
pub mod train;

pub use config::{Config, DataConfig, ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::HResFormer;
pub use graph::{Graph, Var};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};
