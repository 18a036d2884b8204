//! Transformer hypernetworks for implicit neural representations.

pub mod analysis;
pub mod data;
pub mod diff;
mod error;
pub mod hypernet;
pub mod inr;
pub mod raster;
pub mod render;
pub mod tokenizer;
pub mod train;

pub use diff::{Graph, Precision, Real, Tensor, Var};
pub use error::{Error, Result};
pub use hypernet::{HypernetConfig, MetaLearner, Observation};
pub use inr::{InrArch, InrMode, WeightSet};
pub use raster::Image;
pub use train::{LossMode, TrainConfig, Trainer};
