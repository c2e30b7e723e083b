//! Minimal convolutional network toolkit: parameter stores, layers with
//! hand-written backward passes, and first-order optimizers.

mod layers;
mod optim;
mod params;

pub use layers::{upsample2x, BatchNorm2d, Cache, Conv2d, Ctx, Layer, Mode, NormUpdate, Sequential};
pub use optim::{Optimizer, OptimizerConfig};
pub use params::{ArrayRole, Grads, ParamArray, ParamStore, PartitionTag};
