//! Dense matrix arithmetic, seeded random streams, linear-layer stacks with
//! per-sample gradients, and the SGD/Adam optimizers.

pub mod matrix;
pub mod mlp;
pub mod optim;
pub mod rng;

pub use matrix::Matrix;
pub use mlp::{Activation, BackwardResult, ForwardCache, Layer, LayerGrad, MlpStack};
pub use optim::{adam_step, sgd_step, AdamParams, OptimizerState};
pub use rng::{gaussian_sample, Purpose, RngStream, StreamId};
