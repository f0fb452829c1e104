//! Reverse-mode automatic differentiation over 5-D tensors, with the layer
//! set both networks need, Adam, and a cyclic learning-rate schedule.

mod graph;
mod layers;
mod optim;
mod params;
mod real;
mod tensor;

pub use graph::{conv_output_len, BnStats, BnUpdate, Graph, Mode, Var, BN_EPS};
pub use layers::{BatchNorm3d, Conv3d, Ctx, Linear};
pub use optim::{adam_step, AdamConfig, AdamState, CyclicLrSchedule};
pub use params::{constant, he_normal, ParamId, ParamKind, ParamStore, Parameter};
pub use real::Real;
pub use tensor::{numel, Shape, Tensor};
