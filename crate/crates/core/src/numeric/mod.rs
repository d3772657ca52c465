//! Dense numeric kernel shared by every learning stage.

pub mod fmt;
pub mod gradcheck;
pub mod matrix;
pub mod mlp;
pub mod optim;
pub mod rng;

pub use gradcheck::{grad_check, GradCheckReport};
pub use matrix::Matrix;
pub use mlp::{sigmoid, Activation, ForwardCache, Layer, Mlp, MlpGrads};
pub use optim::{Optimizer, OptimizerKind, ParamGroup};
pub use rng::{stage_seed, SeededRng};
