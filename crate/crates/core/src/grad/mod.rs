//! Reverse-mode gradients, finite-difference checking, SGD and the toy
//! training loop.

pub mod backward;
pub mod check;
pub mod optim;
pub mod tape;
pub mod train;

pub use check::{batch_loss, grad_model, gradcheck, gradcheck_with, GradCheckOptions, GradCheckReport, ParamCheck};
pub use optim::{sgd_step, Sgd};
pub use tape::{Gradients, Tape, Var};
pub use train::{
    evaluate, quadrant_dataset, smoothed, train_toy, Dataset, EpochStats, QuadrantSpec, TrainConfig, TrainReport,
};
