//! Reverse-mode autodiff over dense `f64` tensors, a finite-difference
//! gradient checker, and the Adam optimizer.

mod graph;
mod gradcheck;
pub mod init;
pub mod kernels;
mod lstm;
mod optim;
mod params;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck};
pub use graph::{Gradients, Graph, Var};
pub use lstm::{lstm_step, LstmNames, LstmParams};
pub use optim::{adam_step, AdamConfig, OptimState};
pub use params::ParamStore;
pub use rng::SplitRng;
pub use tensor::Tensor;
