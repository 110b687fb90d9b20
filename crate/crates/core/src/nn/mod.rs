//! Minimal trainable CNN engine: layer graph, forward/backward passes,
//! cross-entropy loss, SGD and a finite-difference gradient checker.

pub mod exec;
pub mod gradcheck;
pub mod graph;
pub mod loss;
mod ops;
pub mod optim;
pub mod state;

pub use exec::{backward, forward, ForwardPass};
pub use gradcheck::{grad_check, grad_check_objective, GradCheckConfig, GradCheckReport, ObjectiveValue};
pub use graph::{ConvGeometry, LayerKind, LayerSpec, ModelGraph, Source};
pub use loss::softmax_cross_entropy;
pub use optim::{sgd_step, Sgd};
pub use state::{Gradients, LayerState, ModelState};
