//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod graph;
mod params;
mod suite;
mod tensor;

pub use gradcheck::{grad_check, grad_check_on, grad_check_steps, relative_error, GradCheckReport, ParamCheck, Stencil};
pub use graph::{leaky, sigmoid, Fault, Gradients, Graph, Var};
pub use params::{Checkpoint, ParameterStore, CHECKPOINT_HEADER};
pub use suite::{primitive_suite, PrimitiveCheck, KINK_MARGIN, PRIMITIVE_STEPS, PRIMITIVE_TOLERANCE};
pub use tensor::{Tensor, MAX_RANK};

pub const LAYER_NORM_EPS: f64 = 1e-5;
