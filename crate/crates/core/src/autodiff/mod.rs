//! Dense reverse-mode differentiation, neural-network layers and Adagrad.

mod nn;
mod optim;
mod params;
mod tape;
mod tensor;

pub use nn::{bce, bce_node, Activation, Dense, Mlp, MlpOutput, PROB_EPS};
pub use optim::Adagrad;
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{sigmoid, Gradients, NodeId, Tape};
pub use tensor::Tensor;
