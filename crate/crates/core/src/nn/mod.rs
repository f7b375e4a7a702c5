//! Differentiable building blocks shared by every network.

pub mod attention;
pub mod bottleneck;
pub mod gradcheck;
mod graph;
mod kernels;
pub mod layers;
mod params;
pub mod style;
mod tensor;

pub use graph::{BatchStats, Grads, Graph, Var};
pub use kernels::ConvGeom;
pub use params::ParamStore;
pub use tensor::{Real, Tensor};
