//! Layer-stack networks with reverse-mode differentiation with respect to
//! both parameters and inputs.

pub mod checkpoint;
mod gemm;
pub mod layer;
pub mod network;
pub mod optim;

pub use layer::{LayerSpec, Padding, Params};
pub use network::{Architecture, ForwardTrace, Gradients, Network, Selector};
pub use optim::Sgd;
