//! Minimal differentiable substrate: parameters, layers with hand-written
//! backward passes, and SGD.

mod layers;
mod optim;
mod param;
mod scalar;

pub use layers::{
    avg_pool, avg_pool_backward, leaky_relu, leaky_relu_backward, max_pool2, max_pool2_backward,
    sigmoid, sigmoid_backward, Conv3x3, Linear, SampleNorm, SampleNormCache, LEAKY_SLOPE,
};
pub(crate) use layers::view2;
pub use optim::Sgd;
pub(crate) use param::join;
pub use param::{Module, Param};
pub use scalar::Scalar;
