//! Layers with hand-written backward passes, optimisers and gradient checks.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod gradcheck;
pub mod linear;
pub mod loss;
pub mod optim;

pub use activation::{grafted, grafted_backward, relu6, relu6_backward};
pub use batchnorm::{BatchNormState, BnCache, BnMode};
pub use conv::{conv2d, conv2d_backward, conv2d_reference, ConvGeometry, ConvWeights};
pub use gradcheck::grad_check;
pub use linear::{fully_connected, fully_connected_backward, Linear};
pub use loss::{global_avg_pool, kl_divergence, softmax_cross_entropy};
pub use optim::{Adam, Sgd};
