pub mod block;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod elastic;
pub mod error;
pub mod latency;
pub mod network;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod sampler;
pub mod search;
pub mod space;
pub mod tensor;
pub mod training;
pub mod transform;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
