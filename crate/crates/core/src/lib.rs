pub mod error;
pub mod fft;
pub mod graph;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, PoolKind, Var};
pub use tensor::Tensor;
pub mod gabor;
pub mod network;
pub mod units;
pub mod prior;
pub mod synthesis;
pub mod metrics;
pub mod phase;
