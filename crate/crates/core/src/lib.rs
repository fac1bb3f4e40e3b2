pub mod arch;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod graph;
pub mod ops;
pub mod params;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::ParamStore;
pub use tensor::Tensor;
