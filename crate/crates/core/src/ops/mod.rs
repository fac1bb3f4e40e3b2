//! Neural-network operations. Each module holds the forward/backward
//! kernels and the matching `Graph` method.

pub mod activation;
pub mod conv;
pub mod linear;
pub mod loss;
pub mod norm;
pub mod pool;

pub use conv::conv2d_forward;
pub use norm::{BnState, Mode};
