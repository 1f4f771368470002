//! Dense tensor arithmetic with reverse-mode differentiation.

pub mod gradcheck;
pub mod rng;
pub mod tensor;

pub use gradcheck::gradcheck;
pub use rng::{stream_id, RngStream};
pub use tensor::{DiffTensor, MASKED};
