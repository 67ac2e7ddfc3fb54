//! Numerical laboratory for the Parallax attention mechanism: dense
//! reference implementations of the surrounding attention family, the tiled
//! streaming forward/backward with I/O accounting, Muon/AdamW training on
//! synthetic recall tasks, and activation/weight diagnostics.

pub mod attention;
pub mod backward;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod stream;
pub mod tasks;
pub mod tensor;
pub mod testutil;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Dtype, Scalar, Tensor};
