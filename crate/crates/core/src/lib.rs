pub mod autograd;
pub mod coords;
pub mod crf;
pub mod error;
pub mod io;
pub mod kernel;
pub mod matrix;
pub mod net;
pub mod sparse_ops;

pub use coords::{Coordinate, CoordinateMap, SparseTensor, IGNORE_LABEL};
pub use error::{Error, Result};
pub use kernel::{KernelMap, KernelRegion, KernelShape};
pub use matrix::{Matrix, Scalar};
pub use sparse_ops::ConvWeights;
