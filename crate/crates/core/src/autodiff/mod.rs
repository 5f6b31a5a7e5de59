//! Minimal reverse-mode differentiation engine.
//!
//! Provides exactly the primitives the 3D U-Net needs: conv3d and its
//! transpose, max pooling, batch normalization, ReLU, channel concat,
//! channel softmax, the weighted voxel-wise cross-entropy loss, and a few
//! elementwise helpers. Parameters and activations are 32-bit; loss and
//! statistics reductions accumulate in 64-bit.
//!
//! Forward and backward for one graph are single-threaded and
//! deterministic; for fixed inputs the gradients are reproducible
//! bit-exactly.

mod conv;
mod gradcheck;
mod graph;
mod layers;
mod optim;
mod tensor;

pub use gradcheck::{check_coords, relative_error, FdSummary};
pub use graph::{Graph, Var};
pub use layers::{BnMode, BnStats, BN_EPS, BN_MOMENTUM, LOG_PROB_FLOOR};
pub use optim::{Method, Optimizer};
pub use tensor::Tensor;
