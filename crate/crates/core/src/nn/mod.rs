//! Dense numerics with reverse-mode differentiation.

pub mod graph;
pub mod kernels;
pub mod layers;
pub mod ops;
pub mod params;
pub mod session;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use layers::{BatchNorm, Conv3d, Linear, Pointwise};
pub use ops::{AttentionSpec, PoolKind, Segments, SparseRows};
pub use params::{ParamBuilder, ParamId, ParamStore, Parameter};
pub use session::{Mode, Session};
pub use tensor::{Scalar, Tensor};
