//! Local Lipschitz robustness measurement for feed-forward classifiers:
//! Monte Carlo robustness estimates, a per-layer compositional checker,
//! a graph-Laplacian smoothness regularizer and dataset feasibility bounds.

// NaN must fail validation, hence `!(x > 0.0)` style checks.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::large_enum_variant
)]

pub mod autodiff;
pub mod datascope;
mod error;
pub mod graphreg;
pub mod harness;
pub mod netfun;
mod norm;
pub mod rng;
pub mod robustometry;
pub mod tensor;

pub use datascope::{BlobSpec, LabeledDataset, NormScaling};
pub use error::{Error, Result};
pub use netfun::{ActivationTrace, Network, TrainConfig};
pub use norm::Norm;
pub use tensor::Tensor;
