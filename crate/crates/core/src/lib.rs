//! Building blocks for studying what knowledge distillation transfers:
//! a small reverse-mode autodiff engine, the MNIST reference CNN, the KL /
//! Hint / CRD distillation losses with their training loop, synthetic domain
//! generators and augmentations, and the measurement probes (adversarial
//! transfer, invariance agreement, consensus, Grad-CAM preference, CKA,
//! shape bias, per-group accuracy).

// `!(x > 0.0)` style checks are deliberate: NaN must fail them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alloc;
pub mod data;
pub mod distill;
pub mod error;
pub mod rng;
pub mod nn;
pub mod probes;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
