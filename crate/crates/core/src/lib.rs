//! Fair binary forgery detection on a controllable synthetic benchmark.
//!
//! Two mechanisms act on a small convolutional detector:
//!
//! - **Channel decoupling** ([`sfd`]): every last-layer convolution channel
//!   is scored with a soft-nearest-neighbour loss over sensitive-group labels;
//!   the channels that separate groups most cleanly are zero-masked.
//! - **Distribution alignment** ([`gda`]): each group's predicted
//!   fake-probability distribution is pulled toward the batch-wide
//!   distribution with an entropic optimal-transport cost solved by
//!   Sinkhorn-Knopp iterations.
//!
//! Supporting modules provide a reverse-mode differentiation tape
//! ([`graph`]), the detector ([`detector`]), group fairness metrics
//! ([`metrics`]), a bias-controlled image generator ([`synth`]) and the
//! training/evaluation harness ([`harness`]).
//!
//! The `examples/` directory of this crate holds one runnable program per
//! capability; `cargo run --release --example <name>`.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod detector;
pub mod error;
pub mod gda;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod sfd;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
