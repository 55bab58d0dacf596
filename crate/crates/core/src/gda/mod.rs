//! Distribution alignment between per-group and batch-wide predictions.
//!
//! Predicted fake-probabilities of a batch are split into per-group real and
//! fake distributions ([`distribution`]). Each is compared to the batch-wide
//! distribution of the same class with an entropic optimal-transport cost
//! ([`sinkhorn`]); [`loss`] averages those costs into the fairness term and
//! combines it with the classification loss.

pub mod distribution;
pub mod kde;
pub mod loss;
pub mod sinkhorn;

pub use distribution::{group_predictions, Authenticity, Distribution, GroupCells, GroupDistribution, GroupedPredictions};
pub use kde::kde_density;
pub use loss::{fairness_loss, total_loss, write_trace, FairnessMode, FairnessPlan, LossBundle, TraceRow};
pub use sinkhorn::{sinkhorn_cost, SinkhornConfig, SinkhornResult};
