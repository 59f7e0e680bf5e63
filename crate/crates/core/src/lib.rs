//! Imperceptible, physically-plausible adversarial perturbations of skeleton
//! action sequences, and a randomized-smoothing defense with certification.
//!
//! The attack keeps three families of constraints within tolerance: relative
//! bone-length changes, a differentiable bound on joint-angle changes, and
//! relative speed changes. The constrained problem is solved through its dual:
//! an Adam inner loop minimizes the augmented Lagrangian over the adversarial
//! sequence while single-step ascent updates the multipliers.
//!
//! The defense classifies the average logits over Gaussian-noised, temporally
//! filtered copies of the input, and certifies an l2 radius from simultaneous
//! multinomial confidence bounds on the vote counts.

pub mod adam;
pub mod attack;
pub mod cli;
pub mod constraints;
pub mod dataio;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod model;
pub mod render;
pub mod sequence;
pub mod smoothing;
pub mod stats;
pub mod topology;

pub use attack::{admm_attack, augmented_lagrangian, cw_attack, AttackConfig, AttackResult};
pub use constraints::{ConstraintConfig, DualState, ViolationVectors};
pub use error::{Error, Result};
pub use model::{Classifier, LossSpec, ReferenceClassifier};
pub use sequence::SkeletonSequence;
pub use smoothing::{certify, gaussian_temporal_filter, smoothed_predict, SmoothingConfig};
pub use topology::SkeletonTopology;
