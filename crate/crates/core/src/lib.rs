//! Model-agnostic learning of semantic features for domain generalization.
//!
//! The crate is layered bottom-up:
//!
//! - [`autodiff`]: reverse-mode AD with differentiable gradients.
//! - [`nets`]: functional MLPs for the feature extractor, task net and
//!   metric-embedding net, applied with explicit parameter sets.
//! - [`losses`]: task cross-entropy, global class alignment over softened
//!   class-mean predictions, and contrastive / semi-hard triplet losses.
//! - [`episodic`]: the meta-train / meta-test training step and loop.
//! - [`bench`]: a synthetic multi-domain benchmark with controllable shift.
//! - [`harness`]: evaluation diagnostics and the ablation runner.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod bench;
pub mod episodic;
pub mod error;
pub mod harness;
pub mod losses;
pub mod nets;

pub use error::{Error, Result};
