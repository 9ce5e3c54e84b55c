//! Expert-in-the-loop rule learning for model-informed precision dosing.
//!
//! The crate is organised bottom-up:
//!
//! * [`dataset`] ingests and synthesizes longitudinal visit data.
//! * [`lmm`] fits random-intercept linear mixed models.
//! * [`trees`] grows CART trees and bagged forests, and holds the split
//!   machinery shared with the model trees.
//! * [`glmmtree`] alternates model-based partitioning with random intercept
//!   estimation and bags the result over patients.
//! * [`rules`] turns trees into editable IF-THEN rules.
//! * [`agreement`] measures inter-rater reliability of expert advice.
//! * [`feedback`] runs the fit / advise / merge / refit cycle.

pub mod agreement;
pub mod dataset;
pub mod feedback;
pub mod glmmtree;
pub mod linalg;
pub mod lmm;
pub mod rules;
pub mod scenarios;
pub mod trees;

pub use agreement::{AgreementResult, RatingsMatrix};
pub use dataset::{Dataset, VisitRecord};
pub use feedback::{AdviceRecord, EvalMetrics, LoopState};
pub use glmmtree::{GlmmTreeFit, NodeModel};
pub use lmm::LmmFit;
pub use rules::{Rule, RuleSet};
pub use trees::RegressionTree;

/// Derives an independent sub-seed from a base seed and an index.
///
/// Used wherever members of an ensemble or bootstrap replicates need their
/// own stream: the result depends only on `(seed, index)`, never on the
/// order in which work is scheduled.
pub fn sub_seed(seed: u64, index: u64) -> u64 {
    splitmix(splitmix(seed) ^ index)
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
