//! Decomposition of group-level treatment-effect contrasts into effect
//! heterogeneity and targeting components, with debiased cross-fitted
//! estimation, influence-function inference, strong-null tests, exact
//! population values on discrete designs and a Monte Carlo harness.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod decomp;
pub mod error;
pub mod hypothesis;
pub mod model;
pub mod moments;
pub mod nuisance;
pub mod oracle;
pub mod simulate;

pub use decomp::{decompose, identity_check, Component, DecompositionQuery, DecompositionReport, ParameterId};
pub use error::{Error, Result};
pub use model::{AggregationScheme, Arm, Dataset, Design, GroupRule, PartitionScheme};
pub use moments::Context;
pub use nuisance::{LearnerKind, LearnerSpec, NuisanceEstimates};
