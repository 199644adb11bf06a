//! Numerical checks of the merge-error theory on small models.

pub mod bound;
pub mod fisher;
pub mod nl;
pub mod objective;
pub mod stats;

pub use bound::{
    check_bound, hessian_bound, merging_error, quadratic_coefficient_check, verify_bound, BoundCheckResult,
    VerifyOptions,
};
pub use fisher::{fisher_hessian_check, FisherHessianReport};
pub use nl::{analyze_nl, nl_score, NlAnalysis, NlRecord};
pub use objective::{ScalarObjective, VectorObjective};
