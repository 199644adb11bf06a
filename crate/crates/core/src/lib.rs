//! Fisher-guided, layer-adaptive merging of a base and a fine-tuned
//! checkpoint, plus the numerical tooling used to check the merge-error theory
//! behind it on a small decoder model.
//!
//! The pipeline is:
//!
//! 1. [`fim::estimate_fim`] computes a diagonal Fisher estimate of the base
//!    model from uniform random token sequences.
//! 2. [`alpha::assign_alphas`] maps per-layer importance
//!    (Fisher x mean squared task vector) to per-layer coefficients.
//! 3. [`merge::merge`] trims the task vector by Fisher-weighted magnitude,
//!    applies the coefficients (with reduced gate-projection coefficients) and
//!    recalibrates output norms.
//!
//! [`theory`] checks the quadratic merge-error bound, the Fisher/Hessian
//! agreement near optima and the per-layer nonlinearity score.

pub mod alpha;
pub mod archive;
pub mod error;
pub mod fim;
pub mod io;
pub mod linalg;
pub mod merge;
pub mod model;
pub mod sweep;
pub mod theory;
pub mod topology;

pub use alpha::{assign_alphas, AlphaAssignment, ImportanceSignal, SignalKind};
pub use archive::{load_archive, write_archive, Tensor, TensorArchive};
pub use error::{Error, Result};
pub use fim::{estimate_fim, FimScores};
pub use merge::{merge, MergeMethod, MergePlan, MergeReport};
pub use model::{MicroModel, MicroModelConfig};
pub use topology::{parse_topology, Category, ModelTopology, NamingScheme};
