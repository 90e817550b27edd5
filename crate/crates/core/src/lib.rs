//! Sequential knowledge editing of a linear key→value memory.
//!
//! A [`MemoryModel`] holds one weight matrix `W` (values `= W · keys`) fitted
//! on a synthetic corpus. Edits are rank-one updates computed in closed form
//! (ROME, MEMIT) from a target value found by gradient descent. O-Edit adds
//! cosine penalties that steer each new update away from the subspace of
//! earlier updates and from the gradient subspace of held-out knowledge;
//! O-Edit+ instead projects the finished update off both subspaces.
//!
//! [`session::run_sequence`] drives a whole edit stream, [`metrics`] scores
//! the result, and [`harness`] runs seeded experiment grids from a config file.

pub mod baselines;
pub mod editors;
pub mod error;
pub mod harness;
pub mod memory;
pub mod metrics;
pub mod numerics;
pub mod records;
pub mod seeds;
pub mod session;
pub mod subspace;

pub use baselines::BaselineConfig;
pub use editors::{ClosedForm, DeltaForm, EditDelta, PreparedCovariance, SolverConfig, ValueSolution};
pub use error::{Error, Result};
pub use harness::{ExperimentConfig, ExperimentReport};
pub use memory::{CorpusConfig, Decoded, EditRequest, MemoryModel};
pub use metrics::{PairwiseOrthogonality, Scores};
pub use numerics::{CosineMode, OrthonormalBasis, TruncatedSvd};
pub use session::{run_sequence, EditStatus, EditTrace, MethodSpec, SequenceFailure, SequenceOutcome, Strategy};
pub use subspace::{SubspaceMemory, SubspaceSnapshot};
