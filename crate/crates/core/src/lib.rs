//! Merging of fine-tuned checkpoints that share a base model.
//!
//! - [`checkpoint`]: container reading and writing, schema checks.
//! - [`merge`]: task vectors, Task Arithmetic, TIES, Model Stock.
//! - [`subspace`]: SVD, TSV-Merge, Iso-C, spectrum boosting.
//! - [`experiment`]: subset sampling, evaluation ingestion, interference tables, norm curves.
//! - [`pipeline`]: streaming file-to-file merges with bounded memory.

pub mod checkpoint;
pub mod dtype;
pub mod error;
pub mod experiment;
pub mod merge;
pub mod pipeline;
pub mod subspace;

pub use checkpoint::{
    check_mergeable, load_tensor, open_checkpoint, write_checkpoint, Checkpoint, TensorRecord,
};
pub use dtype::Dtype;
pub use error::{Error, ErrorKind, Result};
pub use merge::{MergeMethod, MergeRecipe};
pub use pipeline::{run_merge, run_sweep, MergeJob, MergeSummary};
