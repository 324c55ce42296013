//! SVD-based merges: TSV-Merge, Iso-C, and spectrum boosting, plus the
//! decomposition they share.
//!
//! Only two-dimensional tensors are decomposed. Vectors and scalars take the
//! underlying elementwise update.

pub mod boost;
pub mod iso;
pub mod svd;
pub mod tsv;

pub use boost::{boost_values, clamp_plan, subspace_boost, SpectrumClampPlan};
pub use iso::{iso_c_merge, iso_c_tensor};
pub use svd::{svd, SpectralFactors};
pub use tsv::{tsv_factors, tsv_merge, tsv_tensor, TsvFactors};
