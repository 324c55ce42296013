//! Evaluation protocol: which subsets to merge, how merged models compare
//! with their references, and how far merges move from the base.

pub mod norms;
pub mod prng;
pub mod report;
pub mod results;
pub mod sampling;

pub use norms::{delta_norm, norm_curve, summarize, NormStats};
pub use prng::SplitMix64;
pub use report::{
    discover_methods, interference_report, interference_table, merged_model_id, InterferenceReport,
    InterferenceRow, Reference,
};
pub use results::{mean_accuracy, EvalRecord, EvalResults};
pub use sampling::{binomial, sample_subsets, SamplingPlan};
