//! Task vectors and weight-space merging.
//!
//! Every method is a pure per-tensor transform. [`merge_tensor`] is the single
//! entry point used both by the in-memory merges here and by the streaming
//! [`crate::pipeline`], so the two produce identical values.

pub mod arithmetic;
pub mod model_stock;
pub mod recipe;
pub mod task_vector;
pub mod ties;

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::checkpoint::{check_mergeable, Checkpoint};
use crate::error::{Error, Result};
use crate::subspace;

pub use arithmetic::merge_task_arithmetic;
pub use model_stock::{model_stock_merge, AngleStats};
pub use recipe::{MergeMethod, MergeRecipe, TiesNormalization};
pub use task_vector::{task_vector, DeltaTensor, TaskVector};
pub use ties::{ties_merge, ties_trim};

pub(crate) fn ensure_finite(name: &str, values: &[f32]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            name: name.to_string(),
            index,
        }),
        None => Ok(()),
    }
}

/// Merges one tensor in place on `base`.
///
/// `variants` holds the fine-tuned values of this tensor and is consumed;
/// task vectors are formed inside it so that at most `variants.len() + 1`
/// tensors are resident for the elementwise methods. Returns the angle
/// statistics for Model Stock.
pub fn merge_tensor(
    name: &str,
    shape: &[usize],
    base: &mut [f32],
    mut variants: Vec<Vec<f32>>,
    recipe: &MergeRecipe,
) -> Result<Option<AngleStats>> {
    if recipe.method == MergeMethod::ModelStock {
        let refs: Vec<&[f32]> = variants.iter().map(Vec::as_slice).collect();
        let stats = model_stock::model_stock_tensor(name, base, &refs)?;
        ensure_finite(name, base)?;
        return Ok(Some(stats));
    }
    for v in &mut variants {
        task_vector::subtract_in_place(v, base);
    }
    merge_deltas_tensor(recipe.method, name, shape, base, &mut variants, recipe)?;
    Ok(None)
}

/// Applies a delta-based method to one tensor. TIES trims `deltas` in place.
pub(crate) fn merge_deltas_tensor(
    method: MergeMethod,
    name: &str,
    shape: &[usize],
    base: &mut [f32],
    deltas: &mut [Vec<f32>],
    recipe: &MergeRecipe,
) -> Result<()> {
    let alphas = recipe.alphas_for(deltas.len());
    let lambda = recipe.lambda;
    match method {
        MergeMethod::TaskArithmetic => {
            let refs: Vec<&[f32]> = deltas.iter().map(Vec::as_slice).collect();
            match recipe.boost {
                None => arithmetic::task_arithmetic_tensor(base, &refs, &alphas, lambda),
                Some(beta) => {
                    let combined = arithmetic::combine(&refs, &alphas);
                    let boosted = subspace::boost_values(shape, combined, beta)?;
                    arithmetic::apply_update(base, lambda, |j| boosted[j]);
                }
            }
        }
        MergeMethod::Ties => {
            for d in deltas.iter_mut() {
                ties::trim_in_place(d, recipe.trim_density);
            }
            let refs: Vec<&[f32]> = deltas.iter().map(Vec::as_slice).collect();
            let normalization = recipe.ties_normalization;
            match recipe.boost {
                None => ties::ties_tensor(base, &refs, &alphas, lambda, normalization),
                Some(beta) => {
                    let merged = ties::ties_delta(&refs, &alphas, normalization);
                    let boosted = subspace::boost_values(shape, merged, beta)?;
                    arithmetic::apply_update(base, lambda, |j| boosted[j]);
                }
            }
        }
        MergeMethod::IsoC => {
            let refs: Vec<&[f32]> = deltas.iter().map(Vec::as_slice).collect();
            subspace::iso_c_tensor(shape, base, &refs, &alphas, lambda)?;
        }
        MergeMethod::TsvMerge => {
            let refs: Vec<&[f32]> = deltas.iter().map(Vec::as_slice).collect();
            subspace::tsv_tensor(shape, base, &refs, &alphas, lambda)?;
        }
        MergeMethod::ModelStock => {
            return Err(Error::invalid(
                "model-stock operates on variants, not task vectors",
            ));
        }
    }
    ensure_finite(name, base)
}

/// Shared driver for the task-vector based merges: validates, then merges
/// each tensor of `base` with `method`, whatever `recipe.method` says.
pub(crate) fn merge_from_deltas(
    base: &Checkpoint,
    deltas: &[TaskVector],
    recipe: &MergeRecipe,
    method: MergeMethod,
) -> Result<Checkpoint> {
    let recipe = MergeRecipe {
        method,
        ..recipe.clone()
    };
    recipe.validate(deltas.len())?;
    task_vector::check_deltas(base, deltas)?;

    let names: Vec<&str> = base.names().collect();
    let records = names
        .into_par_iter()
        .map(|name| {
            let mut rec = base.load(name)?;
            let mut ds: Vec<Vec<f32>> = deltas
                .iter()
                .map(|d| d.entries[name].values.clone())
                .collect();
            merge_deltas_tensor(method, name, &rec.shape, &mut rec.values, &mut ds, &recipe)?;
            Ok((name.to_string(), rec))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(Checkpoint::from_records(records))
}

/// Result of an in-memory merge.
#[derive(Debug, Clone)]
pub struct MergeOutcome {
    pub merged: Checkpoint,
    /// Per-tensor statistics; empty unless the method is Model Stock.
    pub angle_stats: Vec<AngleStats>,
}

/// Merges fine-tuned `variants` of `base` with any method, entirely in memory.
/// Output tensors keep the base's stored dtype.
pub fn merge_checkpoints(
    base: &Checkpoint,
    variants: &[Checkpoint],
    recipe: &MergeRecipe,
) -> Result<MergeOutcome> {
    recipe.validate(variants.len())?;
    let mut all = vec![base];
    all.extend(variants);
    let names: Vec<String> = check_mergeable(&all)?.into_iter().collect();

    let merged = names
        .into_par_iter()
        .map(|name| {
            let mut rec = base.load(&name)?;
            let loaded = variants
                .iter()
                .map(|v| Ok(v.load(&name)?.values))
                .collect::<Result<Vec<_>>>()?;
            let stats = merge_tensor(&name, &rec.shape, &mut rec.values, loaded, recipe)?;
            Ok((name, rec, stats))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut records = BTreeMap::new();
    let mut angle_stats = Vec::new();
    for (name, rec, stats) in merged {
        records.insert(name, rec);
        angle_stats.extend(stats);
    }
    Ok(MergeOutcome {
        merged: Checkpoint::from_records(records),
        angle_stats,
    })
}
