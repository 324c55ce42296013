use nalgebra::DMatrix;

use crate::checkpoint::Checkpoint;
use crate::error::Result;
use crate::merge::arithmetic::{apply_update, combine, task_arithmetic_tensor};
use crate::merge::recipe::{MergeMethod, MergeRecipe};
use crate::merge::task_vector::{is_matrix, TaskVector};
use crate::subspace::svd::{matrix_from_row_major, matrix_to_row_major, SpectralFactors};

/// Mean of the full thin spectrum, zeros included.
pub fn mean_singular_value(factors: &SpectralFactors) -> f64 {
    factors.sigmas.iter().sum::<f64>() / factors.rank() as f64
}

/// `U·(σ̄·I)·Vᵀ`.
pub fn isotropic(factors: &SpectralFactors) -> DMatrix<f64> {
    let mean = mean_singular_value(factors);
    factors.reconstruct_with(&vec![mean; factors.rank()])
}

/// Iso-C for one tensor, in place: the combined task vector of a matrix is
/// rebuilt with a flat spectrum; other tensors take the plain task-arithmetic
/// update.
pub fn iso_c_tensor(
    shape: &[usize],
    base: &mut [f32],
    deltas: &[&[f32]],
    alphas: &[f32],
    lambda: f32,
) -> Result<()> {
    if !is_matrix(shape) {
        task_arithmetic_tensor(base, deltas, alphas, lambda);
        return Ok(());
    }
    let combined = combine(deltas, alphas);
    let factors = super::svd(&matrix_from_row_major(shape[0], shape[1], &combined))?;
    drop(combined);
    let flat = matrix_to_row_major(&isotropic(&factors));
    apply_update(base, lambda, |j| flat[j]);
    Ok(())
}

pub fn iso_c_merge(
    base: &Checkpoint,
    deltas: &[TaskVector],
    recipe: &MergeRecipe,
) -> Result<Checkpoint> {
    crate::merge::merge_from_deltas(base, deltas, recipe, MergeMethod::IsoC)
}
