use crate::checkpoint::Checkpoint;
use crate::error::Result;
use crate::merge::recipe::{MergeMethod, MergeRecipe};
use crate::merge::task_vector::TaskVector;

/// `Σ αᵢ·Δᵢ[j]`, accumulated in input order.
#[inline]
pub(crate) fn combined_at(deltas: &[&[f32]], alphas: &[f32], j: usize) -> f32 {
    deltas
        .iter()
        .zip(alphas)
        .fold(0.0f32, |acc, (d, &a)| acc + a * d[j])
}

/// The combined task vector `Σ αᵢ·Δᵢ` for one tensor.
pub fn combine(deltas: &[&[f32]], alphas: &[f32]) -> Vec<f32> {
    let len = deltas.first().map_or(0, |d| d.len());
    (0..len).map(|j| combined_at(deltas, alphas, j)).collect()
}

/// Overwrites `base` with `base + λ·update(j)`.
pub(crate) fn apply_update(base: &mut [f32], lambda: f32, update: impl Fn(usize) -> f32) {
    for (j, b) in base.iter_mut().enumerate() {
        *b += lambda * update(j);
    }
}

/// Task arithmetic for one tensor, in place: `W₀ + λ·Σ αᵢ·Δᵢ`.
pub fn task_arithmetic_tensor(base: &mut [f32], deltas: &[&[f32]], alphas: &[f32], lambda: f32) {
    apply_update(base, lambda, |j| combined_at(deltas, alphas, j));
}

/// `W₀ + λ·Σ αᵢ·ΔWᵢ` over every tensor. With `recipe.boost` set, the combined
/// delta of each matrix is spectrum-boosted before scaling.
pub fn merge_task_arithmetic(
    base: &Checkpoint,
    deltas: &[TaskVector],
    recipe: &MergeRecipe,
) -> Result<Checkpoint> {
    super::merge_from_deltas(base, deltas, recipe, MergeMethod::TaskArithmetic)
}
