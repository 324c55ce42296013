//! TIES merging: trim each delta to its largest entries, elect a sign per
//! parameter, and average only the entries that agree with it.

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::merge::recipe::{MergeMethod, MergeRecipe, TiesNormalization};
use crate::merge::task_vector::TaskVector;

/// Number of entries kept out of `len` at `density`: `⌈density·len⌉`, at least one.
///
/// Products that land within rounding noise of an integer are snapped to it, so
/// `0.1 × 30` keeps 3 rather than 4.
pub fn trim_count(len: usize, density: f64) -> usize {
    if len == 0 {
        return 0;
    }
    let x = density * len as f64;
    let nearest = x.round();
    let count = if (x - nearest).abs() <= 1e-9 * x.max(1.0) {
        nearest
    } else {
        x.ceil()
    };
    (count as usize).clamp(1, len)
}

/// Zeroes all but the `trim_count(len, density)` largest-magnitude entries.
/// Among entries tied at the cutoff magnitude, lower indices are kept first.
pub fn trim_in_place(values: &mut [f32], density: f64) {
    let keep = trim_count(values.len(), density);
    if keep >= values.len() {
        return;
    }
    let (threshold, mut at_threshold) = magnitude_cutoff(values, keep);
    for v in values.iter_mut() {
        let bits = v.abs().to_bits();
        if bits > threshold {
            continue;
        }
        if bits == threshold && at_threshold > 0 {
            at_threshold -= 1;
            continue;
        }
        *v = 0.0;
    }
}

/// Finds the magnitude of the `keep`-th largest entry (as f32 bits, which order
/// like the magnitudes themselves for non-negative floats) and how many entries
/// of exactly that magnitude belong to the kept set.
///
/// Two counting passes over 16-bit digits; no per-element scratch memory.
fn magnitude_cutoff(values: &[f32], keep: usize) -> (u32, usize) {
    debug_assert!(keep >= 1 && keep <= values.len());
    let mut hist = vec![0usize; 1 << 16];
    for v in values {
        hist[(v.abs().to_bits() >> 16) as usize] += 1;
    }
    let (high, above_high) = descend(&hist, keep);

    hist.iter_mut().for_each(|c| *c = 0);
    for v in values {
        let bits = v.abs().to_bits();
        if bits >> 16 == high {
            hist[(bits & 0xFFFF) as usize] += 1;
        }
    }
    let (low, above_low) = descend(&hist, keep - above_high);

    let greater = above_high + above_low;
    ((high << 16) | low, keep - greater)
}

/// Walks `hist` from the top bucket down; returns the bucket holding the
/// `rank`-th largest element and the count strictly above it.
fn descend(hist: &[usize], rank: usize) -> (u32, usize) {
    let mut above = 0usize;
    for bucket in (0..hist.len()).rev() {
        if above + hist[bucket] >= rank {
            return (bucket as u32, above);
        }
        above += hist[bucket];
    }
    unreachable!("rank exceeds element count")
}

#[inline]
fn sign(x: f32) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Sign of `Σᵢ trimmedᵢ[j]` (summed in input order): +1, −1, or 0.
#[inline]
pub fn elected_sign(trimmed: &[&[f32]], j: usize) -> i8 {
    sign(trimmed.iter().fold(0.0f32, |acc, d| acc + d[j]))
}

/// Merged TIES delta for parameter `j` of already trimmed deltas.
#[inline]
pub(crate) fn ties_delta_at(
    trimmed: &[&[f32]],
    alphas: &[f32],
    normalization: TiesNormalization,
    j: usize,
) -> f32 {
    let elected = elected_sign(trimmed, j);
    if elected == 0 {
        return 0.0;
    }
    let mut acc = 0.0f32;
    let mut agreeing = 0usize;
    for (d, &a) in trimmed.iter().zip(alphas) {
        if sign(d[j]) == elected {
            acc += a * d[j];
            agreeing += 1;
        }
    }
    match normalization {
        TiesNormalization::ModelCount => acc / trimmed.len() as f32,
        TiesNormalization::AgreeingCount if agreeing == 0 => 0.0,
        TiesNormalization::AgreeingCount => acc / agreeing as f32,
    }
}

/// The merged TIES delta of one tensor, before λ scaling.
pub fn ties_delta(
    trimmed: &[&[f32]],
    alphas: &[f32],
    normalization: TiesNormalization,
) -> Vec<f32> {
    let len = trimmed.first().map_or(0, |d| d.len());
    (0..len)
        .map(|j| ties_delta_at(trimmed, alphas, normalization, j))
        .collect()
}

/// Sign election and disjoint merge for one tensor, in place on `base`.
pub fn ties_tensor(
    base: &mut [f32],
    trimmed: &[&[f32]],
    alphas: &[f32],
    lambda: f32,
    normalization: TiesNormalization,
) {
    super::arithmetic::apply_update(base, lambda, |j| {
        ties_delta_at(trimmed, alphas, normalization, j)
    });
}

/// Keeps the top `trim_density` fraction of each tensor of `delta` by magnitude.
pub fn ties_trim(delta: &TaskVector, trim_density: f64) -> Result<TaskVector> {
    if !(trim_density > 0.0 && trim_density <= 1.0) {
        return Err(Error::invalid(format!(
            "trim density {trim_density} outside (0, 1]"
        )));
    }
    Ok(delta.map_values(|_, values| trim_in_place(values, trim_density)))
}

/// Trim, elect signs, and merge: `W₀ + λ·(1/n)·Σ αᵢ·maskedᵢ`. With
/// `recipe.boost` set, the merged delta of each matrix is spectrum-boosted
/// before scaling.
pub fn ties_merge(
    base: &Checkpoint,
    deltas: &[TaskVector],
    recipe: &MergeRecipe,
) -> Result<Checkpoint> {
    super::merge_from_deltas(base, deltas, recipe, MergeMethod::Ties)
}
