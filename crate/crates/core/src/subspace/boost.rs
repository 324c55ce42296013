//! Subspace boosting: singular values past a cumulative-energy cutoff are
//! raised to the value at the cutoff.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::merge::task_vector::{is_matrix, DeltaTensor};
use crate::subspace::svd::{matrix_from_row_major, matrix_to_row_major, svd};

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumClampPlan {
    /// `n_j = Σ_{i≤j} σᵢ / Σ σᵢ`; all zero when the spectrum carries no energy.
    pub cumulative_energy: Vec<f64>,
    /// 1-based `j* = min{ j : n_j ≥ β }`.
    pub cutoff: usize,
    /// `σ*_j = σ_j` for `j ≤ j*`, `σ_{j*}` beyond.
    pub clamped: Vec<f64>,
}

/// Builds the clamp plan of a descending spectrum at threshold `beta`.
pub fn clamp_plan(sigmas: &[f64], beta: f64) -> SpectrumClampPlan {
    let total: f64 = sigmas.iter().sum();
    let mut running = 0.0;
    let mut cumulative_energy: Vec<f64> = sigmas
        .iter()
        .map(|s| {
            running += s;
            if total > 0.0 {
                running / total
            } else {
                0.0
            }
        })
        .collect();
    if total > 0.0 {
        if let Some(last) = cumulative_energy.last_mut() {
            *last = 1.0;
        }
    }
    let cutoff = cumulative_energy
        .iter()
        .position(|&e| e >= beta)
        .map_or(sigmas.len(), |i| i + 1);
    let floor = sigmas.get(cutoff.wrapping_sub(1)).copied().unwrap_or(0.0);
    let clamped = sigmas
        .iter()
        .enumerate()
        .map(|(i, &s)| if i < cutoff { s } else { floor })
        .collect();
    SpectrumClampPlan {
        cumulative_energy,
        cutoff,
        clamped,
    }
}

/// Boosts one row-major delta of the given shape. Anything that is not a
/// matrix, and matrices with no energy, come back unchanged.
pub fn boost_values(shape: &[usize], values: Vec<f32>, beta: f64) -> Result<Vec<f32>> {
    if !is_matrix(shape) || values.iter().all(|v| *v == 0.0) {
        return Ok(values);
    }
    let factors = svd(&matrix_from_row_major(shape[0], shape[1], &values))?;
    drop(values);
    let plan = clamp_plan(&factors.sigmas, beta);
    Ok(matrix_to_row_major(
        &factors.reconstruct_with(&plan.clamped),
    ))
}

/// Boosts every two-dimensional delta in `entries`; other tensors pass through.
pub fn subspace_boost(
    entries: &BTreeMap<String, DeltaTensor>,
    beta: f64,
) -> Result<BTreeMap<String, DeltaTensor>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!(
            "boost threshold {beta} outside [0, 1]"
        )));
    }
    entries
        .par_iter()
        .map(|(name, d)| {
            let values = boost_values(&d.shape, d.values.clone(), beta)?;
            Ok((
                name.clone(),
                DeltaTensor {
                    shape: d.shape.clone(),
                    values,
                },
            ))
        })
        .collect()
}
