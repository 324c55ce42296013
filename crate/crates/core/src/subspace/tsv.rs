//! TSV-Merge: truncate each task's SVD, concatenate the kept factors, and
//! replace the concatenations by their nearest orthogonal factors.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::merge::arithmetic::{apply_update, task_arithmetic_tensor};
use crate::merge::recipe::{MergeMethod, MergeRecipe};
use crate::merge::task_vector::{is_matrix, TaskVector};
use crate::subspace::svd::{matrix_from_row_major, matrix_to_row_major, svd, SpectralFactors};

/// Singular triplets kept per task: `⌈rank / tasks⌉`, at least one.
pub fn keep_count(rank: usize, tasks: usize) -> usize {
    rank.div_ceil(tasks.max(1)).max(1)
}

/// Closest matrix with orthonormal columns (or rows, when wider than tall)
/// in Frobenius norm: `P·Qᵀ` from `M = P·D·Qᵀ`.
pub fn nearest_orthogonal(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let SpectralFactors { u, v, .. } = svd(m)?;
    Ok(u * v.transpose())
}

/// Aligned factors of a TSV merge; the merged delta is `U_⊥·diag(σ)·V_⊥ᵀ`.
#[derive(Debug, Clone)]
pub struct TsvFactors {
    /// m × c where c = tasks × kept.
    pub u_perp: DMatrix<f64>,
    /// Kept singular values, task by task in input order.
    pub sigmas: Vec<f64>,
    /// n × c.
    pub v_perp: DMatrix<f64>,
}

impl TsvFactors {
    pub fn delta(&self) -> DMatrix<f64> {
        let mut scaled = self.u_perp.clone();
        for (k, &s) in self.sigmas.iter().enumerate() {
            scaled.column_mut(k).scale_mut(s);
        }
        scaled * self.v_perp.transpose()
    }
}

pub fn tsv_factors(deltas: &[DMatrix<f64>]) -> Result<TsvFactors> {
    let Some(first) = deltas.first() else {
        return Err(Error::invalid("tsv needs at least one task"));
    };
    let (rows, cols) = first.shape();
    if deltas.iter().any(|d| d.shape() != (rows, cols)) {
        return Err(Error::invalid("tsv task matrices differ in shape"));
    }
    let keep = keep_count(rows.min(cols), deltas.len());
    let factors = deltas.par_iter().map(svd).collect::<Result<Vec<_>>>()?;

    let width = keep * deltas.len();
    let mut u_cat = DMatrix::zeros(rows, width);
    let mut v_cat = DMatrix::zeros(cols, width);
    let mut sigmas = Vec::with_capacity(width);
    for (t, f) in factors.iter().enumerate() {
        for k in 0..keep {
            u_cat.set_column(t * keep + k, &f.u.column(k));
            v_cat.set_column(t * keep + k, &f.v.column(k));
            sigmas.push(f.sigmas[k]);
        }
    }
    Ok(TsvFactors {
        u_perp: nearest_orthogonal(&u_cat)?,
        sigmas,
        v_perp: nearest_orthogonal(&v_cat)?,
    })
}

/// TSV-Merge for one tensor, in place. Each task vector is scaled by its
/// alpha before decomposition. Tensors that are not matrices take the plain
/// task-arithmetic update.
pub fn tsv_tensor(
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
    let mats: Vec<DMatrix<f64>> = deltas
        .iter()
        .zip(alphas)
        .map(|(d, &a)| matrix_from_row_major(shape[0], shape[1], d) * a as f64)
        .collect();
    let merged = matrix_to_row_major(&tsv_factors(&mats)?.delta());
    drop(mats);
    apply_update(base, lambda, |j| merged[j]);
    Ok(())
}

pub fn tsv_merge(
    base: &Checkpoint,
    deltas: &[TaskVector],
    recipe: &MergeRecipe,
) -> Result<Checkpoint> {
    crate::merge::merge_from_deltas(base, deltas, recipe, MergeMethod::TsvMerge)
}
