//! Model Stock: interpolate between the base and the variant average by a
//! factor derived from the mean pairwise angle of the task vectors.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{check_mergeable, Checkpoint, TensorRecord};
use crate::error::{Error, Result};

/// Denominators `1 + (N−1)·cosθ` at or below this are rejected.
pub const MIN_DENOMINATOR: f64 = 1e-12;

/// Angle statistics of one tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleStats {
    pub tensor: String,
    pub cos_theta: f64,
    pub t: f64,
    pub variant_count: usize,
}

/// `t = N·cosθ / (1 + (N−1)·cosθ)`, or `None` when the denominator is degenerate.
pub fn interpolation_factor(cos_theta: f64, n: usize) -> Option<f64> {
    let n = n as f64;
    let denominator = 1.0 + (n - 1.0) * cos_theta;
    (denominator > MIN_DENOMINATOR).then(|| n * cos_theta / denominator)
}

/// Mean cosine similarity over all unordered pairs of task vectors
/// `variantᵢ − base`. Pairs involving a zero-norm task vector count as 0.
pub fn mean_pairwise_cosine(base: &[f32], variants: &[&[f32]]) -> f64 {
    let n = variants.len();
    if n < 2 {
        return 0.0;
    }
    // Upper triangle (with diagonal) of the Gram matrix of the task vectors.
    let mut gram = vec![0.0f64; n * n];
    let mut delta = vec![0.0f64; n];
    for (j, &b) in base.iter().enumerate() {
        for (d, v) in delta.iter_mut().zip(variants) {
            *d = v[j] as f64 - b as f64;
        }
        for a in 0..n {
            for c in a..n {
                gram[a * n + c] += delta[a] * delta[c];
            }
        }
    }
    let mut sum = 0.0;
    for a in 0..n {
        for c in a + 1..n {
            let norms = (gram[a * n + a] * gram[c * n + c]).sqrt();
            if norms > 0.0 {
                sum += (gram[a * n + c] / norms).clamp(-1.0, 1.0);
            }
        }
    }
    sum / (n * (n - 1) / 2) as f64
}

/// Model Stock for one tensor, in place on `base`: `t·W_avg + (1−t)·W₀`.
pub fn model_stock_tensor(name: &str, base: &mut [f32], variants: &[&[f32]]) -> Result<AngleStats> {
    let n = variants.len();
    if n < 2 {
        return Err(Error::invalid("model-stock needs at least two variants"));
    }
    let cos_theta = mean_pairwise_cosine(base, variants);
    let t = interpolation_factor(cos_theta, n).ok_or_else(|| Error::DegenerateInterpolation {
        name: name.to_string(),
        denominator: 1.0 + (n as f64 - 1.0) * cos_theta,
    })?;
    for (j, b) in base.iter_mut().enumerate() {
        let avg = variants.iter().map(|v| v[j] as f64).sum::<f64>() / n as f64;
        *b = (t * avg + (1.0 - t) * *b as f64) as f32;
    }
    Ok(AngleStats {
        tensor: name.to_string(),
        cos_theta,
        t,
        variant_count: n,
    })
}

/// Merges `variants` onto `base` tensor by tensor, returning the merged
/// checkpoint and the angle statistics of every tensor (in name order).
pub fn model_stock_merge(
    base: &Checkpoint,
    variants: &[Checkpoint],
) -> Result<(Checkpoint, Vec<AngleStats>)> {
    if variants.len() < 2 {
        return Err(Error::invalid("model-stock needs at least two variants"));
    }
    let mut all = vec![base];
    all.extend(variants);
    let names: Vec<String> = check_mergeable(&all)?.into_iter().collect();

    let merged: Vec<(String, TensorRecord, AngleStats)> = names
        .into_par_iter()
        .map(|name| {
            let mut rec = base.load(&name)?;
            let loaded = variants
                .iter()
                .map(|v| Ok(v.load(&name)?.values))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&[f32]> = loaded.iter().map(Vec::as_slice).collect();
            let stats = model_stock_tensor(&name, &mut rec.values, &refs)?;
            super::ensure_finite(&name, &rec.values)?;
            Ok((name, rec, stats))
        })
        .collect::<Result<_>>()?;

    let mut records = BTreeMap::new();
    let mut stats = Vec::with_capacity(merged.len());
    for (name, rec, s) in merged {
        records.insert(name, rec);
        stats.push(s);
    }
    Ok((Checkpoint::from_records(records), stats))
}
