use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{check_mergeable, Checkpoint};
use crate::error::{Error, Result};

pub fn sum_squared_difference(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Global L2 distance `‖θ_merged − θ_base‖₂` over every parameter, one
/// tensor at a time.
pub fn delta_norm(merged: &Checkpoint, base: &Checkpoint) -> Result<f64> {
    let names = check_mergeable(&[base, merged])?;
    let mut total = 0.0f64;
    for name in &names {
        let m = merged.load(name)?;
        let b = base.load(name)?;
        total += sum_squared_difference(&m.values, &b.values);
    }
    Ok(total.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub method: String,
    pub size: usize,
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

pub fn mean_and_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Mean and spread of norms grouped by (method, merge size).
pub fn summarize(groups: &BTreeMap<(String, usize), Vec<f64>>) -> Result<Vec<NormStats>> {
    groups
        .iter()
        .map(|((method, size), norms)| {
            let (mean, std) = mean_and_std(norms).ok_or_else(|| {
                Error::invalid(format!("no norms for method {method} at size {size}"))
            })?;
            Ok(NormStats {
                method: method.clone(),
                size: *size,
                count: norms.len(),
                mean,
                std,
            })
        })
        .collect()
}

/// Distance from the base for every merged model, summarized per
/// (method, subset size). An empty subset stands for the base itself.
pub fn norm_curve(
    base: &Checkpoint,
    merged: &BTreeMap<(String, Vec<String>), Checkpoint>,
) -> Result<Vec<NormStats>> {
    let mut groups: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for ((method, subset), model) in merged {
        let norm = delta_norm(model, base)?;
        groups
            .entry((method.clone(), subset.len()))
            .or_default()
            .push(norm);
    }
    summarize(&groups)
}

pub fn norm_stats_csv(stats: &[NormStats]) -> String {
    let mut out = String::from("method,size,count,mean,std\n");
    for s in stats {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.method, s.size, s.count, s.mean, s.std
        ));
    }
    out
}
