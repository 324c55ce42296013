use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::results::{mean_accuracy, missing_entries, EvalResults};
use crate::experiment::sampling::SamplingPlan;

/// What a merged model is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reference {
    /// The base model's mean accuracy.
    Base,
    /// The best mean accuracy among the individual fine-tuned checkpoints.
    BestFinetuned,
}

impl Reference {
    pub fn as_str(self) -> &'static str {
        match self {
            Reference::Base => "base",
            Reference::BestFinetuned => "best-finetuned",
        }
    }
}

impl fmt::Display for Reference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Reference {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Reference::Base),
            "best-ft" | "best-finetuned" => Ok(Reference::BestFinetuned),
            other => Err(Error::invalid(format!(
                "unknown reference `{other}` (expected base or best-ft)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterferenceRow {
    pub method: String,
    pub size: usize,
    pub combinations: usize,
    /// Percent of combinations whose mean is strictly above the reference.
    pub success_rate: f64,
    /// Mean of (merged − reference) over all combinations, in points.
    pub mean_delta: f64,
    pub reference: Reference,
    pub reference_mean: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InterferenceReport {
    pub rows: Vec<InterferenceRow>,
}

/// Result id of the merge of `subset` with `method`. A single checkpoint is
/// its own merge, so its id is returned unchanged.
pub fn merged_model_id(method: &str, subset: &[String]) -> String {
    match subset {
        [only] => only.clone(),
        _ => format!("{method}:{}", subset.join("+")),
    }
}

/// Methods that appear as `method:` prefixes among the result ids, sorted.
pub fn discover_methods(results: &EvalResults) -> Vec<String> {
    let found: BTreeSet<&str> = results
        .models()
        .filter_map(|id| id.split_once(':').map(|(m, _)| m))
        .collect();
    found.into_iter().map(str::to_owned).collect()
}

fn reference_mean(
    results: &EvalResults,
    base_id: &str,
    plan: &SamplingPlan,
    reference: Reference,
    tasks: &[String],
) -> Result<f64> {
    match reference {
        Reference::Base => mean_accuracy(results, base_id, tasks),
        Reference::BestFinetuned => {
            let mut best = f64::NEG_INFINITY;
            for id in &plan.ids {
                best = best.max(mean_accuracy(results, id, tasks)?);
            }
            Ok(best)
        }
    }
}

/// Success rate and mean delta per merge size, for each method in turn.
///
/// Tasks are those recorded for the base model. Every id the plan implies
/// must have a result for each of them; otherwise all missing ids are
/// reported together.
pub fn interference_report(
    results: &EvalResults,
    base_id: &str,
    plan: &SamplingPlan,
    methods: &[String],
    reference: Reference,
) -> Result<InterferenceReport> {
    plan.validate()?;
    if methods.is_empty() {
        return Err(Error::invalid("no merge methods to report"));
    }
    if !results.has_model(base_id) {
        return Err(Error::MissingResults(vec![base_id.to_string()]));
    }
    let tasks = results.tasks_of(base_id);

    let mut needed: BTreeSet<String> = plan.ids.iter().cloned().collect();
    for method in methods {
        for subsets in plan.subsets.values() {
            needed.extend(subsets.iter().map(|s| merged_model_id(method, s)));
        }
    }
    let missing = missing_entries(results, &needed, &tasks);
    if !missing.is_empty() {
        return Err(Error::MissingResults(missing));
    }

    let ref_mean = reference_mean(results, base_id, plan, reference, &tasks)?;
    let mut rows = Vec::new();
    for method in methods {
        for (&size, subsets) in &plan.subsets {
            if subsets.is_empty() {
                continue;
            }
            let means = subsets
                .iter()
                .map(|s| mean_accuracy(results, &merged_model_id(method, s), &tasks))
                .collect::<Result<Vec<f64>>>()?;
            let k = means.len();
            let wins = means.iter().filter(|&&m| m > ref_mean).count();
            let delta = means.iter().map(|m| m - ref_mean).sum::<f64>() / k as f64;
            rows.push(InterferenceRow {
                method: method.clone(),
                size,
                combinations: k,
                success_rate: 100.0 * wins as f64 / k as f64,
                mean_delta: delta,
                reference,
                reference_mean: ref_mean,
            });
        }
    }
    Ok(InterferenceReport { rows })
}

pub fn interference_table(
    results: &EvalResults,
    base_id: &str,
    plan: &SamplingPlan,
    method: &str,
    reference: Reference,
) -> Result<InterferenceReport> {
    interference_report(results, base_id, plan, &[method.to_string()], reference)
}

/// `"80 / +0.89"`.
pub fn format_cell(row: &InterferenceRow) -> String {
    format!("{:.0} / {:+.2}", row.success_rate, row.mean_delta)
}

impl InterferenceReport {
    /// One line per method, one column per merge size.
    pub fn to_text(&self) -> String {
        let mut sizes: Vec<(usize, usize)> =
            self.rows.iter().map(|r| (r.size, r.combinations)).collect();
        sizes.sort_unstable();
        sizes.dedup_by_key(|s| s.0);
        let mut methods: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !methods.contains(&r.method.as_str()) {
                methods.push(&r.method);
            }
        }

        let mut header = vec!["method".to_string()];
        header.extend(sizes.iter().map(|(n, k)| format!("n={n} ({k})")));
        let mut lines = vec![header];
        for m in &methods {
            let mut line = vec![m.to_string()];
            for (n, _) in &sizes {
                let cell = self
                    .rows
                    .iter()
                    .find(|r| r.method == *m && r.size == *n)
                    .map(format_cell)
                    .unwrap_or_else(|| "-".into());
                line.push(cell);
            }
            lines.push(line);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0))
            .collect();

        let mut out = String::new();
        if let Some(first) = self.rows.first() {
            let _ = writeln!(
                out,
                "reference: {} (mean {:.2})",
                first.reference, first.reference_mean
            );
        }
        for line in lines {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, w))| {
                    if c == 0 {
                        format!("{s:<w$}")
                    } else {
                        format!("{s:>w$}")
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,size,combinations,success_rate,mean_delta,reference,reference_mean\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.method,
                r.size,
                r.combinations,
                r.success_rate,
                r.mean_delta,
                r.reference,
                r.reference_mean
            );
        }
        out
    }
}
