use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub model_id: String,
    pub task: String,
    pub accuracy: f64,
}

/// Per-task accuracies in percent, at most one per (model, task).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalResults {
    records: BTreeMap<String, BTreeMap<String, f64>>,
}

#[derive(Deserialize)]
struct ModelResultsJson {
    model_id: String,
    results: BTreeMap<String, TaskScore>,
}

#[derive(Deserialize)]
struct TaskScore {
    acc: f64,
}

impl EvalResults {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: impl IntoIterator<Item = EvalRecord>) -> Result<Self> {
        let mut out = Self::new();
        for r in records {
            out.insert(r.model_id, r.task, r.accuracy)?;
        }
        Ok(out)
    }

    pub fn insert(
        &mut self,
        model_id: impl Into<String>,
        task: impl Into<String>,
        accuracy: f64,
    ) -> Result<()> {
        let (model_id, task) = (model_id.into(), task.into());
        if !accuracy.is_finite() || !(0.0..=100.0).contains(&accuracy) {
            return Err(Error::invalid(format!(
                "accuracy {accuracy} for {model_id}/{task} is outside [0, 100]"
            )));
        }
        let tasks = self.records.entry(model_id.clone()).or_default();
        if tasks.insert(task.clone(), accuracy).is_some() {
            return Err(Error::invalid(format!(
                "duplicate result for {model_id}/{task}"
            )));
        }
        Ok(())
    }

    pub fn get(&self, model_id: &str, task: &str) -> Option<f64> {
        self.records.get(model_id)?.get(task).copied()
    }

    pub fn has_model(&self, model_id: &str) -> bool {
        self.records.contains_key(model_id)
    }

    pub fn models(&self) -> impl Iterator<Item = &str> {
        self.records.keys().map(String::as_str)
    }

    /// Tasks recorded for a model, sorted.
    pub fn tasks_of(&self, model_id: &str) -> Vec<String> {
        self.records
            .get(model_id)
            .map(|t| t.keys().cloned().collect())
            .unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.records.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> impl Iterator<Item = EvalRecord> + '_ {
        self.records.iter().flat_map(|(m, tasks)| {
            tasks.iter().map(move |(t, &a)| EvalRecord {
                model_id: m.clone(),
                task: t.clone(),
                accuracy: a,
            })
        })
    }

    /// Adds one model's `{"model_id", "results": {task: {"acc": x}}}` document.
    pub fn add_json(&mut self, text: &str, origin: &Path) -> Result<()> {
        let doc: ModelResultsJson = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            reason: e.to_string(),
        })?;
        for (task, score) in doc.results {
            self.insert(doc.model_id.clone(), task, score.acc)?;
        }
        Ok(())
    }

    /// Adds rows of a `model_id,task,accuracy` CSV with a header line.
    pub fn add_csv(&mut self, text: &str, origin: &Path) -> Result<()> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        for row in reader.deserialize::<EvalRecord>() {
            let r = row.map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                reason: e.to_string(),
            })?;
            self.insert(r.model_id, r.task, r.accuracy)?;
        }
        Ok(())
    }

    /// Reads every `*.json` and `*.csv` file in `dir`, in file-name order.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut paths: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
            .collect::<Result<_>>()?;
        paths.sort();
        let mut out = Self::new();
        for path in paths {
            let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
            if !path.is_file() || !matches!(ext, "json" | "csv") {
                continue;
            }
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            match ext {
                "json" => out.add_json(&text, &path)?,
                _ => out.add_csv(&text, &path)?,
            }
        }
        Ok(out)
    }
}

/// Unweighted mean accuracy of `model_id` over `tasks`.
pub fn mean_accuracy(results: &EvalResults, model_id: &str, tasks: &[String]) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::invalid("mean over an empty task list"));
    }
    let missing: Vec<String> = tasks
        .iter()
        .filter(|t| results.get(model_id, t).is_none())
        .map(|t| format!("{model_id} ({t})"))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingResults(missing));
    }
    let sum: f64 = tasks.iter().filter_map(|t| results.get(model_id, t)).sum();
    Ok(sum / tasks.len() as f64)
}

/// Models in `ids` lacking any record for `tasks`, as `model` or `model (task)`.
pub(crate) fn missing_entries(
    results: &EvalResults,
    ids: &BTreeSet<String>,
    tasks: &[String],
) -> Vec<String> {
    let mut missing = Vec::new();
    for id in ids {
        if !results.has_model(id) {
            missing.push(id.clone());
            continue;
        }
        for t in tasks {
            if results.get(id, t).is_none() {
                missing.push(format!("{id} ({t})"));
            }
        }
    }
    missing
}
