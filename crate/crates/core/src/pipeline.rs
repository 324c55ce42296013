//! File-to-file merging, one tensor name at a time.
//!
//! For each tensor the base and every variant are loaded, merged, written and
//! dropped before the next name is touched, so peak memory is bounded by the
//! largest tensor times (variants + 2) rather than by the model size.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{check_mergeable, Checkpoint, CheckpointWriter, TensorLayout};
use crate::dtype::Dtype;
use crate::error::{Error, Result};
use crate::experiment::norms::sum_squared_difference;
use crate::merge::model_stock::AngleStats;
use crate::merge::{merge_tensor, MergeMethod, MergeRecipe};

/// Metadata keys written into every merged container.
pub const META_RECIPE: &str = "mergeforge.recipe";
pub const META_BASE: &str = "mergeforge.base";
pub const META_MODELS: &str = "mergeforge.models";
pub const META_OUT_DTYPE: &str = "mergeforge.out_dtype";

#[derive(Debug, Clone, PartialEq)]
pub struct MergeJob {
    pub base: PathBuf,
    pub variants: Vec<PathBuf>,
    pub recipe: MergeRecipe,
    pub out: PathBuf,
    /// `None` keeps each tensor's stored dtype from the base.
    pub out_dtype: Option<Dtype>,
}

#[derive(Debug, Clone, Copy)]
pub struct TensorProgress<'a> {
    /// 1-based position in write order.
    pub index: usize,
    pub total: usize,
    pub name: &'a str,
    pub shape: &'a [usize],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergeSummary {
    pub output: PathBuf,
    pub tensors: usize,
    /// `‖θ_merged − θ_base‖₂` measured on the stored (narrowed) output.
    pub delta_norm: f64,
    pub angle_stats: Vec<AngleStats>,
}

impl MergeJob {
    pub fn new(
        base: impl Into<PathBuf>,
        variants: Vec<PathBuf>,
        recipe: MergeRecipe,
        out: impl Into<PathBuf>,
    ) -> Self {
        Self {
            base: base.into(),
            variants,
            recipe,
            out: out.into(),
            out_dtype: None,
        }
    }

    /// The effective recipe and inputs, as echoed into `__metadata__`.
    pub fn provenance(&self) -> BTreeMap<String, String> {
        let paths = |ps: &[PathBuf]| {
            ps.iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
        };
        let mut m = BTreeMap::new();
        m.insert(
            META_RECIPE.to_string(),
            serde_json::to_string(&self.recipe).expect("recipe serializes"),
        );
        m.insert(META_BASE.to_string(), self.base.display().to_string());
        m.insert(
            META_MODELS.to_string(),
            serde_json::to_string(&paths(&self.variants)).expect("paths serialize"),
        );
        m.insert(
            META_OUT_DTYPE.to_string(),
            self.out_dtype.map_or("base", Dtype::as_str).to_string(),
        );
        m
    }
}

/// Runs `job`, calling `progress` before each tensor is merged.
pub fn run_merge(
    job: &MergeJob,
    mut progress: impl FnMut(TensorProgress<'_>),
) -> Result<MergeSummary> {
    if job.variants.is_empty() {
        return Err(Error::invalid("no variant checkpoints given"));
    }
    job.recipe.validate(job.variants.len())?;

    let base = Checkpoint::open(&job.base)?;
    let variants = job
        .variants
        .iter()
        .map(Checkpoint::open)
        .collect::<Result<Vec<_>>>()?;
    let mut all: Vec<&Checkpoint> = vec![&base];
    all.extend(variants.iter());
    let names = check_mergeable(&all)?;

    let layout: Vec<TensorLayout> = names
        .iter()
        .map(|name| {
            let info = base.info(name).expect("name comes from base");
            TensorLayout {
                name: name.clone(),
                shape: info.shape.clone(),
                dtype: job.out_dtype.unwrap_or(info.dtype),
            }
        })
        .collect();
    let mut writer = CheckpointWriter::create(&job.out, layout.clone(), &job.provenance())?;

    let total = layout.len();
    let mut squared = 0.0f64;
    let mut angle_stats = Vec::new();
    for (i, t) in layout.iter().enumerate() {
        progress(TensorProgress {
            index: i + 1,
            total,
            name: &t.name,
            shape: &t.shape,
        });
        let mut merged = base.load(&t.name)?.values;
        let loaded = variants
            .iter()
            .map(|v| v.load(&t.name).map(|r| r.values))
            .collect::<Result<Vec<_>>>()?;
        if let Some(stats) = merge_tensor(&t.name, &t.shape, &mut merged, loaded, &job.recipe)? {
            angle_stats.push(stats);
        }
        writer.write_tensor(&t.name, &merged)?;

        // The base was overwritten in place; read it again for the norm.
        let original = base.load(&t.name)?.values;
        for v in &mut merged {
            *v = t.dtype.quantize(*v).expect("written values fit the dtype");
        }
        squared += sum_squared_difference(&merged, &original);
    }
    writer.finish()?;

    Ok(MergeSummary {
        output: job.out.clone(),
        tensors: total,
        delta_norm: squared.sqrt(),
        angle_stats,
    })
}

/// Hyperparameter varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParameter {
    Lambda,
    Density,
    Beta,
}

impl SweepParameter {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParameter::Lambda => "lambda",
            SweepParameter::Density => "density",
            SweepParameter::Beta => "beta",
        }
    }

    /// `recipe` with this parameter set to `value`.
    pub fn apply(self, recipe: &MergeRecipe, value: f64) -> Result<MergeRecipe> {
        let mut r = recipe.clone();
        match self {
            SweepParameter::Lambda => r.lambda = value as f32,
            SweepParameter::Density => {
                if r.method != MergeMethod::Ties {
                    return Err(Error::invalid("a density sweep needs --method ties"));
                }
                r.trim_density = value;
            }
            SweepParameter::Beta => r.boost = Some(value),
        }
        Ok(r)
    }
}

impl fmt::Display for SweepParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepParameter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepParameter::Lambda),
            "density" => Ok(SweepParameter::Density),
            "beta" => Ok(SweepParameter::Beta),
            other => Err(Error::invalid(format!(
                "unknown sweep parameter `{other}` (expected lambda, density or beta)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub value: f64,
    pub path: PathBuf,
    pub delta_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub parameter: SweepParameter,
    pub entries: Vec<SweepEntry>,
}

pub const SWEEP_MANIFEST: &str = "sweep-manifest.json";

/// File name of the sweep output for `value`, e.g. `lambda-0.5.safetensors`.
pub fn sweep_file_name(parameter: SweepParameter, value: f64) -> String {
    format!("{parameter}-{value}.safetensors")
}

/// Merges once per grid value into `out_dir` and writes a manifest there.
///
/// Every grid value is validated before the first merge starts.
pub fn run_sweep(
    job: &MergeJob,
    parameter: SweepParameter,
    grid: &[f64],
    out_dir: &Path,
    mut progress: impl FnMut(f64, TensorProgress<'_>),
) -> Result<SweepManifest> {
    if grid.is_empty() {
        return Err(Error::invalid("empty sweep grid"));
    }
    let recipes = grid
        .iter()
        .map(|&v| {
            let r = parameter.apply(&job.recipe, v)?;
            r.validate(job.variants.len())?;
            Ok((v, r))
        })
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut entries = Vec::with_capacity(recipes.len());
    for (value, recipe) in recipes {
        let path = out_dir.join(sweep_file_name(parameter, value));
        let sub = MergeJob {
            recipe,
            out: path.clone(),
            ..job.clone()
        };
        let summary = run_merge(&sub, |p| progress(value, p))?;
        entries.push(SweepEntry {
            value,
            path,
            delta_norm: summary.delta_norm,
        });
    }
    let manifest = SweepManifest { parameter, entries };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write_atomic(&out_dir.join(SWEEP_MANIFEST), text.as_bytes())?;
    Ok(manifest)
}

/// Writes `bytes` to a temporary sibling of `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
