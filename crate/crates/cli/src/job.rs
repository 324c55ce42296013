use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use mergeforge::merge::TiesNormalization;
use mergeforge::{Dtype, Error, MergeJob, MergeMethod, MergeRecipe, Result};
use serde::Deserialize;

/// Merge inputs as read from a job-spec file. Every field is optional so
/// that flags can fill in or override any of them.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeJobSpec {
    pub base: Option<PathBuf>,
    #[serde(alias = "variants")]
    pub models: Option<Vec<PathBuf>>,
    pub method: Option<MergeMethod>,
    pub lambda: Option<f32>,
    pub alphas: Option<Vec<f32>>,
    #[serde(alias = "trim_density")]
    pub density: Option<f64>,
    pub boost: Option<f64>,
    pub ties_normalization: Option<TiesNormalization>,
    pub out: Option<PathBuf>,
    pub out_dtype: Option<String>,
}

impl MergeJobSpec {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, Args)]
pub struct MergeArgs {
    /// JSON job spec; flags given on the command line take precedence
    #[arg(long, value_name = "FILE")]
    pub job: Option<PathBuf>,
    /// ta, ties, model-stock, tsv or iso-c
    #[arg(long)]
    pub method: Option<MergeMethod>,
    /// Base checkpoint (file or shard index)
    #[arg(long, value_name = "PATH")]
    pub base: Option<PathBuf>,
    /// Fine-tuned checkpoint; repeat in merge order
    #[arg(long = "model", value_name = "PATH")]
    pub models: Vec<PathBuf>,
    /// Global scale applied to the combined task vector
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f32>,
    /// Per-model coefficient; repeat once per --model
    #[arg(long = "alpha", allow_negative_numbers = true)]
    pub alphas: Vec<f32>,
    /// TIES trim density in (0, 1]
    #[arg(long)]
    pub density: Option<f64>,
    /// Spectrum boosting threshold (ta and ties only)
    #[arg(long, num_args = 0..=1, default_missing_value = "0.2", value_name = "BETA")]
    pub boost: Option<f64>,
    /// TIES divisor: model-count or agreeing-count
    #[arg(long)]
    pub ties_normalization: Option<TiesNormalization>,
    /// Output path
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// f32, f16 or bf16; defaults to each tensor's dtype in the base
    #[arg(long)]
    pub out_dtype: Option<Dtype>,
    /// Suppress per-tensor progress
    #[arg(long, short)]
    pub quiet: bool,
}

impl MergeArgs {
    /// Resolves file and flags into a job; `out` is required.
    pub fn resolve(&self) -> Result<MergeJob> {
        let spec = match &self.job {
            Some(path) => MergeJobSpec::read(path)?,
            None => MergeJobSpec::default(),
        };
        let missing = |what: &str| Error::InvalidArgument(format!("missing {what}"));

        let method = self
            .method
            .or(spec.method)
            .ok_or_else(|| missing("--method"))?;
        let base = self
            .base
            .clone()
            .or(spec.base)
            .ok_or_else(|| missing("--base"))?;
        let models = if self.models.is_empty() {
            spec.models.unwrap_or_default()
        } else {
            self.models.clone()
        };
        if models.is_empty() {
            return Err(missing("--model"));
        }
        let out = self
            .out
            .clone()
            .or(spec.out)
            .ok_or_else(|| missing("--out"))?;
        let out_dtype = match (self.out_dtype, spec.out_dtype) {
            (Some(d), _) => Some(d),
            (None, Some(s)) => Some(s.parse::<Dtype>().map_err(Error::InvalidArgument)?),
            (None, None) => None,
        };

        let mut recipe = MergeRecipe::new(method);
        if let Some(l) = self.lambda.or(spec.lambda) {
            recipe.lambda = l;
        }
        let alphas = if self.alphas.is_empty() {
            spec.alphas
        } else {
            Some(self.alphas.clone())
        };
        recipe.alphas = alphas;
        if let Some(d) = self.density.or(spec.density) {
            recipe.trim_density = d;
        }
        recipe.boost = self.boost.or(spec.boost);
        if let Some(n) = self.ties_normalization.or(spec.ties_normalization) {
            recipe.ties_normalization = n;
        }

        Ok(MergeJob {
            base,
            variants: models,
            recipe,
            out,
            out_dtype,
        })
    }
}
