use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LAMBDA: f32 = 1.0;
pub const DEFAULT_TRIM_DENSITY: f64 = 0.10;
pub const DEFAULT_BOOST_THRESHOLD: f64 = 0.20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MergeMethod {
    #[serde(rename = "ta")]
    TaskArithmetic,
    #[serde(rename = "ties")]
    Ties,
    #[serde(rename = "model-stock")]
    ModelStock,
    #[serde(rename = "tsv")]
    TsvMerge,
    #[serde(rename = "iso-c")]
    IsoC,
}

impl MergeMethod {
    pub const ALL: [MergeMethod; 5] = [
        MergeMethod::TaskArithmetic,
        MergeMethod::Ties,
        MergeMethod::ModelStock,
        MergeMethod::TsvMerge,
        MergeMethod::IsoC,
    ];

    pub const fn as_str(self) -> &'static str {
        match self {
            MergeMethod::TaskArithmetic => "ta",
            MergeMethod::Ties => "ties",
            MergeMethod::ModelStock => "model-stock",
            MergeMethod::TsvMerge => "tsv",
            MergeMethod::IsoC => "iso-c",
        }
    }

    /// Whether spectrum boosting may be layered on top of this method.
    pub const fn accepts_boost(self) -> bool {
        matches!(self, MergeMethod::TaskArithmetic | MergeMethod::Ties)
    }
}

impl fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MergeMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ta" | "task-arithmetic" => Ok(MergeMethod::TaskArithmetic),
            "ties" => Ok(MergeMethod::Ties),
            "model-stock" | "modelstock" => Ok(MergeMethod::ModelStock),
            "tsv" | "tsv-m" | "tsv-merge" => Ok(MergeMethod::TsvMerge),
            "iso-c" | "isoc" => Ok(MergeMethod::IsoC),
            other => Err(format!(
                "unknown merge method `{other}` (expected ta, ties, model-stock, tsv or iso-c)"
            )),
        }
    }
}

/// Divisor used in the TIES disjoint merge.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TiesNormalization {
    /// Divide by the number of merged checkpoints.
    #[default]
    ModelCount,
    /// Divide, per parameter, by the number of entries that survived sign selection.
    AgreeingCount,
}

impl FromStr for TiesNormalization {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "model-count" | "n" => Ok(TiesNormalization::ModelCount),
            "agreeing-count" | "agreeing" => Ok(TiesNormalization::AgreeingCount),
            other => Err(format!(
                "unknown TIES normalization `{other}` (expected model-count or agreeing-count)"
            )),
        }
    }
}

/// Method selector plus every hyperparameter a merge may consult.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeRecipe {
    pub method: MergeMethod,
    /// Per-variant coefficients; `None` means 1.0 for every variant.
    pub alphas: Option<Vec<f32>>,
    pub lambda: f32,
    pub trim_density: f64,
    /// Spectrum boosting threshold; `None` disables boosting.
    pub boost: Option<f64>,
    pub ties_normalization: TiesNormalization,
}

impl MergeRecipe {
    pub fn new(method: MergeMethod) -> Self {
        Self {
            method,
            alphas: None,
            lambda: DEFAULT_LAMBDA,
            trim_density: DEFAULT_TRIM_DENSITY,
            boost: None,
            ties_normalization: TiesNormalization::default(),
        }
    }

    pub fn with_lambda(mut self, lambda: f32) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_alphas(mut self, alphas: Vec<f32>) -> Self {
        self.alphas = Some(alphas);
        self
    }

    pub fn with_trim_density(mut self, density: f64) -> Self {
        self.trim_density = density;
        self
    }

    pub fn with_boost(mut self, beta: f64) -> Self {
        self.boost = Some(beta);
        self
    }

    pub fn with_ties_normalization(mut self, normalization: TiesNormalization) -> Self {
        self.ties_normalization = normalization;
        self
    }

    /// Coefficients for `n` variants.
    pub fn alphas_for(&self, n: usize) -> Vec<f32> {
        self.alphas.clone().unwrap_or_else(|| vec![1.0; n])
    }

    pub fn validate(&self, variant_count: usize) -> Result<()> {
        if variant_count == 0 {
            return Err(Error::invalid(
                "at least one fine-tuned variant is required",
            ));
        }
        if self.method == MergeMethod::ModelStock && variant_count < 2 {
            return Err(Error::invalid("model-stock needs at least two variants"));
        }
        if let Some(alphas) = &self.alphas {
            if alphas.len() != variant_count {
                return Err(Error::invalid(format!(
                    "{} alphas given for {variant_count} variants",
                    alphas.len()
                )));
            }
            if alphas.iter().any(|a| !a.is_finite()) {
                return Err(Error::invalid("alphas must be finite"));
            }
        }
        if !self.lambda.is_finite() {
            return Err(Error::invalid("lambda must be finite"));
        }
        if !(self.trim_density > 0.0 && self.trim_density <= 1.0) {
            return Err(Error::invalid(format!(
                "trim density {} outside (0, 1]",
                self.trim_density
            )));
        }
        if let Some(beta) = self.boost {
            if !(0.0..=1.0).contains(&beta) {
                return Err(Error::invalid(format!(
                    "boost threshold {beta} outside [0, 1]"
                )));
            }
            if !self.method.accepts_boost() {
                return Err(Error::invalid(format!(
                    "boosting composes only with ta or ties, not {}",
                    self.method
                )));
            }
        }
        Ok(())
    }
}
