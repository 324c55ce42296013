use std::collections::BTreeMap;

use crate::checkpoint::{check_mergeable, numel, Checkpoint};
use crate::error::{Error, Result};

/// Full-precision tensor without a stored dtype, used for deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl DeltaTensor {
    pub fn new(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        if numel(&shape) != values.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(&shape),
                values.len()
            )));
        }
        Ok(Self { shape, values })
    }

    /// Two-dimensional with no empty axis, i.e. eligible for spectral transforms.
    pub fn is_matrix(&self) -> bool {
        is_matrix(&self.shape)
    }
}

pub(crate) fn is_matrix(shape: &[usize]) -> bool {
    shape.len() == 2 && shape[0] > 0 && shape[1] > 0
}

/// Per-tensor difference between a fine-tuned variant and its base.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub entries: BTreeMap<String, DeltaTensor>,
    pub base_id: String,
    pub variant_id: String,
}

impl TaskVector {
    pub fn get(&self, name: &str) -> Option<&DeltaTensor> {
        self.entries.get(name)
    }

    /// Copy of `self` with `f` applied to each tensor's values.
    pub(crate) fn map_values(&self, f: impl Fn(&[usize], &mut Vec<f32>)) -> TaskVector {
        let entries = self
            .entries
            .iter()
            .map(|(name, d)| {
                let mut values = d.values.clone();
                f(&d.shape, &mut values);
                (
                    name.clone(),
                    DeltaTensor {
                        shape: d.shape.clone(),
                        values,
                    },
                )
            })
            .collect();
        TaskVector {
            entries,
            base_id: self.base_id.clone(),
            variant_id: self.variant_id.clone(),
        }
    }
}

/// `variant − base`, tensor by tensor, in f32.
pub fn task_vector(variant: &Checkpoint, base: &Checkpoint) -> Result<TaskVector> {
    let names = check_mergeable(&[base, variant])?;
    let mut entries = BTreeMap::new();
    for name in names {
        let b = base.load(&name)?;
        let mut values = variant.load(&name)?.values;
        subtract_in_place(&mut values, &b.values);
        entries.insert(
            name,
            DeltaTensor {
                shape: b.shape,
                values,
            },
        );
    }
    Ok(TaskVector {
        entries,
        base_id: base.source_path().display().to_string(),
        variant_id: variant.source_path().display().to_string(),
    })
}

pub(crate) fn subtract_in_place(values: &mut [f32], base: &[f32]) {
    for (v, b) in values.iter_mut().zip(base) {
        *v -= *b;
    }
}

/// Confirms every task vector covers exactly the base's tensors with matching shapes.
pub(crate) fn check_deltas(base: &Checkpoint, deltas: &[TaskVector]) -> Result<()> {
    if deltas.is_empty() {
        return Err(Error::invalid("at least one task vector is required"));
    }
    for delta in deltas {
        let diff: Vec<String> = base
            .names()
            .filter(|n| !delta.entries.contains_key(*n))
            .chain(
                delta
                    .entries
                    .keys()
                    .map(String::as_str)
                    .filter(|n| !base.contains(n)),
            )
            .map(str::to_string)
            .collect();
        if !diff.is_empty() {
            return Err(Error::NameSetMismatch(diff));
        }
        for (name, d) in &delta.entries {
            let expected = &base.info(name).expect("checked above").shape;
            if &d.shape != expected || d.values.len() != numel(expected) {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: expected.clone(),
                    found: d.shape.clone(),
                });
            }
        }
    }
    Ok(())
}
