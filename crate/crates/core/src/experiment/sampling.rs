use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::prng::SplitMix64;

/// Which checkpoint subsets get merged at each merge size.
///
/// Subsets are stored with ids sorted inside each subset, and subsets sorted
/// within each size, so the serialized form is canonical.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub seed: u64,
    pub ids: Vec<String>,
    #[serde(default)]
    pub samples_per_size: usize,
    pub subsets: BTreeMap<usize, Vec<Vec<String>>>,
}

impl SamplingPlan {
    pub fn sizes(&self) -> impl Iterator<Item = usize> + '_ {
        self.subsets.keys().copied()
    }

    /// Canonical pretty-printed JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plan serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: SamplingPlan = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "<plan>".into(),
            reason: e.to_string(),
        })?;
        plan.validate()?;
        Ok(plan)
    }

    /// Checks size, distinctness, membership and canonical ordering of every subset.
    pub fn validate(&self) -> Result<()> {
        let pool: BTreeSet<&str> = self.ids.iter().map(String::as_str).collect();
        if pool.len() != self.ids.len() {
            return Err(Error::invalid("plan ids are not distinct"));
        }
        for (&size, subsets) in &self.subsets {
            for (i, subset) in subsets.iter().enumerate() {
                if subset.len() != size {
                    return Err(Error::invalid(format!(
                        "subset {i} of size {size} has {} ids",
                        subset.len()
                    )));
                }
                if !subset.windows(2).all(|w| w[0] < w[1]) {
                    return Err(Error::invalid(format!(
                        "subset {i} of size {size} is not sorted or repeats an id"
                    )));
                }
                if let Some(stray) = subset.iter().find(|id| !pool.contains(id.as_str())) {
                    return Err(Error::invalid(format!(
                        "subset id `{stray}` is not in the plan ids"
                    )));
                }
            }
            if !subsets.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::invalid(format!(
                    "subsets of size {size} are not sorted or not distinct"
                )));
            }
        }
        Ok(())
    }
}

/// `C(n, k)`, saturating at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc·(n−i) is divisible by (i+1) at every step.
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i + 1) as u128,
            None => return u128::MAX,
        };
    }
    acc
}

/// Draws `count` distinct subsets for each merge size.
///
/// A size equal to the pool yields the single full set and size 1 yields every
/// singleton, whatever `count` is. Other sizes are sampled by drawing uniform
/// k-subsets (partial Fisher-Yates over pool positions) and rejecting repeats,
/// with one SplitMix64 substream per size keyed by the size itself.
pub fn sample_subsets(
    ids: &[String],
    sizes: &[usize],
    count: usize,
    seed: u64,
) -> Result<SamplingPlan> {
    if ids.is_empty() {
        return Err(Error::invalid("no checkpoint ids to sample from"));
    }
    if count == 0 {
        return Err(Error::invalid("samples per size must be at least 1"));
    }
    let distinct: BTreeSet<&String> = ids.iter().collect();
    if distinct.len() != ids.len() {
        return Err(Error::invalid("checkpoint ids must be distinct"));
    }
    let pool = ids.len();

    let mut subsets = BTreeMap::new();
    for &size in sizes {
        if size == 0 || size > pool {
            return Err(Error::invalid(format!(
                "merge size {size} outside 1..={pool}"
            )));
        }
        if subsets.contains_key(&size) {
            continue;
        }
        let drawn: Vec<Vec<String>> = if size == pool {
            let mut all = ids.to_vec();
            all.sort();
            vec![all]
        } else if size == 1 {
            let mut singles: Vec<Vec<String>> = ids.iter().map(|id| vec![id.clone()]).collect();
            singles.sort();
            singles
        } else {
            let available = binomial(pool, size);
            if available < count as u128 {
                return Err(Error::invalid(format!(
                    "{count} subsets requested for size {size}, but only {available} exist"
                )));
            }
            let mut rng = SplitMix64::substream(seed, size as u64);
            let mut chosen = BTreeSet::new();
            let mut positions: Vec<usize> = Vec::with_capacity(pool);
            while chosen.len() < count {
                positions.clear();
                positions.extend(0..pool);
                for i in 0..size {
                    let j = i + rng.below((pool - i) as u64) as usize;
                    positions.swap(i, j);
                }
                let mut subset: Vec<String> =
                    positions[..size].iter().map(|&p| ids[p].clone()).collect();
                subset.sort();
                chosen.insert(subset);
            }
            chosen.into_iter().collect()
        };
        subsets.insert(size, drawn);
    }

    Ok(SamplingPlan {
        seed,
        ids: ids.to_vec(),
        samples_per_size: count,
        subsets,
    })
}
