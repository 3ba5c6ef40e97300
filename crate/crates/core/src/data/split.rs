//! Train/val/test splitting, stratified by label where possible.

use serde::{Deserialize, Serialize};

use crate::data::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::numerics::rng::{Purpose, RngStream, StreamId};

/// Split ratios and policy. Defaults to a seeded, stratified 60:20:20.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
    pub stratified: bool,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train_ratio: 0.6, val_ratio: 0.2, test_ratio: 0.2, stratified: true, seed: 0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let ratios = [self.train_ratio, self.val_ratio, self.test_ratio];
        if ratios.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::Config(format!("split ratios must be positive, got {ratios:?}")));
        }
        let sum: f64 = ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("split ratios must sum to 1, got {sum}")));
        }
        Ok(())
    }
}

/// Index sets for one client's split, plus any downgrade warnings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitOutcome {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Split `labels` into disjoint, exhaustive index sets. Sizes are
/// `floor(ratio * n)` for val and test with the remainder going to train.
/// Stratification downgrades (with a warning) if any class has fewer than
/// three samples.
pub fn split_indices(labels: &[u32], spec: &SplitSpec, client_id: u64) -> Result<SplitOutcome> {
    spec.validate()?;
    let n = labels.len();
    let val_target = (spec.val_ratio * n as f64).floor() as usize;
    let test_target = (spec.test_ratio * n as f64).floor() as usize;
    if val_target == 0 || test_target == 0 || val_target + test_target >= n {
        return Err(Error::Data(format!(
            "{n} samples are too few to split {:.0}:{:.0}:{:.0}",
            spec.train_ratio * 100.0,
            spec.val_ratio * 100.0,
            spec.test_ratio * 100.0
        )));
    }

    let mut warnings = Vec::new();
    let k = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }

    let stratify = if spec.stratified {
        match by_class.iter().enumerate().find(|(_, idx)| !idx.is_empty() && idx.len() < 3) {
            Some((c, idx)) => {
                warnings.push(format!(
                    "class {c} has only {} samples; falling back to unstratified split",
                    idx.len()
                ));
                false
            }
            None => true,
        }
    } else {
        false
    };

    let mut rng = RngStream::new(spec.seed, StreamId::new(client_id, 0, Purpose::Split));
    let mut val = Vec::with_capacity(val_target);
    let mut test = Vec::with_capacity(test_target);
    let mut train = Vec::with_capacity(n - val_target - test_target);

    if stratify {
        let class_sizes: Vec<usize> = by_class.iter().map(Vec::len).collect();
        let val_quota = largest_remainder(&class_sizes, spec.val_ratio, val_target);
        let test_quota = largest_remainder(&class_sizes, spec.test_ratio, test_target);
        for (c, idx) in by_class.iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            let mut shuffled: Vec<usize> = idx.clone();
            let perm = rng.permutation(shuffled.len());
            shuffled = perm.iter().map(|&p| idx[p]).collect();
            let (v, t) = (val_quota[c], test_quota[c]);
            if v + t > shuffled.len() {
                return Err(Error::Data(format!(
                    "class {c} with {} samples cannot fill val={v} test={t}",
                    shuffled.len()
                )));
            }
            val.extend_from_slice(&shuffled[..v]);
            test.extend_from_slice(&shuffled[v..v + t]);
            train.extend_from_slice(&shuffled[v + t..]);
        }
    } else {
        let perm = rng.permutation(n);
        val.extend_from_slice(&perm[..val_target]);
        test.extend_from_slice(&perm[val_target..val_target + test_target]);
        train.extend_from_slice(&perm[val_target + test_target..]);
    }

    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(SplitOutcome { train, val, test, warnings })
}

/// Apportion `target` slots across classes proportionally to their sizes,
/// floors first, then remaining slots by largest fractional part (ties to
/// the lower class id).
fn largest_remainder(sizes: &[usize], ratio: f64, target: usize) -> Vec<usize> {
    let mut quota: Vec<usize> = Vec::with_capacity(sizes.len());
    let mut fracs: Vec<(usize, f64)> = Vec::with_capacity(sizes.len());
    let mut assigned = 0usize;
    for (c, &s) in sizes.iter().enumerate() {
        let ideal = ratio * s as f64;
        let base = ideal.floor() as usize;
        quota.push(base.min(s));
        assigned += quota[c];
        fracs.push((c, ideal - base as f64));
    }
    fracs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut remaining = target.saturating_sub(assigned);
    for &(c, _) in fracs.iter().cycle().take(fracs.len() * 2) {
        if remaining == 0 {
            break;
        }
        if quota[c] < sizes[c] {
            quota[c] += 1;
            remaining -= 1;
        }
    }
    quota
}

/// Convenience wrapper returning materialized datasets.
pub fn split_dataset(
    dataset: &EmbeddingDataset,
    spec: &SplitSpec,
    client_id: u64,
) -> Result<(EmbeddingDataset, EmbeddingDataset, EmbeddingDataset, Vec<String>)> {
    let out = split_indices(dataset.y(), spec, client_id)?;
    Ok((
        dataset.subset(&out.train)?,
        dataset.subset(&out.val)?,
        dataset.subset(&out.test)?,
        out.warnings,
    ))
}
