use serde::{Deserialize, Serialize};

use super::{Dataset, LocationEntry, Splits, View};
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::text_head::TextTokenSequence;

/// Fractions of locations assigned to each partition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    /// 5 : 1 : 1.
    fn default() -> Self {
        Self {
            train: 5.0 / 7.0,
            val: 1.0 / 7.0,
            test: 1.0 / 7.0,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(Error::domain(format!("split ratios must be positive, got {all:?}")));
        }
        if (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::domain(format!("split ratios must sum to 1, got {all:?}")));
        }
        Ok(())
    }
}

/// Shuffled partition by location. Validation and test sizes are
/// `round(ratio * N)`; training takes the rest. Ids keep dataset order
/// inside each partition.
pub fn split(dataset: Dataset, ratios: SplitRatios, seed: u64) -> Result<Dataset> {
    ratios.validate()?;
    let n = dataset.len();
    let n_val = (ratios.val * n as f64).round() as usize;
    let n_test = (ratios.test * n as f64).round() as usize;
    if n_val == 0 || n_test == 0 || n_val + n_test >= n {
        return Err(Error::domain(format!(
            "{n} locations cannot fill three non-empty splits"
        )));
    }
    let order = Rng::new(seed).permutation(n);
    let mut label = vec![0u8; n];
    for &i in &order[..n_val] {
        label[i] = 1;
    }
    for &i in &order[n_val..n_val + n_test] {
        label[i] = 2;
    }
    let mut splits = Splits::default();
    for (e, l) in dataset.entries.iter().zip(&label) {
        let bucket = match l {
            0 => &mut splits.train,
            1 => &mut splits.val,
            _ => &mut splits.test,
        };
        bucket.push(e.id.clone());
    }
    dataset.with_splits(splits)
}

/// Keeps the first `ceil(fraction * n)` tokens. Sentences wholly inside the
/// prefix keep their breaks; a cut sentence keeps its prefix.
pub fn truncate_text(seq: &TextTokenSequence, fraction: f64) -> Result<TextTokenSequence> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::domain(format!(
            "truncation fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let n = seq.token_count();
    // The slack absorbs products such as 0.1 * 30 = 3.0000000000000004.
    let keep = ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut breaks: Vec<usize> = seq
        .sentence_breaks()
        .iter()
        .copied()
        .filter(|&b| b < keep)
        .collect();
    breaks.push(keep);
    let order: Vec<usize> = (0..keep).collect();
    TextTokenSequence::new(seq.tokens().select_rows(&order), breaks)
}

/// Applies [`truncate_text`] to every description.
pub fn truncate_dataset(dataset: &Dataset, fraction: f64) -> Result<Dataset> {
    let mut out = dataset.clone();
    for e in &mut out.entries {
        for v in &mut e.views {
            v.text = truncate_text(&v.text, fraction)?;
        }
    }
    Ok(out)
}

/// The first `n` views in ground-truth order, on both modalities.
pub fn subset_views(entry: &LocationEntry, n: usize) -> Result<LocationEntry> {
    if n == 0 || n > entry.views.len() {
        return Err(Error::domain(format!(
            "cannot keep {n} of {} views of {}",
            entry.views.len(),
            entry.id
        )));
    }
    let views: Vec<View> = entry.views[..n].to_vec();
    Ok(LocationEntry {
        views,
        ..entry.clone()
    })
}
