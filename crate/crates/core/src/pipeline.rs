//! End-to-end evaluation: encode locations, shuffle query views, retrieve,
//! and tabulate recall.

use std::thread;

use crate::ccca::{invert, ViewGroup};
use crate::dataset::{subset_views, truncate_text, LocationEntry};
use crate::descriptor::Descriptor;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::Rng;
use crate::retrieval::{build_index, recall_table, Index, Query, RecallOptions, RecallTable};

/// Both modalities of one location as descriptor groups in slot order.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedLocation {
    pub id: String,
    pub x_m: f64,
    pub y_m: f64,
    pub text: ViewGroup,
    pub image: ViewGroup,
}

fn encode_one(entry: &LocationEntry, params: &ModelParams) -> Result<EncodedLocation> {
    let mut text = Vec::with_capacity(entry.views.len());
    let mut image = Vec::with_capacity(entry.views.len());
    for v in &entry.views {
        text.push(params.encode_text(&v.text)?);
        image.push(params.encode_image(&v.image)?);
    }
    Ok(EncodedLocation {
        id: entry.id.clone(),
        x_m: entry.x_m,
        y_m: entry.y_m,
        text: ViewGroup::from_descriptors(&text)?,
        image: ViewGroup::from_descriptors(&image)?,
    })
}

/// Maps `f` over `items` on up to `threads` workers; output order and
/// values match a serial map.
pub fn parallel_map<T: Sync, U: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> Result<U> + Sync,
) -> Result<Vec<U>> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    let parts: Vec<Result<Vec<U>>> = thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<U>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("encoder thread panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Worker count used when callers do not choose one.
pub fn default_threads() -> usize {
    thread::available_parallelism().map_or(1, |n| n.get())
}

/// Encodes every view of every location.
pub fn encode_locations(
    entries: &[LocationEntry],
    params: &ModelParams,
    threads: usize,
) -> Result<Vec<EncodedLocation>> {
    parallel_map(entries, threads, |e| encode_one(e, params))
}

/// Evaluation-time transforms and retrieval settings.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub recall: RecallOptions,
    /// Keep only the first `n` views of every location.
    pub views: Option<usize>,
    /// Keep only this leading fraction of every description.
    pub truncate: Option<f64>,
    /// Present query views in a seeded random order.
    pub shuffle: bool,
    pub shuffle_seed: u64,
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            recall: RecallOptions::default(),
            views: None,
            truncate: None,
            shuffle: true,
            shuffle_seed: 0,
            threads: default_threads(),
        }
    }
}

/// Applies the view subset and description truncation.
pub fn prepare(entries: &[LocationEntry], views: Option<usize>, truncate: Option<f64>) -> Result<Vec<LocationEntry>> {
    entries
        .iter()
        .map(|e| {
            let mut e = match views {
                Some(n) => subset_views(e, n)?,
                None => e.clone(),
            };
            if let Some(f) = truncate {
                for v in &mut e.views {
                    v.text = truncate_text(&v.text, f)?;
                }
            }
            Ok(e)
        })
        .collect()
}

/// Text groups as queries (optionally view-shuffled) and image groups as
/// the database.
pub fn queries_and_index(
    encoded: &[EncodedLocation],
    shuffle: bool,
    seed: u64,
) -> Result<(Vec<Query>, Index)> {
    let root = Rng::new(seed);
    let queries = encoded
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let v = e.text.views();
            let order = if shuffle {
                root.substream(i as u64).permutation(v)
            } else {
                (0..v).collect()
            };
            Query {
                x_m: e.x_m,
                y_m: e.y_m,
                group: e.text.reordered(&order),
                truth: Some(invert(&order)),
            }
        })
        .collect();
    let index = build_index(
        encoded
            .iter()
            .map(|e| (e.id.clone(), (e.x_m, e.y_m), e.image.clone()))
            .collect(),
    )?;
    Ok((queries, index))
}

/// Recall of text-group queries against the image-group database built
/// from the same locations.
pub fn evaluate(entries: &[LocationEntry], params: &ModelParams, options: &EvalOptions) -> Result<RecallTable> {
    if entries.is_empty() {
        return Err(Error::domain("evaluation set is empty"));
    }
    let prepared = prepare(entries, options.views, options.truncate)?;
    let encoded = encode_locations(&prepared, params, options.threads)?;
    evaluate_encoded(&encoded, options)
}

/// [`evaluate`] on already encoded locations.
pub fn evaluate_encoded(encoded: &[EncodedLocation], options: &EvalOptions) -> Result<RecallTable> {
    let (queries, index) = queries_and_index(encoded, options.shuffle, options.shuffle_seed)?;
    recall_table(&queries, &index, &options.recall)
}

/// Per-view descriptors for a single modality, used by the alignment CLI.
pub fn group_from_vectors(rows: &[Vec<f64>]) -> Result<ViewGroup> {
    let descriptors = rows
        .iter()
        .map(|r| Descriptor::new(r))
        .collect::<Result<Vec<_>>>()?;
    ViewGroup::from_descriptors(&descriptors)
}
