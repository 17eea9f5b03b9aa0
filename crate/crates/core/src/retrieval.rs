//! Multi-view concatenation, brute-force cosine retrieval, and recall at
//! metric distance thresholds.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ccca::{align, invert, CccaConfig, ViewGroup};
use crate::descriptor::Descriptor;
use crate::error::{Error, Result};
use crate::numerics::dot;
use crate::report::Tsv;

/// Concatenates the views in slot order and renormalizes. For unit-norm
/// rows the cosine of two concatenations is the mean per-view cosine.
pub fn concat_group(g: &ViewGroup) -> Descriptor {
    let flat = g.matrix().as_slice();
    let norm = (g.views() as f64).sqrt();
    let v: Vec<f64> = flat.iter().map(|x| x / norm).collect();
    // Rows are unit norm, so the result is unit norm up to rounding;
    // normalizing again keeps the invariant exact.
    Descriptor::new(&v).expect("unit rows give a non-zero concatenation")
}

/// One stored location.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexEntry {
    pub id: String,
    pub x_m: f64,
    pub y_m: f64,
    pub group: ViewGroup,
    pub descriptor: Descriptor,
}

/// Flat exact-search index over concatenated image groups.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Index {
    entries: Vec<IndexEntry>,
}

/// Builds the index, preserving insertion order.
pub fn build_index(entries: Vec<(String, (f64, f64), ViewGroup)>) -> Result<Index> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(entries.len());
    let mut dim = None;
    for (id, (x_m, y_m), group) in entries {
        if !seen.insert(id.clone()) {
            return Err(Error::domain(format!("duplicate id {id} in index")));
        }
        let descriptor = concat_group(&group);
        if *dim.get_or_insert(descriptor.dim()) != descriptor.dim() {
            return Err(Error::domain(format!(
                "index entry {id} has dimension {}, expected {}",
                descriptor.dim(),
                dim.unwrap_or_default()
            )));
        }
        out.push(IndexEntry {
            id,
            x_m,
            y_m,
            group,
            descriptor,
        });
    }
    Ok(Index { entries: out })
}

impl Index {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.first().map(|e| e.descriptor.dim())
    }
}

/// One ranked result.
#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    /// Position in the index.
    pub index: usize,
    pub id: String,
    pub score: f64,
}

/// Exact top-`k` by cosine, descending; ties go to the smaller id.
pub fn query_topk(index: &Index, q: &Descriptor, k: usize) -> Result<Vec<Hit>> {
    rank_by(index, k, |e| Ok(dot(q.as_slice(), e.descriptor.as_slice())), q.dim())
}

fn rank_by(
    index: &Index,
    k: usize,
    mut score: impl FnMut(&IndexEntry) -> Result<f64>,
    dim: usize,
) -> Result<Vec<Hit>> {
    if k == 0 {
        return Err(Error::domain("k must be at least 1"));
    }
    if let Some(d) = index.dim() {
        if d != dim {
            return Err(Error::domain(format!(
                "query dimension {dim} does not match index dimension {d}"
            )));
        }
    }
    let mut scored = Vec::with_capacity(index.len());
    for (i, e) in index.entries.iter().enumerate() {
        scored.push((i, score(e)?));
    }
    scored.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| index.entries[a.0].id.cmp(&index.entries[b.0].id))
    });
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(i, s)| Hit {
            index: i,
            id: index.entries[i].id.clone(),
            score: s,
        })
        .collect())
}

/// How a query's view order is matched to the database before
/// concatenation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignMode {
    /// Cascaded cross-attention cosine alignment.
    #[default]
    Ccca,
    /// Ground-truth order.
    Oracle,
    /// Views concatenated as presented.
    None,
}

impl AlignMode {
    pub fn label(self) -> &'static str {
        match self {
            Self::Ccca => "ccca",
            Self::Oracle => "oracle",
            Self::None => "none",
        }
    }
}

impl std::str::FromStr for AlignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ccca" => Ok(Self::Ccca),
            "oracle" => Ok(Self::Oracle),
            "none" => Ok(Self::None),
            other => Err(Error::config(format!(
                "unknown align mode {other:?}, expected ccca, oracle or none"
            ))),
        }
    }
}

/// A text group as presented, with its location and the order that
/// restores ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub x_m: f64,
    pub y_m: f64,
    pub group: ViewGroup,
    /// `group.reordered(truth)` is in ground-truth slot order.
    pub truth: Option<Vec<usize>>,
}

/// Retrieval settings for [`recall_table`].
#[derive(Clone, Debug, PartialEq)]
pub struct RecallOptions {
    pub align_mode: AlignMode,
    pub ks: Vec<usize>,
    pub eps_m: Vec<f64>,
    pub ccca: CccaConfig,
    /// Align against every candidate instead of once against the
    /// unaligned top-1. Costs `|index| * V!` scorings per query.
    pub per_candidate: bool,
}

impl Default for RecallOptions {
    fn default() -> Self {
        Self {
            align_mode: AlignMode::Ccca,
            ks: vec![1, 5, 10],
            eps_m: vec![5.0, 10.0, 15.0],
            ccca: CccaConfig::default(),
            per_candidate: false,
        }
    }
}

/// Reorders `text` into the slot order of `image`.
///
/// CCCA searches orderings of its second argument, so the text group keeps
/// the query role and the candidate images are permuted; the inverse of
/// the winning image order is the text order.
pub fn ccca_reorder(text: &ViewGroup, image: &ViewGroup, config: &CccaConfig) -> Result<ViewGroup> {
    let a = align(text, image, config)?;
    Ok(text.reordered(&invert(&a.permutation)))
}

/// Ranked candidates for one query under `options`.
pub fn retrieve(index: &Index, query: &Query, k: usize, options: &RecallOptions) -> Result<Vec<Hit>> {
    let dim = query.group.views() * query.group.dim();
    match options.align_mode {
        AlignMode::None => query_topk(index, &concat_group(&query.group), k),
        AlignMode::Oracle => {
            let truth = query
                .truth
                .as_ref()
                .ok_or_else(|| Error::config("oracle alignment needs the ground-truth order"))?;
            query_topk(index, &concat_group(&query.group.reordered(truth)), k)
        }
        AlignMode::Ccca if options.per_candidate => rank_by(
            index,
            k,
            |e| {
                let aligned = ccca_reorder(&query.group, &e.group, &options.ccca)?;
                Ok(dot(concat_group(&aligned).as_slice(), e.descriptor.as_slice()))
            },
            dim,
        ),
        AlignMode::Ccca => {
            let pre = query_topk(index, &concat_group(&query.group), 1)?;
            let Some(top) = pre.first() else {
                return Ok(Vec::new());
            };
            let aligned = ccca_reorder(&query.group, &index.entries[top.index].group, &options.ccca)?;
            query_topk(index, &concat_group(&aligned), k)
        }
    }
}

/// Recall fractions over a `k x eps` grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallTable {
    pub ks: Vec<usize>,
    pub eps_m: Vec<f64>,
    /// `recall[i][j]` is recall at `ks[i]`, `eps_m[j]`.
    pub recall: Vec<Vec<f64>>,
    pub queries: usize,
}

/// Fraction of queries with a top-`k` hit within `eps` meters (inclusive).
pub fn recall_table(queries: &[Query], index: &Index, options: &RecallOptions) -> Result<RecallTable> {
    if queries.is_empty() || index.is_empty() {
        return Err(Error::domain("recall needs non-empty queries and index"));
    }
    if options.ks.is_empty() || options.eps_m.is_empty() {
        return Err(Error::config("k and eps lists must be non-empty"));
    }
    let kmax = *options.ks.iter().max().expect("non-empty");
    let mut counts = vec![vec![0usize; options.eps_m.len()]; options.ks.len()];
    for q in queries {
        let hits = retrieve(index, q, kmax, options)?;
        let dists: Vec<f64> = hits
            .iter()
            .map(|h| {
                let e = &index.entries[h.index];
                (e.x_m - q.x_m).hypot(e.y_m - q.y_m)
            })
            .collect();
        for (i, &k) in options.ks.iter().enumerate() {
            let best = dists.iter().take(k).copied().fold(f64::INFINITY, f64::min);
            for (j, &eps) in options.eps_m.iter().enumerate() {
                if best <= eps {
                    counts[i][j] += 1;
                }
            }
        }
    }
    let n = queries.len() as f64;
    Ok(RecallTable {
        ks: options.ks.clone(),
        eps_m: options.eps_m.clone(),
        recall: counts
            .into_iter()
            .map(|row| row.into_iter().map(|c| c as f64 / n).collect())
            .collect(),
        queries: queries.len(),
    })
}

fn eps_label(eps: f64) -> String {
    format!("{eps}")
}

impl RecallTable {
    /// Recall at an exact grid point.
    pub fn get(&self, k: usize, eps_m: f64) -> Option<f64> {
        let i = self.ks.iter().position(|&x| x == k)?;
        let j = self.eps_m.iter().position(|&x| x == eps_m)?;
        Some(self.recall[i][j])
    }

    /// Nondecreasing along both axes when the axes are sorted ascending.
    pub fn is_monotone(&self) -> bool {
        let mut ki: Vec<usize> = (0..self.ks.len()).collect();
        ki.sort_by_key(|&i| self.ks[i]);
        let mut ej: Vec<usize> = (0..self.eps_m.len()).collect();
        ej.sort_by(|&a, &b| self.eps_m[a].total_cmp(&self.eps_m[b]));
        let r = |i: usize, j: usize| self.recall[ki[i]][ej[j]];
        (0..ki.len()).all(|i| {
            (0..ej.len()).all(|j| {
                (i == 0 || r(i - 1, j) <= r(i, j)) && (j == 0 || r(i, j - 1) <= r(i, j))
            })
        })
    }

    /// `k` rows by `eps` columns.
    pub fn to_tsv(&self, meta: &[(&str, String)]) -> Tsv {
        let mut columns = vec!["k".to_string()];
        columns.extend(self.eps_m.iter().map(|e| format!("eps_{}", eps_label(*e))));
        let rows = self
            .ks
            .iter()
            .zip(&self.recall)
            .map(|(k, row)| {
                std::iter::once(k.to_string())
                    .chain(row.iter().map(|r| format!("{r:.6}")))
                    .collect()
            })
            .collect();
        let mut tsv = Tsv::new(columns, rows);
        tsv.meta.push(("queries".into(), self.queries.to_string()));
        for (k, v) in meta {
            tsv.meta.push(((*k).to_string(), v.clone()));
        }
        tsv
    }

    /// Inverse of [`RecallTable::to_tsv`].
    pub fn from_tsv(tsv: &Tsv) -> Result<Self> {
        let bad = |m: String| Error::config(format!("recall table: {m}"));
        if tsv.columns.first().map(String::as_str) != Some("k") {
            return Err(bad("first column must be k".into()));
        }
        let eps_m = tsv.columns[1..]
            .iter()
            .map(|c| {
                c.strip_prefix("eps_")
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| bad(format!("bad column {c:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut ks = Vec::new();
        let mut recall = Vec::new();
        for row in &tsv.rows {
            ks.push(row[0].parse().map_err(|_| bad(format!("bad k {:?}", row[0])))?);
            recall.push(
                row[1..]
                    .iter()
                    .map(|v| v.parse::<f64>().map_err(|_| bad(format!("bad recall {v:?}"))))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let queries = tsv
            .get_meta("queries")
            .and_then(|q| q.parse().ok())
            .unwrap_or(0);
        Ok(Self {
            ks,
            eps_m,
            recall,
            queries,
        })
    }

    /// Aligned text mirroring the paper-style cells `r@k: e5/e10/e15`.
    pub fn to_text(&self) -> String {
        let eps: Vec<String> = self.eps_m.iter().map(|e| format!("{}m", eps_label(*e))).collect();
        let mut out = format!("{:<6} {}\n", "", eps.join("/"));
        for (k, row) in self.ks.iter().zip(&self.recall) {
            let cells: Vec<String> = row.iter().map(|r| format!("{r:.3}")).collect();
            let _ = writeln!(out, "{:<6} {}", format!("r@{k}:"), cells.join("/"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{cosine, Matrix, Rng};

    fn group(rows: &[&[f64]]) -> ViewGroup {
        ViewGroup::new(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    fn random_group(rng: &mut Rng, v: usize, d: usize) -> ViewGroup {
        let rows: Vec<Vec<f64>> = (0..v)
            .map(|_| crate::numerics::l2_normalize(&rng.normal_vec(d, 1.0)).unwrap())
            .collect();
        ViewGroup::new(Matrix::from_rows(&rows).unwrap()).unwrap()
    }

    #[test]
    fn concat_single_view_is_identity() {
        let g = group(&[&[0.6, 0.8]]);
        assert_eq!(concat_group(&g).as_slice(), &[0.6, 0.8]);
    }

    #[test]
    fn concat_cosine_is_mean_of_view_cosines() {
        let a = group(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let b = group(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]]);
        let c = concat_group(&a).similarity(&concat_group(&b));
        assert!((c - 0.5).abs() < 1e-12);
        let mut rng = Rng::new(2);
        let (x, y) = (random_group(&mut rng, 3, 5), random_group(&mut rng, 3, 5));
        let mean: f64 = (0..3).map(|i| cosine(x.view(i), y.view(i)).unwrap()).sum::<f64>() / 3.0;
        assert!((concat_group(&x).similarity(&concat_group(&y)) - mean).abs() < 1e-12);
    }

    #[test]
    fn index_rejects_duplicates_and_keeps_order() {
        let g = group(&[&[1.0, 0.0]]);
        assert!(build_index(vec![]).unwrap().is_empty());
        let dup = vec![("a".into(), (0.0, 0.0), g.clone()), ("a".into(), (1.0, 0.0), g.clone())];
        assert!(build_index(dup).is_err());
        let idx = build_index(vec![
            ("c".into(), (0.0, 0.0), g.clone()),
            ("a".into(), (0.0, 0.0), g.clone()),
            ("b".into(), (0.0, 0.0), g),
        ])
        .unwrap();
        let ids: Vec<&str> = idx.entries().iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["c", "a", "b"]);
    }

    #[test]
    fn topk_orders_scores_and_breaks_ties_by_id() {
        let s = |c: f64| group(&[&[c, (1.0 - c * c).sqrt()]]);
        let idx = build_index(vec![
            ("low".into(), (0.0, 0.0), s(0.1)),
            ("high".into(), (0.0, 0.0), s(0.9)),
            ("mid".into(), (0.0, 0.0), s(0.5)),
            ("b-tie".into(), (0.0, 0.0), s(0.5)),
        ])
        .unwrap();
        let q = Descriptor::new(&[1.0, 0.0]).unwrap();
        let ids: Vec<String> = query_topk(&idx, &q, 10).unwrap().into_iter().map(|h| h.id).collect();
        assert_eq!(ids, ["high", "b-tie", "mid", "low"]);
        assert_eq!(query_topk(&idx, &q, 2).unwrap().len(), 2);
        assert!(query_topk(&idx, &q, 0).is_err());
        assert!(query_topk(&Index::default(), &q, 3).unwrap().is_empty());
    }

    #[test]
    fn wrong_first_right_second_hand_case() {
        // Query sits at the origin but looks like the location 10 m away.
        let near = group(&[&[0.0, 1.0]]);
        let far = group(&[&[1.0, 0.0]]);
        let idx = build_index(vec![
            ("here".into(), (0.0, 0.0), near),
            ("there".into(), (10.0, 0.0), far.clone()),
        ])
        .unwrap();
        let q = Query {
            x_m: 0.0,
            y_m: 0.0,
            group: group(&[&[0.8, 0.6]]),
            truth: None,
        };
        let opts = RecallOptions {
            align_mode: AlignMode::None,
            ..RecallOptions::default()
        };
        let t = recall_table(&[q], &idx, &opts).unwrap();
        assert_eq!(t.get(1, 5.0), Some(0.0));
        assert_eq!(t.get(1, 10.0), Some(1.0));
        assert_eq!(t.get(1, 15.0), Some(1.0));
        for eps in [5.0, 10.0, 15.0] {
            assert_eq!(t.get(5, eps), Some(1.0));
        }
        assert!(t.is_monotone());
    }

    #[test]
    fn tsv_round_trip() {
        let t = RecallTable {
            ks: vec![1, 5],
            eps_m: vec![5.0, 7.5],
            recall: vec![vec![0.25, 0.5], vec![0.75, 1.0]],
            queries: 4,
        };
        let text = t.to_tsv(&[("config_hash", "abc".into())]).to_string();
        let back = RecallTable::from_tsv(&Tsv::parse(&text).unwrap()).unwrap();
        assert_eq!(back, t);
        assert!(t.to_text().contains("r@5:   0.750/1.000"));
    }

    #[test]
    fn oracle_mode_needs_truth() {
        let g = group(&[&[1.0, 0.0]]);
        let idx = build_index(vec![("a".into(), (0.0, 0.0), g.clone())]).unwrap();
        let q = Query {
            x_m: 0.0,
            y_m: 0.0,
            group: g,
            truth: None,
        };
        let opts = RecallOptions {
            align_mode: AlignMode::Oracle,
            ..RecallOptions::default()
        };
        assert!(recall_table(&[q], &idx, &opts).is_err());
    }
}
