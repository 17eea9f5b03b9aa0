//! Cascaded cross-attention cosine alignment.
//!
//! At inference a location's text descriptors and image descriptors arrive
//! as two groups of up to four views whose slot order need not agree. Every
//! candidate reordering of the image group is fused with the text group by
//! stacked parameter-free cross-attention, scored by a sum of row-wise
//! cosines, and the best-scoring order wins.

use serde::{Deserialize, Serialize};

use crate::descriptor::Descriptor;
use crate::error::{Error, Result};
use crate::numerics::{cosine, dot, l2_normalize, Matrix};

/// Largest group size accepted by the exhaustive search.
pub const MAX_FULL_VIEWS: usize = 4;

/// `V` unit-norm descriptors in slot order, `1 <= V <= 4`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewGroup {
    rows: Matrix,
}

impl ViewGroup {
    pub fn new(rows: Matrix) -> Result<Self> {
        let v = rows.rows();
        if v == 0 || v > MAX_FULL_VIEWS {
            return Err(Error::domain(format!("view group must hold 1..=4 views, got {v}")));
        }
        for (i, r) in rows.row_iter().enumerate() {
            let n = dot(r, r).sqrt();
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::domain(format!("view {i} has norm {n}, expected 1")));
            }
        }
        Ok(Self { rows })
    }

    pub fn from_descriptors(views: &[Descriptor]) -> Result<Self> {
        let rows: Vec<&[f64]> = views.iter().map(Descriptor::as_slice).collect();
        Self::new(Matrix::from_rows(&rows)?)
    }

    pub fn views(&self) -> usize {
        self.rows.rows()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.rows
    }

    pub fn view(&self, i: usize) -> &[f64] {
        self.rows.row(i)
    }

    /// Output slot `r` holds input slot `order[r]`.
    pub fn reordered(&self, order: &[usize]) -> Self {
        Self {
            rows: self.rows.select_rows(order),
        }
    }

    /// First `n` views.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.views() {
            return Err(Error::domain(format!(
                "cannot keep {n} of {} views",
                self.views()
            )));
        }
        Ok(Self {
            rows: self.rows.select_rows(&(0..n).collect::<Vec<_>>()),
        })
    }
}

/// Which terms enter the alignment score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CccaVariant {
    /// `cos(Q, H) + cos(Q, M) + cos(M, H)`.
    #[default]
    Full,
    /// `cos(Q, M)` only.
    WithoutCascade,
    /// `cos(Q, H) + cos(M, H)` only.
    WithoutCosine,
}

impl CccaVariant {
    pub const ALL: [CccaVariant; 3] = [Self::WithoutCascade, Self::WithoutCosine, Self::Full];

    pub fn label(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::WithoutCascade => "w/o cascade",
            Self::WithoutCosine => "w/o cosine",
        }
    }
}

/// Candidate orderings searched by [`align`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMode {
    /// All `V!` permutations.
    #[default]
    Full,
    /// The `V` rotations only.
    Cyclic,
}

/// Optional learned projections applied to queries, keys and values.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionProjections {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CccaConfig {
    /// Number of stacked attention layers.
    pub depth: usize,
    pub variant: CccaVariant,
    pub mode: SearchMode,
    pub projections: Option<AttentionProjections>,
}

impl Default for CccaConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            variant: CccaVariant::Full,
            mode: SearchMode::Full,
            projections: None,
        }
    }
}

/// Best ordering of the image group and the score of every candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    /// Slot `r` of the aligned group is slot `permutation[r]` of the input.
    pub permutation: Vec<usize>,
    pub score: f64,
    pub candidates: Vec<(Vec<usize>, f64)>,
}

fn check_pair(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.rows() != b.rows() {
        return Err(Error::domain(format!(
            "cross-attention needs equal view counts, got {} and {}",
            a.rows(),
            b.rows()
        )));
    }
    if a.cols() != b.cols() {
        return Err(Error::domain(format!(
            "cross-attention needs equal widths, got {} and {}",
            a.cols(),
            b.cols()
        )));
    }
    Ok(())
}

/// `softmax(A B^T / sqrt(D)) B`: rows of `a` query, rows of `b` are keys
/// and values.
pub fn cross_attention(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    cross_attention_with(a, b, None)
}

fn cross_attention_with(
    a: &Matrix,
    b: &Matrix,
    proj: Option<&AttentionProjections>,
) -> Result<Matrix> {
    check_pair(a, b)?;
    let (q, k, v) = match proj {
        Some(p) => (a.matmul(&p.query), b.matmul(&p.key), b.matmul(&p.value)),
        None => (a.clone(), b.clone(), b.clone()),
    };
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut weights = q.matmul_t(&k).scale(scale);
    for i in 0..weights.rows() {
        let r = weights.row_mut(i);
        let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for x in r.iter_mut() {
            *x = (*x - m).exp();
            s += *x;
        }
        for x in r.iter_mut() {
            *x /= s;
        }
    }
    Ok(weights.matmul(&v))
}

/// Layer 1 attends from `m` into `q`; each later layer attends from `q`
/// into the previous output. Rows of the result are unit norm.
pub fn cascaded_fuse(m: &ViewGroup, q: &ViewGroup, depth: usize) -> Result<Matrix> {
    fuse(m.matrix(), q.matrix(), depth, None)
}

fn fuse(
    m: &Matrix,
    q: &Matrix,
    depth: usize,
    proj: Option<&AttentionProjections>,
) -> Result<Matrix> {
    if depth == 0 {
        return Err(Error::domain("cascade depth must be at least 1"));
    }
    let mut h = cross_attention_with(m, q, proj)?;
    for _ in 1..depth {
        h = cross_attention_with(q, &h, proj)?;
    }
    let mut out = h.clone();
    for i in 0..h.rows() {
        out.row_mut(i).copy_from_slice(&l2_normalize(h.row(i))?);
    }
    Ok(out)
}

/// Mean over views of `cos(Q, H) + cos(Q, M) + cos(M, H)`, in `[-3, 3]`.
pub fn ccca_similarity(m: &ViewGroup, q: &ViewGroup) -> Result<f64> {
    similarity(m, q, &CccaConfig::default())
}

/// Alignment score under an explicit configuration.
pub fn similarity(m: &ViewGroup, q: &ViewGroup, config: &CccaConfig) -> Result<f64> {
    check_pair(m.matrix(), q.matrix())?;
    let v = m.views();
    let mut total = 0.0;
    let h = match config.variant {
        CccaVariant::WithoutCascade => None,
        _ => Some(fuse(
            m.matrix(),
            q.matrix(),
            config.depth,
            config.projections.as_ref(),
        )?),
    };
    for r in 0..v {
        let (mr, qr) = (m.view(r), q.view(r));
        match (&h, config.variant) {
            (None, _) => total += cosine(qr, mr)?,
            (Some(h), CccaVariant::WithoutCosine) => {
                total += cosine(qr, h.row(r))? + cosine(mr, h.row(r))?;
            }
            (Some(h), _) => {
                total += cosine(qr, h.row(r))? + cosine(qr, mr)? + cosine(mr, h.row(r))?;
            }
        }
    }
    Ok(total / v as f64)
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        out.push(p.clone());
        // next lexicographic permutation
        let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| p[i] < p[i + 1]) else {
            return out;
        };
        let j = (i + 1..n).rev().find(|&j| p[j] > p[i]).expect("successor exists");
        p.swap(i, j);
        p[i + 1..].reverse();
    }
}

/// The `n` rotations `[k, k+1, ..]`, in lexicographic order.
pub fn rotations(n: usize) -> Vec<Vec<usize>> {
    (0..n).map(|k| (0..n).map(|i| (k + i) % n).collect()).collect()
}

/// Finds the reordering of `q` that best matches `m`.
///
/// Ties resolve to the lexicographically smallest permutation.
pub fn align(m: &ViewGroup, q: &ViewGroup, config: &CccaConfig) -> Result<Alignment> {
    check_pair(m.matrix(), q.matrix())?;
    let v = m.views();
    let candidates = match config.mode {
        SearchMode::Full => {
            if v > MAX_FULL_VIEWS {
                return Err(Error::domain(format!(
                    "refusing a full search over {v} views"
                )));
            }
            permutations(v)
        }
        SearchMode::Cyclic => rotations(v),
    };
    let mut scored = Vec::with_capacity(candidates.len());
    let mut best: Option<(usize, f64)> = None;
    for (ci, perm) in candidates.into_iter().enumerate() {
        let s = similarity(m, &q.reordered(&perm), config)?;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((ci, s));
        }
        scored.push((perm, s));
    }
    let (bi, score) = best.expect("at least one candidate");
    Ok(Alignment {
        permutation: scored[bi].0.clone(),
        score,
        candidates: scored,
    })
}

/// Inverse of a permutation.
pub fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
