//! Text descriptor head.
//!
//! A description arrives as frozen-backbone token embeddings split into
//! sentences. Each sentence is max-pooled to one vector, lifted by a shared
//! MLP, tagged with a sinusoidal position, related to its neighbours by one
//! pre-norm transformer block, then mean-pooled and L2-normalized.

use serde::{Deserialize, Serialize};

use crate::descriptor::Descriptor;
use crate::error::{Error, Result};
use crate::layers::{
    join, sinusoidal_positions, BlockShape, BoundLinear, BoundTransformerBlock, Linear,
    Parameters, TransformerBlock,
};
use crate::numerics::{Matrix, Rng, Tape, Var};

/// Token embeddings of one description plus its sentence boundaries.
///
/// `sentence_breaks` holds the exclusive end index of every sentence; the
/// last break equals the token count.
#[derive(Clone, Debug, PartialEq)]
pub struct TextTokenSequence {
    tokens: Matrix,
    sentence_breaks: Vec<usize>,
}

impl TextTokenSequence {
    pub fn new(tokens: Matrix, sentence_breaks: Vec<usize>) -> Result<Self> {
        let n = tokens.rows();
        if n == 0 || tokens.cols() == 0 {
            return Err(Error::domain("text sequence needs at least one token"));
        }
        if sentence_breaks.is_empty() {
            return Err(Error::domain("text sequence needs at least one sentence"));
        }
        let mut prev = 0;
        for &b in &sentence_breaks {
            if b <= prev || b > n {
                return Err(Error::domain(format!(
                    "sentence breaks {sentence_breaks:?} are not strictly increasing within 1..={n}"
                )));
            }
            prev = b;
        }
        if prev != n {
            return Err(Error::domain(format!(
                "last sentence break {prev} must equal token count {n}"
            )));
        }
        if !tokens.is_finite() {
            return Err(Error::domain("text tokens contain non-finite values"));
        }
        Ok(Self {
            tokens,
            sentence_breaks,
        })
    }

    /// Convenience constructor from row vectors.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], sentence_breaks: Vec<usize>) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?, sentence_breaks)
    }

    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    pub fn sentence_breaks(&self) -> &[usize] {
        &self.sentence_breaks
    }

    pub fn token_count(&self) -> usize {
        self.tokens.rows()
    }

    pub fn token_dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn sentence_count(&self) -> usize {
        self.sentence_breaks.len()
    }

    /// Token index ranges, one per sentence.
    pub fn sentences(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        let starts = std::iter::once(0).chain(self.sentence_breaks.iter().copied());
        starts.zip(self.sentence_breaks.iter().copied()).map(|(s, e)| s..e)
    }
}

/// Elementwise maximum over each sentence's tokens: `sentences x d_t`.
pub fn sentence_maxpool(seq: &TextTokenSequence) -> Matrix {
    let d = seq.token_dim();
    let mut out = Matrix::zeros(seq.sentence_count(), d);
    for (s, range) in seq.sentences().enumerate() {
        let row = out.row_mut(s);
        row.copy_from_slice(seq.tokens.row(range.start));
        for t in range.skip(1) {
            for (m, x) in row.iter_mut().zip(seq.tokens.row(t)) {
                *m = m.max(*x);
            }
        }
    }
    out
}

/// Which blocks surround the max-pool + MLP stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextHeadVariant {
    /// MLP + max-pool only.
    M,
    /// MLP + max-pool, then a transformer block over sentences.
    #[default]
    MT2,
    /// A token-width transformer block over sentence vectors before the MLP.
    T1M,
    /// Both blocks.
    T1MT2,
}

impl TextHeadVariant {
    pub const ALL: [TextHeadVariant; 4] = [Self::T1MT2, Self::T1M, Self::M, Self::MT2];

    pub fn label(self) -> &'static str {
        match self {
            Self::M => "M",
            Self::MT2 => "M+T2",
            Self::T1M => "T1+M",
            Self::T1MT2 => "T1+M+T2",
        }
    }

    fn has_pre(self) -> bool {
        matches!(self, Self::T1M | Self::T1MT2)
    }

    fn has_post(self) -> bool {
        matches!(self, Self::MT2 | Self::T1MT2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextHeadConfig {
    /// Width of the frozen token embeddings.
    pub token_dim: usize,
    /// MLP hidden width.
    pub hidden_dim: usize,
    /// Output descriptor width `D`.
    pub model_dim: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub variant: TextHeadVariant,
}

impl Default for TextHeadConfig {
    fn default() -> Self {
        Self {
            token_dim: 128,
            hidden_dim: 1024,
            model_dim: 64,
            heads: 4,
            ff_mult: 4,
            variant: TextHeadVariant::MT2,
        }
    }
}

impl TextHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.token_dim == 0 || self.hidden_dim == 0 || self.model_dim == 0 {
            return Err(Error::config("text head dimensions must be positive"));
        }
        if self.heads == 0 || self.ff_mult == 0 {
            return Err(Error::config("text head needs at least one head and ff_mult >= 1"));
        }
        if self.variant.has_post() && self.model_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "model width {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.variant.has_pre() && self.token_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "token width {} is not divisible by {} heads",
                self.token_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Trainable weights of the text head.
#[derive(Clone, Debug, PartialEq)]
pub struct TextHeadParams {
    pub config: TextHeadConfig,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
    pub pre_block: Option<TransformerBlock>,
    pub post_block: Option<TransformerBlock>,
}

pub struct BoundTextHead {
    config: TextHeadConfig,
    mlp_in: BoundLinear,
    mlp_out: BoundLinear,
    pre_block: Option<BoundTransformerBlock>,
    post_block: Option<BoundTransformerBlock>,
}

impl TextHeadParams {
    pub fn init(config: TextHeadConfig, scale: f64, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let pre_block = config.variant.has_pre().then(|| {
            TransformerBlock::init(
                BlockShape {
                    width: config.token_dim,
                    heads: config.heads,
                    ff_mult: config.ff_mult,
                },
                scale,
                rng,
            )
        });
        let mlp_in = Linear::init(config.token_dim, config.hidden_dim, scale, rng);
        let mlp_out = Linear::init(config.hidden_dim, config.model_dim, scale, rng);
        let post_block = config.variant.has_post().then(|| {
            TransformerBlock::init(
                BlockShape {
                    width: config.model_dim,
                    heads: config.heads,
                    ff_mult: config.ff_mult,
                },
                scale,
                rng,
            )
        });
        Ok(Self {
            config,
            mlp_in,
            mlp_out,
            pre_block,
            post_block,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.config.model_dim
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundTextHead {
        BoundTextHead {
            config: self.config,
            pre_block: self.pre_block.as_ref().map(|b| b.bind(tape)),
            mlp_in: self.mlp_in.bind(tape),
            mlp_out: self.mlp_out.bind(tape),
            post_block: self.post_block.as_ref().map(|b| b.bind(tape)),
        }
    }
}

impl Parameters for TextHeadParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Matrix)) {
        if let Some(b) = &self.pre_block {
            b.visit(&join(prefix, "pre_block"), f);
        }
        self.mlp_in.visit(&join(prefix, "mlp_in"), f);
        self.mlp_out.visit(&join(prefix, "mlp_out"), f);
        if let Some(b) = &self.post_block {
            b.visit(&join(prefix, "post_block"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        if let Some(b) = &mut self.pre_block {
            b.visit_mut(&join(prefix, "pre_block"), f);
        }
        self.mlp_in.visit_mut(&join(prefix, "mlp_in"), f);
        self.mlp_out.visit_mut(&join(prefix, "mlp_out"), f);
        if let Some(b) = &mut self.post_block {
            b.visit_mut(&join(prefix, "post_block"), f);
        }
    }
}

impl BoundTextHead {
    /// Records the head on `tape`; returns a `1 x D` unit row.
    pub fn forward(&self, tape: &mut Tape, seq: &TextTokenSequence) -> Result<Var> {
        if seq.token_dim() != self.config.token_dim {
            return Err(Error::config(format!(
                "text tokens have width {}, head expects {}",
                seq.token_dim(),
                self.config.token_dim
            )));
        }
        let sentences = seq.sentence_count();
        let pooled = tape.constant(sentence_maxpool(seq));
        let mut x = pooled;
        if let Some(block) = &self.pre_block {
            let pe = tape.constant(sinusoidal_positions(sentences, self.config.token_dim));
            let with_pos = tape.add(x, pe);
            x = block.forward(tape, with_pos);
        }
        let hidden = self.mlp_in.forward(tape, x);
        let hidden = tape.gelu(hidden);
        x = self.mlp_out.forward(tape, hidden);
        if let Some(block) = &self.post_block {
            let pe = tape.constant(sinusoidal_positions(sentences, self.config.model_dim));
            let with_pos = tape.add(x, pe);
            x = block.forward(tape, with_pos);
        }
        let pooled = tape.mean_rows(x);
        Ok(tape.l2_normalize_rows(pooled))
    }
}

/// Encodes one description into a unit-norm descriptor.
pub fn encode_text(seq: &TextTokenSequence, params: &TextHeadParams) -> Result<Descriptor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = bound.forward(&mut tape, seq)?;
    let v = tape.value(out);
    if !v.is_finite() {
        return Err(Error::domain("text descriptor is not finite"));
    }
    Descriptor::from_unit(v.as_slice().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{cosine, grad_check};

    fn tiny_config(variant: TextHeadVariant) -> TextHeadConfig {
        TextHeadConfig {
            token_dim: 4,
            hidden_dim: 6,
            model_dim: 8,
            heads: 2,
            ff_mult: 2,
            variant,
        }
    }

    fn random_seq(rng: &mut Rng, breaks: Vec<usize>, dim: usize) -> TextTokenSequence {
        let n = *breaks.last().unwrap();
        TextTokenSequence::new(rng.normal_matrix(n, dim, 1.0), breaks).unwrap()
    }

    #[test]
    fn maxpool_examples() {
        let one = TextTokenSequence::from_rows(&[[1.0, 5.0], [3.0, 2.0]], vec![2]).unwrap();
        assert_eq!(sentence_maxpool(&one).to_rows(), vec![vec![3.0, 5.0]]);

        let single = TextTokenSequence::from_rows(&[[-1.0, 0.5]], vec![1]).unwrap();
        assert_eq!(sentence_maxpool(&single).to_rows(), vec![vec![-1.0, 0.5]]);

        let two = TextTokenSequence::from_rows(
            &[[1.0, 0.0], [0.0, 1.0], [2.0, 2.0], [-1.0, 3.0]],
            vec![2, 4],
        )
        .unwrap();
        assert_eq!(
            sentence_maxpool(&two).to_rows(),
            vec![vec![1.0, 1.0], vec![2.0, 3.0]]
        );
    }

    #[test]
    fn invalid_breaks_rejected() {
        let rows = [[0.0, 1.0], [1.0, 0.0], [1.0, 1.0]];
        assert!(TextTokenSequence::from_rows(&rows, vec![]).is_err());
        assert!(TextTokenSequence::from_rows(&rows, vec![2]).is_err());
        assert!(TextTokenSequence::from_rows(&rows, vec![2, 2, 3]).is_err());
        assert!(TextTokenSequence::from_rows(&rows, vec![0, 3]).is_err());
        assert!(TextTokenSequence::from_rows(&rows, vec![1, 3]).is_ok());
    }

    #[test]
    fn output_is_unit_norm_for_every_variant() {
        let mut rng = Rng::new(11);
        for variant in TextHeadVariant::ALL {
            let params = TextHeadParams::init(tiny_config(variant), 1.0, &mut rng).unwrap();
            let seq = random_seq(&mut rng, vec![3, 5, 9], 4);
            let d = encode_text(&seq, &params).unwrap();
            assert_eq!(d.dim(), 8);
            let n: f64 = d.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12, "{variant:?}: {n}");
        }
    }

    #[test]
    fn within_sentence_permutation_is_exact() {
        let mut rng = Rng::new(12);
        let params = TextHeadParams::init(tiny_config(TextHeadVariant::MT2), 1.0, &mut rng).unwrap();
        let seq = random_seq(&mut rng, vec![4, 7], 4);
        // reverse the first sentence's tokens
        let order = [3, 2, 1, 0, 4, 5, 6];
        let permuted =
            TextTokenSequence::new(seq.tokens().select_rows(&order), vec![4, 7]).unwrap();
        let a = encode_text(&seq, &params).unwrap();
        let b = encode_text(&permuted, &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sentence_order_matters() {
        let mut rng = Rng::new(13);
        let params = TextHeadParams::init(tiny_config(TextHeadVariant::MT2), 1.0, &mut rng).unwrap();
        let seq = random_seq(&mut rng, vec![3, 6], 4);
        let swapped =
            TextTokenSequence::new(seq.tokens().select_rows(&[3, 4, 5, 0, 1, 2]), vec![3, 6])
                .unwrap();
        let a = encode_text(&seq, &params).unwrap();
        let b = encode_text(&swapped, &params).unwrap();
        assert!(cosine(a.as_slice(), b.as_slice()).unwrap() < 1.0 - 1e-9);
    }

    #[test]
    fn token_width_mismatch_is_config_error() {
        let mut rng = Rng::new(14);
        let params = TextHeadParams::init(tiny_config(TextHeadVariant::MT2), 1.0, &mut rng).unwrap();
        let seq = random_seq(&mut rng, vec![2], 5);
        assert!(matches!(encode_text(&seq, &params), Err(Error::Config(_))));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(15);
        for variant in TextHeadVariant::ALL {
            let params = TextHeadParams::init(tiny_config(variant), 1.0, &mut rng).unwrap();
            let seq = random_seq(&mut rng, vec![2, 5, 6], 4);
            let probe = rng.normal_matrix(1, 8, 1.0);
            let mut f = |p: &[f64]| {
                let mut local = params.clone();
                local.unflatten(p);
                let mut tape = Tape::new();
                let bound = local.bind(&mut tape);
                let out = bound.forward(&mut tape, &seq).unwrap();
                let w = tape.constant(probe.transpose());
                let loss = tape.matmul(out, w);
                let grads = tape.backward(loss);
                let g = tape.flat_param_grads(&grads);
                (tape.value(loss).item(), g)
            };
            let r = grad_check(&mut f, &params.flatten(), 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-6, "{variant:?}: {}", r.max_rel_error);
        }
    }
}
