//! Small trainable building blocks shared by the text and image heads.

use serde::{Deserialize, Serialize};

use crate::numerics::{Matrix, Rng, Tape, Var};

/// Visitor over named trainable tensors in a fixed order.
///
/// The order is part of the checkpoint format and of the optimizer state
/// layout, so implementations must never reorder entries.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Matrix));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix));

    fn named_tensors(&self) -> Vec<(String, Matrix)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, m| out.push((name, m.clone())));
        out
    }

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, m| n += m.len());
        n
    }

    /// All entries flattened in visit order.
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit("", &mut |_, m| out.extend_from_slice(m.as_slice()));
        out
    }

    /// Inverse of [`Parameters::flatten`].
    fn unflatten(&mut self, values: &[f64]) {
        let mut off = 0;
        self.visit_mut("", &mut |_, m| {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&values[off..off + n]);
            off += n;
        });
        assert_eq!(off, values.len(), "flat parameter vector length");
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Affine map `x W + b` with `W: in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    weight: Var,
    bias: Var,
}

impl Linear {
    /// Gaussian weights with standard deviation `scale / sqrt(in)`, zero bias.
    pub fn init(input: usize, output: usize, scale: f64, rng: &mut Rng) -> Self {
        Self {
            weight: rng.normal_matrix(input, output, scale / (input as f64).sqrt()),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(input, output),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundLinear {
        BoundLinear {
            weight: tape.param(self.weight.clone()),
            bias: tape.param(self.bias.clone()),
        }
    }

    /// Plain evaluation without a tape.
    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut y = x.matmul(&self.weight);
        for i in 0..y.rows() {
            for (v, b) in y.row_mut(i).iter_mut().zip(self.bias.as_slice()) {
                *v += b;
            }
        }
        y
    }
}

impl BoundLinear {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let xw = tape.matmul(x, self.weight);
        tape.add_row(xw, self.bias)
    }
}

impl Parameters for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Matrix)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Matrix,
    pub beta: Matrix,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLayerNorm {
    gamma: Var,
    beta: Var,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Matrix::filled(1, dim, 1.0),
            beta: Matrix::zeros(1, dim),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundLayerNorm {
        BoundLayerNorm {
            gamma: tape.param(self.gamma.clone()),
            beta: tape.param(self.beta.clone()),
        }
    }
}

impl BoundLayerNorm {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let n = tape.layer_norm_rows(x, LAYER_NORM_EPS);
        let g = tape.mul_row(n, self.gamma);
        tape.add_row(g, self.beta)
    }
}

impl Parameters for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Matrix)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

/// Shape of a pre-norm transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockShape {
    pub width: usize,
    pub heads: usize,
    pub ff_mult: usize,
}

/// Pre-norm block: `h = x + MHA(LN(x))`, `y = h + FFN(LN(h))`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    pub shape: BlockShape,
    pub ln_attn: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub ln_ff: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

pub struct BoundTransformerBlock {
    shape: BlockShape,
    ln_attn: BoundLayerNorm,
    query: BoundLinear,
    key: BoundLinear,
    value: BoundLinear,
    output: BoundLinear,
    ln_ff: BoundLayerNorm,
    ff_in: BoundLinear,
    ff_out: BoundLinear,
}

impl TransformerBlock {
    pub fn init(shape: BlockShape, scale: f64, rng: &mut Rng) -> Self {
        let w = shape.width;
        let hidden = w * shape.ff_mult;
        Self {
            shape,
            ln_attn: LayerNorm::new(w),
            query: Linear::init(w, w, scale, rng),
            key: Linear::init(w, w, scale, rng),
            value: Linear::init(w, w, scale, rng),
            output: Linear::init(w, w, scale, rng),
            ln_ff: LayerNorm::new(w),
            ff_in: Linear::init(w, hidden, scale, rng),
            ff_out: Linear::init(hidden, w, scale, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundTransformerBlock {
        BoundTransformerBlock {
            shape: self.shape,
            ln_attn: self.ln_attn.bind(tape),
            query: self.query.bind(tape),
            key: self.key.bind(tape),
            value: self.value.bind(tape),
            output: self.output.bind(tape),
            ln_ff: self.ln_ff.bind(tape),
            ff_in: self.ff_in.bind(tape),
            ff_out: self.ff_out.bind(tape),
        }
    }
}

impl BoundTransformerBlock {
    /// `x`: `seq x width`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let normed = self.ln_attn.forward(tape, x);
        let q = self.query.forward(tape, normed);
        let k = self.key.forward(tape, normed);
        let v = self.value.forward(tape, normed);
        let head_dim = self.shape.width / self.shape.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.shape.heads);
        for h in 0..self.shape.heads {
            let qh = tape.slice_cols(q, h * head_dim, head_dim);
            let kh = tape.slice_cols(k, h * head_dim, head_dim);
            let vh = tape.slice_cols(v, h * head_dim, head_dim);
            let kt = tape.transpose(kh);
            let logits = tape.matmul(qh, kt);
            let logits = tape.scale(logits, scale);
            let weights = tape.softmax_rows(logits);
            heads.push(tape.matmul(weights, vh));
        }
        let attended = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)
        };
        let attn_out = self.output.forward(tape, attended);
        let h = tape.add(x, attn_out);

        let normed = self.ln_ff.forward(tape, h);
        let hidden = self.ff_in.forward(tape, normed);
        let hidden = tape.gelu(hidden);
        let ff = self.ff_out.forward(tape, hidden);
        tape.add(h, ff)
    }
}

impl Parameters for TransformerBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Matrix)) {
        self.ln_attn.visit(&join(prefix, "ln_attn"), f);
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.output.visit(&join(prefix, "output"), f);
        self.ln_ff.visit(&join(prefix, "ln_ff"), f);
        self.ff_in.visit(&join(prefix, "ff_in"), f);
        self.ff_out.visit(&join(prefix, "ff_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        self.ln_attn.visit_mut(&join(prefix, "ln_attn"), f);
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
        self.ln_ff.visit_mut(&join(prefix, "ln_ff"), f);
        self.ff_in.visit_mut(&join(prefix, "ff_in"), f);
        self.ff_out.visit_mut(&join(prefix, "ff_out"), f);
    }
}

/// Fixed sinusoidal table, `len x dim`.
///
/// `pe[p, 2i] = sin(p / 10000^(2i/dim))`, `pe[p, 2i+1] = cos(...)`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Matrix {
    let mut pe = Matrix::zeros(len, dim);
    for p in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            pe[(p, i)] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}
