//! Optimal-transport aggregation of local image tokens.
//!
//! A two-layer score network maps every local token to one affinity per
//! cluster. Log-domain Sinkhorn scaling turns the affinities into a
//! transport plan with uniform marginals, a learnable temperature softens
//! each token's row, and every cluster descriptor is the plan-weighted sum
//! of projected tokens. The clusters are flattened in order and
//! L2-normalized.

use serde::{Deserialize, Serialize};

use crate::descriptor::Descriptor;
use crate::error::{Error, Result};
use crate::layers::{join, BoundLinear, Linear, Parameters};
use crate::numerics::{softplus, Matrix, Rng, Tape, Var};

/// Local tokens of one view plus the optional global token.
///
/// The global token is carried through ingestion but does not enter the
/// descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTokenSet {
    local_tokens: Matrix,
    global_token: Option<Vec<f64>>,
}

impl ImageTokenSet {
    pub fn new(local_tokens: Matrix, global_token: Option<Vec<f64>>) -> Result<Self> {
        if local_tokens.rows() == 0 || local_tokens.cols() == 0 {
            return Err(Error::domain("image token set needs at least one local token"));
        }
        if !local_tokens.is_finite() {
            return Err(Error::domain("image tokens contain non-finite values"));
        }
        if let Some(g) = &global_token {
            if g.len() != local_tokens.cols() {
                return Err(Error::domain(format!(
                    "global token width {} differs from local width {}",
                    g.len(),
                    local_tokens.cols()
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::domain("global token contains non-finite values"));
            }
        }
        Ok(Self {
            local_tokens,
            global_token,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?, None)
    }

    pub fn local_tokens(&self) -> &Matrix {
        &self.local_tokens
    }

    pub fn global_token(&self) -> Option<&[f64]> {
        self.global_token.as_deref()
    }

    pub fn token_count(&self) -> usize {
        self.local_tokens.rows()
    }

    pub fn token_dim(&self) -> usize {
        self.local_tokens.cols()
    }

    /// Same set with local tokens reordered.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            local_tokens: self.local_tokens.select_rows(order),
            global_token: self.global_token.clone(),
        }
    }
}

/// Whether higher scores attract mass (affinity) or repel it (cost).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreSign {
    #[default]
    Affinity,
    Cost,
}

/// How the converged plan is turned into assignment weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemperatureMode {
    /// Learnable softening `tau = softplus(theta)`.
    #[default]
    Learnable,
    /// Plain Sinkhorn plan `exp(log_plan)`.
    Removed,
}

/// How local tokens become one descriptor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    OptimalTransport,
    /// Parameter-free elementwise max over tokens.
    MaxPool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregatorConfig {
    pub token_dim: usize,
    pub hidden_dim: usize,
    pub clusters: usize,
    pub cluster_dim: usize,
    pub reg: f64,
    pub score_sign: ScoreSign,
    pub temperature: TemperatureMode,
    pub aggregation: Aggregation,
    /// Unrolled iterations while training.
    pub train_iters: usize,
    /// Iteration cap and marginal tolerance at inference.
    pub eval_iters: usize,
    pub eval_tol: f64,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self {
            token_dim: 128,
            hidden_dim: 32,
            clusters: 8,
            cluster_dim: 8,
            reg: 0.1,
            score_sign: ScoreSign::Affinity,
            temperature: TemperatureMode::Learnable,
            aggregation: Aggregation::OptimalTransport,
            train_iters: 50,
            eval_iters: 100,
            eval_tol: 1e-6,
        }
    }
}

impl AggregatorConfig {
    pub fn descriptor_dim(&self) -> usize {
        match self.aggregation {
            Aggregation::OptimalTransport => self.clusters * self.cluster_dim,
            Aggregation::MaxPool => self.token_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.token_dim == 0 || self.hidden_dim == 0 || self.clusters == 0 || self.cluster_dim == 0
        {
            return Err(Error::config("aggregator dimensions must be positive"));
        }
        if !(self.reg > 0.0) || !self.reg.is_finite() {
            return Err(Error::config(format!("reg must be positive, got {}", self.reg)));
        }
        if self.train_iters == 0 || self.eval_iters == 0 {
            return Err(Error::config("Sinkhorn needs at least one iteration"));
        }
        Ok(())
    }
}

/// `n x C` token-to-cluster scores together with the regularization.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub scores: Matrix,
    pub reg: f64,
    pub sign: ScoreSign,
}

impl ScoreMatrix {
    pub fn new(scores: Matrix, reg: f64) -> Result<Self> {
        if !(reg > 0.0) {
            return Err(Error::domain(format!("reg must be positive, got {reg}")));
        }
        if !scores.is_finite() {
            return Err(Error::domain("score matrix has non-finite entries"));
        }
        Ok(Self {
            scores,
            reg,
            sign: ScoreSign::Affinity,
        })
    }

    /// `S / reg`, negated for cost semantics.
    pub fn regularized(&self) -> Matrix {
        let s = match self.sign {
            ScoreSign::Affinity => 1.0,
            ScoreSign::Cost => -1.0,
        };
        self.scores.scale(s / self.reg)
    }
}

/// Nonnegative `n x C` assignment with its marginals.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub plan: Matrix,
    pub source: Vec<f64>,
    pub target: Vec<f64>,
}

impl TransportPlan {
    /// Largest absolute deviation of row sums from `source` and column sums
    /// from `target`.
    pub fn marginal_error(&self) -> f64 {
        marginal_error(&self.plan, &self.source, &self.target)
    }
}

fn marginal_error(plan: &Matrix, a: &[f64], b: &[f64]) -> f64 {
    let rows = plan.row_sums().into_iter().zip(a).map(|(s, t)| (s - t).abs());
    let cols = plan.col_sums().into_iter().zip(b).map(|(s, t)| (s - t).abs());
    rows.chain(cols).fold(0.0, f64::max)
}

/// Result of log-domain Sinkhorn scaling.
#[derive(Clone, Debug)]
pub struct SinkhornSolution {
    /// Row duals, length `n`.
    pub u: Vec<f64>,
    /// Column duals, length `C`.
    pub v: Vec<f64>,
    /// `S_reg + u (+) v`.
    pub log_plan: Matrix,
    pub iterations: usize,
    pub converged: bool,
    pub marginal_error: f64,
}

impl SinkhornSolution {
    pub fn plan(&self) -> Matrix {
        self.log_plan.map(f64::exp)
    }
}

pub fn uniform_marginal(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

fn check_marginal(name: &str, m: &[f64]) -> Result<()> {
    if m.is_empty() || m.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::domain(format!("{name} marginal must be strictly positive")));
    }
    let s: f64 = m.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::domain(format!("{name} marginal sums to {s}, not 1")));
    }
    Ok(())
}

pub(crate) struct TapeSinkhorn {
    pub log_plan: Var,
    pub u: Var,
    pub v: Var,
    pub iterations: usize,
    pub converged: bool,
    pub marginal_error: f64,
}

/// Log-domain Sinkhorn recorded on a tape.
///
/// Alternates `u = log a - lse_j(S_reg + v)` and
/// `v = log b - lse_i(S_reg + u)`. With `tol > 0` the loop stops once both
/// marginals of `exp(log_plan)` are within `tol`; with `tol == 0` exactly
/// `iters` iterations run.
pub(crate) fn sinkhorn_on_tape(
    tape: &mut Tape,
    s_reg: Var,
    a: &[f64],
    b: &[f64],
    iters: usize,
    tol: f64,
) -> TapeSinkhorn {
    let log_a = tape.constant(Matrix::column_vector(&a.iter().map(|x| x.ln()).collect::<Vec<_>>()));
    let log_b = tape.constant(Matrix::row_vector(&b.iter().map(|x| x.ln()).collect::<Vec<_>>()));
    let mut v = tape.constant(Matrix::zeros(1, b.len()));
    let mut u = tape.constant(Matrix::zeros(a.len(), 1));
    let mut iterations = 0;
    let mut converged = false;
    for _ in 0..iters {
        let shifted = tape.add_row(s_reg, v);
        let lse = tape.logsumexp_rows(shifted);
        u = tape.sub(log_a, lse);
        let shifted = tape.add_col(s_reg, u);
        let lse = tape.logsumexp_cols(shifted);
        v = tape.sub(log_b, lse);
        iterations += 1;
        if tol > 0.0 {
            let err = plan_error(tape.value(s_reg), tape.value(u), tape.value(v), a, b);
            if err < tol {
                converged = true;
                break;
            }
        }
    }
    let with_u = tape.add_col(s_reg, u);
    let log_plan = tape.add_row(with_u, v);
    let marginal_error = marginal_error(&tape.value(log_plan).map(f64::exp), a, b);
    if !converged {
        converged = marginal_error < tol;
    }
    TapeSinkhorn {
        log_plan,
        u,
        v,
        iterations,
        converged,
        marginal_error,
    }
}

fn plan_error(s_reg: &Matrix, u: &Matrix, v: &Matrix, a: &[f64], b: &[f64]) -> f64 {
    let (n, c) = s_reg.shape();
    let mut rows = vec![0.0; n];
    let mut cols = vec![0.0; c];
    for i in 0..n {
        let ui = u.as_slice()[i];
        for j in 0..c {
            let p = (s_reg[(i, j)] + ui + v.as_slice()[j]).exp();
            rows[i] += p;
            cols[j] += p;
        }
    }
    let r = rows.iter().zip(a).map(|(s, t)| (s - t).abs());
    let k = cols.iter().zip(b).map(|(s, t)| (s - t).abs());
    r.chain(k).fold(0.0, f64::max)
}

/// Entropic optimal transport between token weights `a` and cluster
/// weights `b`, treating `scores` as affinities.
pub fn sinkhorn(
    scores: &ScoreMatrix,
    a: &[f64],
    b: &[f64],
    iters: usize,
    tol: f64,
) -> Result<SinkhornSolution> {
    check_marginal("source", a)?;
    check_marginal("target", b)?;
    if a.len() != scores.scores.rows() || b.len() != scores.scores.cols() {
        return Err(Error::domain(format!(
            "marginals of length {}/{} do not fit a {}x{} score matrix",
            a.len(),
            b.len(),
            scores.scores.rows(),
            scores.scores.cols()
        )));
    }
    if !(scores.reg > 0.0) {
        return Err(Error::domain("reg must be positive"));
    }
    if iters == 0 {
        return Err(Error::domain("Sinkhorn needs at least one iteration"));
    }
    let mut tape = Tape::new();
    let s_reg = tape.constant(scores.regularized());
    let sol = sinkhorn_on_tape(&mut tape, s_reg, a, b, iters, tol);
    Ok(SinkhornSolution {
        u: tape.value(sol.u).as_slice().to_vec(),
        v: tape.value(sol.v).as_slice().to_vec(),
        log_plan: tape.value(sol.log_plan).clone(),
        iterations: sol.iterations,
        converged: sol.converged,
        marginal_error: sol.marginal_error,
    })
}

/// `P[i, j] = a_i * softmax_j(log_plan[i, :] / tau)`.
///
/// At `tau = 1` and converged duals this reproduces `exp(log_plan)`.
pub fn temper_plan(log_plan: &Matrix, a: &[f64], tau: f64) -> Result<TransportPlan> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::domain(format!("temperature must be positive, got {tau}")));
    }
    if a.len() != log_plan.rows() {
        return Err(Error::domain("source marginal length differs from plan rows"));
    }
    let mut tape = Tape::new();
    let lp = tape.constant(log_plan.clone());
    let t = tape.constant(Matrix::scalar(tau));
    let a_col = tape.constant(Matrix::column_vector(a));
    let p = temper_on_tape(&mut tape, lp, t, a_col);
    let plan = tape.value(p).clone();
    let target = plan.col_sums();
    Ok(TransportPlan {
        plan,
        source: a.to_vec(),
        target,
    })
}

fn temper_on_tape(tape: &mut Tape, log_plan: Var, tau: Var, a_col: Var) -> Var {
    let scaled = tape.div_scalar(log_plan, tau);
    let rows = tape.softmax_rows(scaled);
    tape.mul_col(rows, a_col)
}

/// Trainable weights of the image head.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatorParams {
    pub config: AggregatorConfig,
    pub score_in: Linear,
    pub score_out: Linear,
    pub projection: Linear,
    /// `tau = softplus(theta_tau)`, a `1 x 1` matrix.
    pub theta_tau: Matrix,
}

pub struct BoundAggregator {
    config: AggregatorConfig,
    score_in: BoundLinear,
    score_out: BoundLinear,
    projection: BoundLinear,
    theta_tau: Var,
}

/// `softplus^-1(1)`, so a fresh model starts at `tau = 1`.
pub const THETA_TAU_UNIT: f64 = 0.541_324_854_612_918_1;

impl AggregatorParams {
    pub fn init(config: AggregatorConfig, scale: f64, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            score_in: Linear::init(config.token_dim, config.hidden_dim, scale, rng),
            score_out: Linear::init(config.hidden_dim, config.clusters, scale, rng),
            projection: Linear::init(config.token_dim, config.cluster_dim, scale, rng),
            theta_tau: Matrix::scalar(THETA_TAU_UNIT),
        })
    }

    pub fn tau(&self) -> f64 {
        softplus(self.theta_tau.item())
    }

    pub fn output_dim(&self) -> usize {
        self.config.descriptor_dim()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundAggregator {
        BoundAggregator {
            config: self.config,
            score_in: self.score_in.bind(tape),
            score_out: self.score_out.bind(tape),
            projection: self.projection.bind(tape),
            theta_tau: tape.param(self.theta_tau.clone()),
        }
    }
}

impl Parameters for AggregatorParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Matrix)) {
        self.score_in.visit(&join(prefix, "score_in"), f);
        self.score_out.visit(&join(prefix, "score_out"), f);
        self.projection.visit(&join(prefix, "projection"), f);
        f(join(prefix, "theta_tau"), &self.theta_tau);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        self.score_in.visit_mut(&join(prefix, "score_in"), f);
        self.score_out.visit_mut(&join(prefix, "score_out"), f);
        self.projection.visit_mut(&join(prefix, "projection"), f);
        f(join(prefix, "theta_tau"), &mut self.theta_tau);
    }
}

/// Iteration budget for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Phase {
    Train,
    Eval,
}

impl BoundAggregator {
    fn check_dim(&self, tokens: &ImageTokenSet) -> Result<()> {
        if tokens.token_dim() != self.config.token_dim {
            return Err(Error::config(format!(
                "image tokens have width {}, aggregator expects {}",
                tokens.token_dim(),
                self.config.token_dim
            )));
        }
        Ok(())
    }

    /// Score network output, `n x C`.
    pub fn scores(&self, tape: &mut Tape, tokens: Var) -> Var {
        let hidden = self.score_in.forward(tape, tokens);
        let hidden = tape.relu(hidden);
        self.score_out.forward(tape, hidden)
    }

    /// Records the full head on `tape`; returns a `1 x D` unit row.
    pub fn forward(&self, tape: &mut Tape, tokens: &ImageTokenSet, phase: Phase) -> Result<Var> {
        self.check_dim(tokens)?;
        let t = tape.constant(tokens.local_tokens().clone());
        if self.config.aggregation == Aggregation::MaxPool {
            let pooled = tape.constant(Matrix::row_vector(&maxpool_rows(tokens.local_tokens())));
            let _ = t;
            return Ok(tape.l2_normalize_rows(pooled));
        }
        let n = tokens.token_count();
        let c = self.config.clusters;
        let s = self.scores(tape, t);
        let sign = match self.config.score_sign {
            ScoreSign::Affinity => 1.0,
            ScoreSign::Cost => -1.0,
        };
        let s_reg = tape.scale(s, sign / self.config.reg);
        let a = uniform_marginal(n);
        let b = uniform_marginal(c);
        let (iters, tol) = match phase {
            Phase::Train => (self.config.train_iters, 0.0),
            Phase::Eval => (self.config.eval_iters, self.config.eval_tol),
        };
        let sol = sinkhorn_on_tape(tape, s_reg, &a, &b, iters, tol);
        let plan = match self.config.temperature {
            TemperatureMode::Learnable => {
                let tau = tape.softplus(self.theta_tau);
                let a_col = tape.constant(Matrix::column_vector(&a));
                temper_on_tape(tape, sol.log_plan, tau, a_col)
            }
            TemperatureMode::Removed => tape.exp(sol.log_plan),
        };
        let features = self.projection.forward(tape, t);
        let pt = tape.transpose(plan);
        let clusters = tape.matmul(pt, features);
        let flat = tape.reshape(clusters, 1, c * self.config.cluster_dim);
        Ok(tape.l2_normalize_rows(flat))
    }
}

fn maxpool_rows(m: &Matrix) -> Vec<f64> {
    let mut out = m.row(0).to_vec();
    for r in m.row_iter().skip(1) {
        for (o, x) in out.iter_mut().zip(r) {
            *o = o.max(*x);
        }
    }
    out
}

/// Two-layer score network applied to every local token; the global
/// token is excluded.
pub fn score_tokens(tokens: &ImageTokenSet, params: &AggregatorParams) -> Result<ScoreMatrix> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    bound.check_dim(tokens)?;
    let t = tape.constant(tokens.local_tokens().clone());
    let s = bound.scores(&mut tape, t);
    Ok(ScoreMatrix {
        scores: tape.value(s).clone(),
        reg: params.config.reg,
        sign: params.config.score_sign,
    })
}

/// `F_j = sum_i P[i, j] * (W_proj t_i + b_proj)`; returns `C x d_c`.
pub fn aggregate_clusters(
    plan: &TransportPlan,
    tokens: &ImageTokenSet,
    params: &AggregatorParams,
) -> Result<Matrix> {
    if plan.plan.rows() != tokens.token_count() || plan.plan.cols() != params.config.clusters {
        return Err(Error::config(format!(
            "plan is {}x{}, expected {}x{}",
            plan.plan.rows(),
            plan.plan.cols(),
            tokens.token_count(),
            params.config.clusters
        )));
    }
    if tokens.token_dim() != params.projection.input_dim() {
        return Err(Error::config("token width does not match the projection"));
    }
    let features = params.projection.apply(tokens.local_tokens());
    Ok(plan.plan.t_matmul(&features))
}

/// Full image head at inference.
pub fn encode_image(tokens: &ImageTokenSet, params: &AggregatorParams) -> Result<Descriptor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = bound.forward(&mut tape, tokens, Phase::Eval)?;
    let v = tape.value(out);
    if !v.is_finite() {
        return Err(Error::domain("image descriptor is not finite"));
    }
    Descriptor::from_unit(v.as_slice().to_vec())
}

/// Elementwise max over local tokens, L2-normalized.
pub fn maxpool_aggregate(tokens: &ImageTokenSet) -> Result<Descriptor> {
    Descriptor::new(&maxpool_rows(tokens.local_tokens()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    fn tiny_config() -> AggregatorConfig {
        AggregatorConfig {
            token_dim: 5,
            hidden_dim: 6,
            clusters: 3,
            cluster_dim: 4,
            train_iters: 20,
            ..AggregatorConfig::default()
        }
    }

    #[test]
    fn zero_network_gives_zero_scores() {
        let mut params = AggregatorParams::init(tiny_config(), 1.0, &mut Rng::new(1)).unwrap();
        params.score_in = Linear::zeros(5, 6);
        params.score_out = Linear::zeros(6, 3);
        let tokens = ImageTokenSet::new(Rng::new(2).normal_matrix(4, 5, 1.0), None).unwrap();
        let s = score_tokens(&tokens, &params).unwrap();
        assert!(s.scores.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_score_network_hand_case() {
        let cfg = AggregatorConfig {
            token_dim: 2,
            hidden_dim: 2,
            clusters: 2,
            cluster_dim: 2,
            ..AggregatorConfig::default()
        };
        let mut params = AggregatorParams::init(cfg, 1.0, &mut Rng::new(1)).unwrap();
        params.score_in = Linear {
            weight: Matrix::identity(2),
            bias: Matrix::zeros(1, 2),
        };
        params.score_out = params.score_in.clone();
        let tokens = ImageTokenSet::from_rows(&[[1.0, -1.0]]).unwrap();
        let s = score_tokens(&tokens, &params).unwrap();
        assert_eq!(s.scores.row(0), &[1.0, 0.0]);
    }

    #[test]
    fn score_rows_follow_token_permutation() {
        let params = AggregatorParams::init(tiny_config(), 1.0, &mut Rng::new(3)).unwrap();
        let tokens = ImageTokenSet::new(Rng::new(4).normal_matrix(4, 5, 1.0), None).unwrap();
        let order = [2, 0, 3, 1];
        let a = score_tokens(&tokens, &params).unwrap().scores;
        let b = score_tokens(&tokens.permuted(&order), &params).unwrap().scores;
        assert_eq!(a.select_rows(&order), b);
    }

    #[test]
    fn sinkhorn_zero_scores_is_uniform() {
        let s = ScoreMatrix::new(Matrix::zeros(4, 3), 0.1).unwrap();
        let sol = sinkhorn(&s, &uniform_marginal(4), &uniform_marginal(3), 10, 0.0).unwrap();
        for &p in sol.plan().as_slice() {
            assert!((p - 1.0 / 12.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sinkhorn_rejects_bad_marginals() {
        let s = ScoreMatrix::new(Matrix::zeros(2, 2), 0.1).unwrap();
        assert!(sinkhorn(&s, &[0.0, 1.0], &[0.5, 0.5], 10, 0.0).is_err());
        assert!(sinkhorn(&s, &[0.6, 0.6], &[0.5, 0.5], 10, 0.0).is_err());
        assert!(ScoreMatrix::new(Matrix::zeros(2, 2), 0.0).is_err());
    }

    #[test]
    fn sinkhorn_reports_non_convergence() {
        let s = ScoreMatrix::new(Rng::new(5).normal_matrix(16, 8, 1.0), 0.1).unwrap();
        let sol = sinkhorn(&s, &uniform_marginal(16), &uniform_marginal(8), 1, 1e-12).unwrap();
        assert!(!sol.converged);
        assert_eq!(sol.iterations, 1);
    }

    #[test]
    fn temper_rejects_non_positive_tau() {
        let lp = Matrix::zeros(2, 2);
        assert!(temper_plan(&lp, &[0.5, 0.5], 0.0).is_err());
        assert!(temper_plan(&lp, &[0.5, 0.5], -1.0).is_err());
    }

    #[test]
    fn aggregate_one_hot_and_uniform_plans() {
        let cfg = AggregatorConfig {
            token_dim: 2,
            hidden_dim: 2,
            clusters: 2,
            cluster_dim: 2,
            ..AggregatorConfig::default()
        };
        let mut params = AggregatorParams::init(cfg, 1.0, &mut Rng::new(1)).unwrap();
        params.projection = Linear {
            weight: Matrix::identity(2),
            bias: Matrix::zeros(1, 2),
        };
        let tokens = ImageTokenSet::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        let a = uniform_marginal(3);
        // tokens 0 and 2 -> cluster 0, token 1 -> cluster 1
        let one_hot = TransportPlan {
            plan: Matrix::from_rows(&[[a[0], 0.0], [0.0, a[1]], [a[2], 0.0]]).unwrap(),
            source: a.clone(),
            target: vec![2.0 / 3.0, 1.0 / 3.0],
        };
        let f = aggregate_clusters(&one_hot, &tokens, &params).unwrap();
        assert!((f[(0, 0)] - 2.0).abs() < 1e-15 && (f[(0, 1)] - 8.0 / 3.0).abs() < 1e-15);
        assert!((f[(1, 0)] - 1.0).abs() < 1e-15 && (f[(1, 1)] - 4.0 / 3.0).abs() < 1e-15);

        let uniform = TransportPlan {
            plan: Matrix::filled(3, 2, 1.0 / 6.0),
            source: a,
            target: vec![0.5, 0.5],
        };
        let f = aggregate_clusters(&uniform, &tokens, &params).unwrap();
        // (1/C) * mean token = 0.5 * [3, 4]
        assert_eq!(f.row(0), f.row(1));
        assert!((f[(0, 0)] - 1.5).abs() < 1e-15 && (f[(0, 1)] - 2.0).abs() < 1e-15);

        let bad = TransportPlan {
            plan: Matrix::zeros(2, 2),
            source: vec![0.5, 0.5],
            target: vec![0.5, 0.5],
        };
        assert!(matches!(
            aggregate_clusters(&bad, &tokens, &params),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn maxpool_examples() {
        let single = ImageTokenSet::from_rows(&[[3.0, 4.0]]).unwrap();
        assert_eq!(maxpool_aggregate(&single).unwrap().as_slice(), &[0.6, 0.8]);
        let two = ImageTokenSet::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let d = maxpool_aggregate(&two).unwrap();
        assert!((d.as_slice()[0] - h).abs() < 1e-15 && (d.as_slice()[1] - h).abs() < 1e-15);
        let swapped = ImageTokenSet::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert_eq!(maxpool_aggregate(&swapped).unwrap(), d);
    }

    #[test]
    fn encode_image_unit_norm_and_dim_checks() {
        let params = AggregatorParams::init(tiny_config(), 1.0, &mut Rng::new(6)).unwrap();
        let tokens = ImageTokenSet::new(Rng::new(7).normal_matrix(6, 5, 1.0), None).unwrap();
        let d = encode_image(&tokens, &params).unwrap();
        assert_eq!(d.dim(), 12);
        let n: f64 = d.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        let wrong = ImageTokenSet::new(Rng::new(7).normal_matrix(6, 4, 1.0), None).unwrap();
        assert!(matches!(encode_image(&wrong, &params), Err(Error::Config(_))));
    }

    #[test]
    fn backward_matches_finite_differences_including_tau() {
        let mut params = AggregatorParams::init(tiny_config(), 1.0, &mut Rng::new(8)).unwrap();
        params.theta_tau = Matrix::scalar(0.3);
        let tokens = ImageTokenSet::new(Rng::new(9).normal_matrix(6, 5, 1.0), None).unwrap();
        let probe = Rng::new(10).normal_matrix(12, 1, 1.0);
        for temperature in [TemperatureMode::Learnable, TemperatureMode::Removed] {
            params.config.temperature = temperature;
            let mut f = |p: &[f64]| {
                let mut local = params.clone();
                local.unflatten(p);
                let mut tape = Tape::new();
                let bound = local.bind(&mut tape);
                let out = bound.forward(&mut tape, &tokens, Phase::Train).unwrap();
                let w = tape.constant(probe.clone());
                let loss = tape.matmul(out, w);
                let grads = tape.backward(loss);
                (tape.value(loss).item(), tape.flat_param_grads(&grads))
            };
            let r = grad_check(&mut f, &params.flatten(), 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-5, "{temperature:?}: {}", r.max_rel_error);
            if temperature == TemperatureMode::Learnable {
                let tau_grad = *r.analytic.last().unwrap();
                assert!(tau_grad.abs() > 1e-8, "temperature gradient should be live");
            }
        }
    }
}
