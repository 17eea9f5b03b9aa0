//! Acceptance suite: one PASS/FAIL line per criterion on stdout, progress
//! and per-seed tables on stderr.
//!
//! A failing criterion is reported, not hidden; the process exits non-zero
//! on a failure only when `ACCEPTANCE_STRICT=1`, so the workspace test run
//! stays usable while the report keeps the result visible.

use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{ensure, Result};
use placetext::ablation::{ablate, AblationRow, Axis, Base, Splits};
use placetext::ccca::{align, invert, permutations, similarity, CccaConfig, ViewGroup};
use placetext::cli::{run, Command, RunConfig, Settings, DATASET_FILE, MODEL_FILE};
use placetext::dataset::{generate, split, GenConfig, Part, SplitRatios};
use placetext::image_aggregator::{sinkhorn, temper_plan, uniform_marginal, ScoreMatrix};
use placetext::layers::Parameters;
use placetext::model::{ModelConfig, ModelParams};
use placetext::numerics::{dot, grad_check, Matrix, Rng};
use placetext::pipeline::{evaluate, EvalOptions};
use placetext::retrieval::concat_group;
use placetext::text_head::TextHeadVariant;
use placetext::trainer::{info_nce_from_similarity, loss_and_gradient, train, LossDirection, TrainConfig, Unit};

const SEEDS: [u64; 3] = [0, 1, 2];
/// Required mean-over-seeds advantage for a strict ordering.
const STRICT_MARGIN: f64 = 0.05;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict {
        pass,
        detail: detail.into(),
    })
}

fn unit_rows(m: &mut Matrix) {
    for r in 0..m.rows() {
        let n = dot(m.row(r), m.row(r)).sqrt();
        for x in m.row_mut(r) {
            *x /= n;
        }
    }
}

fn max_violation(plan: &Matrix, a: &[f64], b: &[f64]) -> f64 {
    let rows = plan.row_sums().into_iter().zip(a).map(|(s, t)| (s - t).abs());
    let cols = plan.col_sums().into_iter().zip(b).map(|(s, t)| (s - t).abs());
    rows.chain(cols).fold(0.0, f64::max)
}

/// Affinities uniform in `[0, 1)`. Gaussian scores are reported alongside
/// for reference; their wider logit range needs more than 100 iterations.
fn c1_sinkhorn_marginals() -> Result<Verdict> {
    let mut rng = Rng::new(1);
    let affinity = Matrix::from_vec(16, 8, (0..128).map(|_| rng.uniform()).collect())?;
    let (a, b) = (uniform_marginal(16), uniform_marginal(8));
    let start = Instant::now();
    let sol = sinkhorn(&ScoreMatrix::new(affinity, 0.1)?, &a, &b, 100, 1e-6)?;
    let secs = start.elapsed().as_secs_f64();
    let err = max_violation(&sol.plan(), &a, &b);
    let gaussian = sinkhorn(&ScoreMatrix::new(Rng::new(1).normal_matrix(16, 8, 1.0), 0.1)?, &a, &b, 100, 1e-6)?;
    verdict(
        err < 1e-6 && secs < 1.0,
        format!(
            "max violation {err:.2e} (< 1e-6) after {} iterations in {secs:.4} s (< 1 s); N(0,1) scores for reference: {:.2e} after {}",
            sol.iterations,
            max_violation(&gaussian.plan(), &a, &b),
            gaussian.iterations
        ),
    )
}

fn c2_sinkhorn_fixed_point() -> Result<Verdict> {
    let sol = sinkhorn(&ScoreMatrix::new(Matrix::identity(2), 0.1)?, &[0.5, 0.5], &[0.5, 0.5], 100, 1e-12)?;
    let want = 0.5 * 10f64.exp() / (1.0 + 10f64.exp());
    let plan = sol.plan();
    let err = (plan.row(0)[0] - want).abs().max((plan.row(1)[1] - want).abs());
    verdict(err < 1e-9, format!("diagonal error {err:.2e} (< 1e-9)"))
}

fn c3_temperature_identity() -> Result<Verdict> {
    let s = Rng::new(3).normal_matrix(16, 8, 1.0);
    let a = uniform_marginal(16);
    let sol = sinkhorn(&ScoreMatrix::new(s, 0.1)?, &a, &uniform_marginal(8), 100_000, 1e-12)?;
    ensure!(sol.converged, "reference plan did not converge: {:.2e}", sol.marginal_error);
    let at_one = temper_plan(&sol.log_plan, &a, 1.0)?;
    let identity_err = at_one.plan.max_abs_diff(&sol.plan());
    let sharp = temper_plan(&sol.log_plan, &a, 1e-4)?;
    let mut onehot_err = 0.0_f64;
    for i in 0..16 {
        let row = sol.log_plan.row(i);
        let arg = (0..8).fold(0, |b, j| if row[j] > row[b] { j } else { b });
        for j in 0..8 {
            let want = if j == arg { a[i] } else { 0.0 };
            onehot_err = onehot_err.max((sharp.plan.row(i)[j] - want).abs());
        }
    }
    verdict(
        identity_err < 1e-9 && onehot_err < 1e-6,
        format!("plan converged to {:.2e} in {} iterations; tau=1 error {identity_err:.2e} (< 1e-9), tau=1e-4 one-hot error {onehot_err:.2e} (< 1e-6)", sol.marginal_error, sol.iterations),
    )
}

fn c4_gradients() -> Result<Verdict> {
    let ds = generate(&GenConfig {
        grid_rows: 1,
        grid_cols: 2,
        views: 2,
        image_tokens: 6,
        image_dim: 8,
        text_tokens: 6,
        text_dim: 8,
        sentence_len: 3,
        ..GenConfig::default()
    })?;
    let mut cfg = ModelConfig::default().with_token_dims(8, 8);
    cfg.text.variant = TextHeadVariant::T1MT2;
    cfg.text.heads = 2;
    cfg.text.hidden_dim = 12;
    cfg.text.model_dim = 16;
    cfg.image.hidden_dim = 6;
    cfg.image.clusters = 4;
    cfg.image.cluster_dim = 4;
    let mut params = ModelParams::init(cfg, 11)?;
    // Move the temperature off its initial value so its gradient is generic.
    params.image.theta_tau.as_mut_slice()[0] = 0.2;
    let pairs: Vec<Unit<'_>> = ds.entries.iter().flat_map(|e| e.views.iter().map(Unit::Pair)).collect();
    let groups: Vec<Unit<'_>> = ds.entries.iter().map(|e| Unit::Group(&e.views)).collect();

    let mut names = Vec::new();
    params.visit("", &mut |name, m| names.push((name, m.len())));
    let mut worst: Vec<f64> = vec![0.0; names.len()];
    for units in [&pairs, &groups] {
        let mut f = |p: &[f64]| {
            let mut q = params.clone();
            q.unflatten(p);
            loss_and_gradient(&q, units, 0.07, LossDirection::Symmetric).expect("toy loss")
        };
        let r = grad_check(&mut f, &params.flatten(), 1e-5)?;
        let mut off = 0;
        for (g, (_, len)) in names.iter().enumerate() {
            for i in off..off + len {
                let err = (r.analytic[i] - r.numeric[i]).abs() / r.numeric[i].abs().max(1.0);
                worst[g] = worst[g].max(err);
            }
            off += len;
        }
    }
    let (gi, max) = worst
        .iter()
        .enumerate()
        .fold((0, 0.0), |b, (i, &e)| if e > b.1 { (i, e) } else { b });
    let tau = names.iter().position(|(n, _)| n.ends_with("theta_tau")).map(|i| worst[i]);
    ensure!(tau.is_some(), "temperature parameter missing from the gradient suite");
    verdict(
        max < 1e-4,
        format!(
            "{} groups, worst {:.2e} in {} (< 1e-4), theta_tau {:.2e}",
            names.len(),
            max,
            names[gi].0,
            tau.unwrap_or(f64::NAN)
        ),
    )
}

fn c5_info_nce() -> Result<Verdict> {
    let mut worst = 0.0_f64;
    for n in [2, 4, 8, 64] {
        for dir in [LossDirection::TextToImage, LossDirection::Symmetric] {
            let l = info_nce_from_similarity(&Matrix::filled(n, n, 0.37), 0.07, dir)?;
            worst = worst.max((l - (n as f64).ln()).abs());
        }
    }
    let hand = info_nce_from_similarity(&Matrix::identity(2), 1.0, LossDirection::TextToImage)?;
    let hand_err = (hand - (1.0 + (-1f64).exp()).ln()).abs();
    verdict(
        worst < 1e-9 && hand_err < 1e-9,
        format!("constant-similarity error {worst:.2e}, N=2 hand case error {hand_err:.2e} (< 1e-9)"),
    )
}

fn c6_concatenation() -> Result<Verdict> {
    let mut rng = Rng::new(6);
    let mut worst = 0.0_f64;
    for _ in 0..1000 {
        let views = 1 + (rng.next_u64() % 4) as usize;
        let dim = 2 + (rng.next_u64() % 63) as usize;
        let mut a = rng.normal_matrix(views, dim, 1.0);
        let mut b = rng.normal_matrix(views, dim, 1.0);
        unit_rows(&mut a);
        unit_rows(&mut b);
        let (a, b) = (ViewGroup::new(a)?, ViewGroup::new(b)?);
        let mean = (0..views).map(|i| dot(a.view(i), b.view(i))).sum::<f64>() / views as f64;
        worst = worst.max((dot(concat_group(&a).as_slice(), concat_group(&b).as_slice()) - mean).abs());
    }
    verdict(worst < 1e-12, format!("1000 groups, worst error {worst:.2e} (< 1e-12)"))
}

/// Recall@1 within 5 m.
fn r1(rows: &[AblationRow], setting: &str) -> f64 {
    rows.iter()
        .find(|r| r.setting == setting)
        .and_then(|r| r.table.get(1, 5.0))
        .unwrap_or_else(|| panic!("no setting {setting}"))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_err(v: &[f64]) -> f64 {
    let m = mean(v);
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (var / v.len() as f64).sqrt()
}

fn fmt_seeds(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/")
}

/// Results of the learning experiments for one seed.
struct SeedRun {
    untrained: f64,
    trained: f64,
    train_secs: f64,
    sweeps: Vec<(Axis, Vec<AblationRow>)>,
}

impl SeedRun {
    fn rows(&self, axis: Axis) -> &[AblationRow] {
        &self.sweeps.iter().find(|(a, _)| *a == axis).expect("axis swept").1
    }
}

fn run_seed(seed: u64) -> Result<SeedRun> {
    let ds = split(
        generate(&GenConfig {
            seed,
            ..GenConfig::default()
        })?,
        SplitRatios::default(),
        seed,
    )?;
    let (tr, va, te) = (ds.part(Part::Train)?, ds.part(Part::Val)?, ds.part(Part::Test)?);
    eprintln!("seed {seed}: {} train / {} val / {} test locations", tr.len(), va.len(), te.len());
    let model = ModelConfig::default();
    let config = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let eval = EvalOptions {
        shuffle_seed: seed,
        ..EvalOptions::default()
    };
    let untrained = evaluate(&te, &ModelParams::init(model.clone(), seed)?, &eval)?
        .get(1, 5.0)
        .expect("default grid");
    let start = Instant::now();
    let trained_params = train(&tr, &va, &model, &config)?.best;
    let train_secs = start.elapsed().as_secs_f64();
    let trained = evaluate(&te, &trained_params, &eval)?.get(1, 5.0).expect("default grid");
    eprintln!("seed {seed}: untrained {untrained:.3}, trained {trained:.3} in {train_secs:.1} s");
    let base = Base {
        model: &model,
        train: &config,
        eval: &eval,
        trained: Some(&trained_params),
    };
    let data = Splits {
        train: &tr,
        val: &va,
        test: &te,
    };
    let mut sweeps = Vec::new();
    for axis in [
        Axis::Aggregation,
        Axis::Temperature,
        Axis::TrainingStrategy,
        Axis::CccaVariant,
        Axis::Views,
        Axis::Truncation,
    ] {
        let rows = ablate(axis, data, base)?;
        let line: Vec<String> = rows
            .iter()
            .map(|r| format!("{}={:.3}", r.setting, r.table.get(1, 5.0).unwrap_or(f64::NAN)))
            .collect();
        eprintln!("seed {seed} {axis}: {}", line.join("  "));
        sweeps.push((axis, rows));
    }
    Ok(SeedRun {
        untrained,
        trained,
        train_secs,
        sweeps,
    })
}

fn c7_learning(runs: &[SeedRun]) -> Result<Verdict> {
    // The default configuration is seed 0; other seeds are listed for context.
    let d = &runs[0];
    let all: Vec<f64> = runs.iter().map(|r| r.trained).collect();
    verdict(
        d.trained >= 0.8 && d.untrained < 0.1 && d.train_secs < 300.0,
        format!(
            "trained {:.3} (>= 0.8), untrained {:.3} (< 0.1), training {:.0} s (< 300 s); seeds {}",
            d.trained,
            d.untrained,
            d.train_secs,
            fmt_seeds(&all)
        ),
    )
}

fn c8_orderings(runs: &[SeedRun]) -> Result<Verdict> {
    let per_seed = |axis: Axis, setting: &str| -> Vec<f64> { runs.iter().map(|r| r1(r.rows(axis), setting)).collect() };
    let checks = [
        ("sinkhorn > maxpool", per_seed(Axis::Aggregation, "sinkhorn"), per_seed(Axis::Aggregation, "maxpool"), true),
        ("learnable tau >= removed", per_seed(Axis::Temperature, "learnable"), per_seed(Axis::Temperature, "removed"), false),
        ("single > group", per_seed(Axis::TrainingStrategy, "single"), per_seed(Axis::TrainingStrategy, "group"), true),
        ("ccca > none", per_seed(Axis::CccaVariant, "full"), per_seed(Axis::CccaVariant, "none"), true),
        ("oracle >= ccca", per_seed(Axis::CccaVariant, "oracle"), per_seed(Axis::CccaVariant, "full"), false),
        ("full >= w/o cascade", per_seed(Axis::CccaVariant, "full"), per_seed(Axis::CccaVariant, "w/o cascade"), false),
        ("full >= w/o cosine", per_seed(Axis::CccaVariant, "full"), per_seed(Axis::CccaVariant, "w/o cosine"), false),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, hi, lo, strict) in checks {
        let diff = mean(&hi) - mean(&lo);
        let need = if strict { STRICT_MARGIN } else { 0.0 };
        let ok = diff >= need - 1e-12;
        pass &= ok;
        parts.push(format!(
            "{name}: {} vs {} diff {diff:+.3} (>= {need}) {}",
            fmt_seeds(&hi),
            fmt_seeds(&lo),
            if ok { "ok" } else { "VIOLATED" }
        ));
    }
    verdict(pass, parts.join("; "))
}

fn monotone_within_se(runs: &[SeedRun], axis: Axis) -> (bool, String) {
    let settings: Vec<String> = runs[0].rows(axis).iter().map(|r| r.setting.clone()).collect();
    let curves: Vec<Vec<f64>> = settings
        .iter()
        .map(|s| runs.iter().map(|r| r1(r.rows(axis), s)).collect())
        .collect();
    let mut ok = true;
    for w in curves.windows(2) {
        let slack = (std_err(&w[0]).powi(2) + std_err(&w[1]).powi(2)).sqrt();
        ok &= mean(&w[1]) >= mean(&w[0]) - slack - 1e-12;
    }
    let means: Vec<String> = settings
        .iter()
        .zip(&curves)
        .map(|(s, c)| format!("{s}:{:.3}±{:.3}", mean(c), std_err(c)))
        .collect();
    (ok, format!("{axis} {}", means.join(" ")))
}

fn c9_robustness(runs: &[SeedRun]) -> Result<Verdict> {
    let (v_ok, v) = monotone_within_se(runs, Axis::Views);
    let (t_ok, t) = monotone_within_se(runs, Axis::Truncation);
    verdict(v_ok && t_ok, format!("{v}; {t}"))
}

fn c10_alignment() -> Result<Verdict> {
    let mut rng = Rng::new(10);
    let config = CccaConfig::default();
    let (mut recovered, mut exact) = (0, 0);
    let total = 200;
    for _ in 0..total {
        let mut m = rng.normal_matrix(4, 32, 1.0);
        unit_rows(&mut m);
        let mut q = m.zip_map(&rng.normal_matrix(4, 32, 0.02), |a, b| a + b);
        unit_rows(&mut q);
        let (m, q) = (ViewGroup::new(m)?, ViewGroup::new(q)?);
        let shuffle = rng.permutation(4);
        let shown = q.reordered(&shuffle);
        let a = align(&m, &shown, &config)?;
        if a.permutation == invert(&shuffle) {
            recovered += 1;
        }
        let best = permutations(4)
            .iter()
            .map(|p| similarity(&m, &shown.reordered(p), &config))
            .collect::<placetext::Result<Vec<f64>>>()?
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        if a.score == best {
            exact += 1;
        }
    }
    let rate = recovered as f64 / total as f64;
    verdict(
        rate >= 0.95 && exact == total,
        format!("recovered {recovered}/{total} ({rate:.3} >= 0.95), score equals exhaustive maximum {exact}/{total}"),
    )
}

const SMALL_RUN: &str = r#"
seed = 11
[gen]
grid_rows = 4
grid_cols = 5
[train]
epochs = 2
batch_size = 16
"#;

fn pipeline(out: &Path) -> Result<Vec<std::path::PathBuf>> {
    let settings = Settings::from_toml(SMALL_RUN)?.resolved();
    let exec = |command: Command| -> Result<Vec<std::path::PathBuf>> {
        let config = RunConfig {
            command,
            settings: settings.clone(),
            out: out.to_path_buf(),
        };
        Ok(run(&config, &mut |_| {})?.files)
    };
    let data = out.join(DATASET_FILE);
    let mut files = exec(Command::Gen)?;
    files.extend(exec(Command::Train { data: data.clone() })?);
    files.extend(exec(Command::Eval {
        data,
        checkpoint: out.join(MODEL_FILE),
    })?);
    Ok(files)
}

fn c11_determinism() -> Result<Verdict> {
    let dir = tempfile::tempdir()?;
    let a = pipeline(&dir.path().join("a"))?;
    let b = pipeline(&dir.path().join("b"))?;
    let mut same = 0;
    let mut differing = Vec::new();
    for (x, y) in a.iter().zip(&b) {
        if x.file_name() == y.file_name() && fs::read(x)? == fs::read(y)? {
            same += 1;
        } else {
            differing.push(x.display().to_string());
        }
    }
    let names: Vec<String> = a
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    verdict(
        a.len() == b.len() && differing.is_empty() && !a.is_empty(),
        format!("{same}/{} artifacts byte-identical across reruns ({})", a.len(), names.join(", ")),
    )
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(u32, &str, Result<Verdict>)> = vec![
        (1, "sinkhorn marginals", c1_sinkhorn_marginals()),
        (2, "sinkhorn fixed point", c2_sinkhorn_fixed_point()),
        (3, "temperature identity", c3_temperature_identity()),
        (4, "gradient suite", c4_gradients()),
        (5, "info-nce values", c5_info_nce()),
        (6, "concatenation identity", c6_concatenation()),
    ];
    let runs: Result<Vec<SeedRun>> = SEEDS.iter().map(|&s| run_seed(s)).collect();
    match runs {
        Ok(runs) => {
            results.push((7, "end-to-end learning", c7_learning(&runs)));
            results.push((8, "ablation orderings", c8_orderings(&runs)));
            results.push((9, "robustness curves", c9_robustness(&runs)));
        }
        Err(e) => {
            for (n, name) in [(7, "end-to-end learning"), (8, "ablation orderings"), (9, "robustness curves")] {
                results.push((n, name, Err(anyhow::anyhow!("seed runs failed: {e:#}"))));
            }
        }
    }
    results.push((10, "alignment accuracy", c10_alignment()));
    results.push((11, "determinism", c11_determinism()));

    let mut passed = 0;
    for (n, name, r) in &results {
        let (ok, detail) = match r {
            Ok(v) => (v.pass, v.detail.clone()),
            Err(e) => (false, format!("error: {e:#}")),
        };
        passed += usize::from(ok);
        println!("criterion {n:>2} {} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    }
    println!(
        "acceptance: {passed}/{} criteria passed in {:.0} s",
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if passed < results.len() && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
