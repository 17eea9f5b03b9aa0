//! Entropic optimal transport between image tokens and clusters: marginal
//! convergence, the effect of `reg`, and the temperature-softened plan.

use anyhow::Result;
use placetext::image_aggregator::{sinkhorn, temper_plan, uniform_marginal, ScoreMatrix};
use placetext::numerics::{Matrix, Rng};

fn main() -> Result<()> {
    let (n, c) = (16, 8);
    let scores = Rng::new(1).normal_matrix(n, c, 1.0);
    let (a, b) = (uniform_marginal(n), uniform_marginal(c));

    for reg in [1.0, 0.3, 0.1, 0.03] {
        let sol = sinkhorn(&ScoreMatrix::new(scores.clone(), reg)?, &a, &b, 100, 1e-6)?;
        let plan = sol.plan();
        let peak = plan.row_iter().map(|r| r.iter().copied().fold(0.0, f64::max) * n as f64);
        let mean_peak = peak.sum::<f64>() / n as f64;
        println!(
            "reg {reg:<5} iterations {:>3}  converged {:<5}  marginal error {:.2e}  mean row peak share {:.3}",
            sol.iterations, sol.converged, sol.marginal_error, mean_peak
        );
    }

    // Affinities in [0, 1) keep the logits within 1/reg of each other and
    // converge much faster than unbounded scores.
    let mut rng = Rng::new(1);
    let affinity = Matrix::from_vec(n, c, (0..n * c).map(|_| rng.uniform()).collect())?;
    for (name, s) in [("uniform affinities", &affinity), ("gaussian scores", &scores)] {
        let sol = sinkhorn(&ScoreMatrix::new(s.clone(), 0.1)?, &a, &b, 100_000, 1e-12)?;
        println!("{name}: marginal error {:.2e} after {} iterations", sol.marginal_error, sol.iterations);
    }

    let sol = sinkhorn(&ScoreMatrix::new(affinity, 0.1)?, &a, &b, 1000, 1e-12)?;
    for tau in [1.0, 0.5, 0.1, 1e-4] {
        let p = temper_plan(&sol.log_plan, &a, tau)?;
        let drift = p.plan.max_abs_diff(&sol.plan());
        println!("tau {tau:<6} max change vs plain plan {drift:.2e}  row 0: {:.4?}", p.plan.row(0));
    }
    Ok(())
}
