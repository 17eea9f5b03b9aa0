//! Stable elementary numerics, seeded randomness and the gradient-check
//! harness that every differentiable op in the crate is validated against.

mod matrix;
mod rng;
mod tape;

pub use matrix::{dot, norm, Matrix};
pub use rng::Rng;
pub use tape::{Grads, Tape, Var};

pub(crate) use tape::softplus;

use crate::error::{Error, Result};

/// `log(sum(exp(v)))`, shifted by the maximum for stability.
pub fn logsumexp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::domain("logsumexp of an empty vector"));
    }
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if v.len() == 1 {
        return Ok(m);
    }
    Ok(m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln())
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::domain(format!(
            "cosine of vectors with lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (nx, ny) = (norm(x), norm(y));
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::domain("cosine of a zero-norm vector"));
    }
    Ok((dot(x, y) / (nx * ny)).clamp(-1.0, 1.0))
}

/// Returns `v / ||v||`.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::domain("cannot normalize a zero or non-finite vector"));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter index where the worst error occurred.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares an analytic gradient to central finite differences.
///
/// `f` returns `(value, gradient)`; the gradient is only read at `p`.
/// The error per component is `|analytic - fd| / max(1, |fd|)`.
pub fn grad_check(
    f: &mut dyn FnMut(&[f64]) -> (f64, Vec<f64>),
    p: &[f64],
    eps: f64,
) -> Result<GradCheck> {
    let (v0, analytic) = f(p);
    if !v0.is_finite() {
        return Err(Error::NonFinite { index: 0 });
    }
    if analytic.len() != p.len() {
        return Err(Error::config(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            p.len()
        )));
    }
    let mut probe = p.to_vec();
    let mut numeric = Vec::with_capacity(p.len());
    let mut worst = (0.0_f64, 0_usize);
    for i in 0..p.len() {
        probe[i] = p[i] + eps;
        let (fp, _) = f(&probe);
        probe[i] = p[i] - eps;
        let (fm, _) = f(&probe);
        probe[i] = p[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
        let fd = (fp - fm) / (2.0 * eps);
        let err = (analytic[i] - fd).abs() / fd.abs().max(1.0);
        if err > worst.0 {
            worst = (err, i);
        }
        numeric.push(fd);
    }
    Ok(GradCheck {
        max_rel_error: worst.0,
        worst_index: worst.1,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn logsumexp_examples() {
        assert!((logsumexp(&[0.0, 0.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(logsumexp(&[5.0]).unwrap(), 5.0);
        // ln(e + e^2 + e^3) evaluated directly
        let direct = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        let got = logsumexp(&[1.0, 2.0, 3.0]).unwrap();
        assert!((got - direct).abs() < 1e-14);
        assert!((got - 3.407_605_964_444_380).abs() < 1e-12);
        assert!(matches!(logsumexp(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn logsumexp_survives_large_inputs() {
        let v = logsumexp(&[1000.0, 1000.0]).unwrap();
        assert!((v - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);
    }

    #[test]
    fn cosine_examples() {
        let x = [0.3, -1.2, 4.0];
        assert!((cosine(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 2.0], &[2.0, 1.0]).unwrap() - 0.8).abs() < 1e-15);
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn grad_check_linear_is_exact() {
        let c = [0.5, -1.5, 2.0, 3.25];
        let mut f = |p: &[f64]| (dot(&c, p), c.to_vec());
        let r = grad_check(&mut f, &[0.1, 0.2, -0.3, 0.4], 1e-5).unwrap();
        assert!(r.max_rel_error <= 1e-10, "{}", r.max_rel_error);
    }

    #[test]
    fn grad_check_square_norm() {
        let mut f = |p: &[f64]| (dot(p, p), p.iter().map(|x| 2.0 * x).collect());
        let r = grad_check(&mut f, &[1.0, 2.0], 1e-5).unwrap();
        assert_eq!(r.analytic, vec![2.0, 4.0]);
        for (a, n) in r.analytic.iter().zip(&r.numeric) {
            assert!((a - n).abs() < 1e-8);
        }
    }

    #[test]
    fn grad_check_flags_corrupted_component() {
        // ||p||^2 at [1, 2] with the second component doubled: 8 vs 4.
        let mut f = |p: &[f64]| (dot(p, p), vec![2.0 * p[0], 4.0 * p[1]]);
        let r = grad_check(&mut f, &[1.0, 2.0], 1e-5).unwrap();
        assert_eq!(r.worst_index, 1);
        assert!((r.max_rel_error - 1.0).abs() < 1e-6);

        // relative error ~0.5 when the corrupted component is the fd scale itself
        let mut g = |p: &[f64]| (dot(p, p), vec![2.0 * p[0], 2.0 * p[1] * 1.5]);
        let r = grad_check(&mut g, &[1.0, 2.0], 1e-5).unwrap();
        assert!((r.max_rel_error - 0.5).abs() < 1e-6);
    }

    #[test]
    fn grad_check_reports_non_finite_probe() {
        let mut f = |p: &[f64]| {
            let v = if p[1] > 1.0 { f64::NAN } else { p[0] + p[1] };
            (v, vec![1.0, 1.0])
        };
        let err = grad_check(&mut f, &[0.0, 1.0], 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1 }));
    }

    proptest! {
        #[test]
        fn logsumexp_shift_invariant(v in prop::collection::vec(-50.0f64..50.0, 1..16), c in -100.0f64..100.0) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let a = logsumexp(&shifted).unwrap();
            let b = logsumexp(&v).unwrap() + c;
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn cosine_positive_scale_invariant(
            x in prop::collection::vec(-10.0f64..10.0, 4),
            y in prop::collection::vec(-10.0f64..10.0, 4),
            alpha in 1e-3f64..1e3,
        ) {
            prop_assume!(norm(&x) > 1e-3 && norm(&y) > 1e-3);
            let sx: Vec<f64> = x.iter().map(|v| v * alpha).collect();
            let a = cosine(&sx, &y).unwrap();
            let b = cosine(&x, &y).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
