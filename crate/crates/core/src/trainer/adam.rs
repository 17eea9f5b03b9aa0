use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Parameters;

/// Adam hyperparameters besides the learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates in [`Parameters::flatten`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// Name and element offset of flat index `i`.
fn locate<P: Parameters + ?Sized>(params: &P, i: usize) -> String {
    let mut offset = 0;
    let mut found = None;
    params.visit("", &mut |name, m| {
        if found.is_none() && i < offset + m.len() {
            let local = i - offset;
            found = Some(format!("{name}[{},{}]", local / m.cols(), local % m.cols()));
        }
        offset += m.len();
    });
    found.unwrap_or_else(|| format!("#{i}"))
}

/// One bias-corrected Adam update. A non-finite gradient aborts the step
/// before anything changes and names the offending tensor entry.
pub fn adam_step<P: Parameters + ?Sized>(
    params: &mut P,
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    config: &AdamConfig,
) -> Result<()> {
    let n = params.parameter_count();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::config(format!(
            "adam step over {n} parameters got {} gradients and {} moments",
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            path: locate(params, i),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    let mut values = params.flatten();
    for (((p, g), m), v) in values
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = config.beta1 * *m + (1.0 - config.beta1) * g;
        *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + config.eps);
    }
    params.unflatten(&values);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Linear;

    fn layer() -> Linear {
        let mut l = Linear::zeros(2, 2);
        l.weight = crate::numerics::Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]).unwrap();
        l
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut l = layer();
        let before = l.clone();
        let mut s = AdamState::new(6);
        adam_step(&mut l, &[0.0; 6], &mut s, 1e-3, &AdamConfig::default()).unwrap();
        assert_eq!(l, before);
    }

    #[test]
    fn first_step_moves_each_entry_by_lr() {
        let mut l = layer();
        let before = l.flatten();
        let g = [2.0, -0.5, 1e-3, -7.0, 4.0, -1.0];
        let mut s = AdamState::new(6);
        adam_step(&mut l, &g, &mut s, 1e-4, &AdamConfig::default()).unwrap();
        for ((a, b), g) in l.flatten().iter().zip(&before).zip(&g) {
            let step = b - a;
            // |g| / (|g| + eps) differs from 1 by at most eps / |g|.
            assert!((step - 1e-4 * g.signum()).abs() < 1e-4 * 1e-8 / g.abs() + 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_names_the_entry() {
        let mut l = layer();
        let before = l.clone();
        let mut s = AdamState::new(6);
        let mut g = [0.0; 6];
        g[5] = f64::NAN;
        match adam_step(&mut l, &g, &mut s, 1e-3, &AdamConfig::default()) {
            Err(Error::NonFiniteGradient { path }) => assert_eq!(path, "bias[0,1]"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(l, before);
        assert_eq!(s.step, 0);
    }
}
