//! SGD and Adam updates on flat parameter arrays.

use serde::{Deserialize, Serialize};

use super::AutogradError;

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

/// Adam moment estimates, one pair of arrays per parameter.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimState {
    pub fn for_shapes(lens: impl IntoIterator<Item = usize>) -> Self {
        let lens: Vec<usize> = lens.into_iter().collect();
        Self {
            first: lens.iter().map(|&n| vec![0.0; n]).collect(),
            second: lens.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

fn check_arity<P: AsRef<[f64]>, G: AsRef<[f64]>>(
    params: &[P],
    grads: &[G],
) -> Result<(), AutogradError> {
    if params.len() != grads.len()
        || params
            .iter()
            .zip(grads)
            .any(|(p, g)| p.as_ref().len() != g.as_ref().len())
    {
        return Err(AutogradError::ArityMismatch {
            params: params.len(),
            grads: grads.len(),
        });
    }
    Ok(())
}

/// `p <- p - lr * g`.
pub fn sgd_step<G: AsRef<[f64]>>(
    params: &mut [Vec<f64>],
    grads: &[G],
    lr: f64,
) -> Result<(), AutogradError> {
    if !(lr > 0.0) {
        return Err(AutogradError::InvalidLearningRate(lr));
    }
    check_arity(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (x, d) in p.iter_mut().zip(g.as_ref()) {
            *x -= lr * d;
        }
    }
    Ok(())
}

/// Bias-corrected Adam update applied in place.
pub fn adam_step<G: AsRef<[f64]>>(
    params: &mut [Vec<f64>],
    grads: &[G],
    state: &mut OptimState,
    lr: f64,
    cfg: AdamConfig,
) -> Result<(), AutogradError> {
    if !(lr > 0.0) {
        return Err(AutogradError::InvalidLearningRate(lr));
    }
    check_arity(params, grads)?;
    if state.first.len() != params.len() {
        *state = OptimState::for_shapes(params.iter().map(Vec::len));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (j, &d) in g.as_ref().iter().enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * d;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * d * d;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_definition() {
        let mut p = vec![vec![1.0]];
        sgd_step(&mut p, &[vec![2.0]], 0.1).unwrap();
        assert!((p[0][0] - 0.8).abs() < 1e-15);
        sgd_step(&mut p, &[vec![0.0]], 0.1).unwrap();
        assert!((p[0][0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_quadratic_contracts_geometrically() {
        // f(p) = p^2, grad 2p, lr 0.4: p <- 0.2 p
        let mut p = vec![vec![1.0]];
        for k in 1..=10 {
            let g = vec![vec![2.0 * p[0][0]]];
            sgd_step(&mut p, &g, 0.4).unwrap();
            assert!((p[0][0] - 0.2f64.powi(k)).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_non_positive_lr() {
        let mut p = vec![vec![1.0]];
        assert!(sgd_step(&mut p, &[vec![1.0]], 0.0).is_err());
        let mut st = OptimState::default();
        assert!(adam_step(&mut p, &[vec![1.0]], &mut st, -1.0, AdamConfig::default()).is_err());
    }

    #[test]
    fn adam_zero_grad_is_noop() {
        let mut p = vec![vec![0.3, -1.2]];
        let mut st = OptimState::default();
        for _ in 0..5 {
            adam_step(&mut p, &[vec![0.0, 0.0]], &mut st, 0.1, AdamConfig::default()).unwrap();
        }
        assert_eq!(p, vec![vec![0.3, -1.2]]);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn adam_first_step_is_unit_update() {
        // m_hat = 1, v_hat = 1 => step = lr / (1 + eps)
        let mut p = vec![vec![0.0]];
        let mut st = OptimState::default();
        adam_step(&mut p, &[vec![1.0]], &mut st, 0.1, AdamConfig::default()).unwrap();
        assert!((p[0][0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn adam_symmetric_params_stay_equal() {
        let mut p = vec![vec![0.5], vec![0.5]];
        let mut st = OptimState::default();
        for i in 0..50 {
            let g = (i as f64 * 0.37).sin();
            adam_step(&mut p, &[vec![g], vec![g]], &mut st, 0.01, AdamConfig::default()).unwrap();
        }
        assert_eq!(p[0], p[1]);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 5.0);
        assert_eq!(small[0][0], 0.1);
    }
}
