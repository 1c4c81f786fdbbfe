use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{MhnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers, one pair per parameter in store order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        AdamState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f64] {
        &self.v[index]
    }
}

/// One bias-corrected Adam update over every parameter, then zeroes the gradients.
///
/// All gradient buffers must be present; a parameter without one is reported
/// by name and nothing is updated.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(MhnError::Contract(format!(
            "optimizer state covers {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    if let Some((_, name, _)) = store.iter().find(|(_, _, t)| t.grad.is_none()) {
        return Err(MhnError::Contract(format!(
            "missing gradient for parameter `{name}`"
        )));
    }

    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);

    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = store.get_mut(id);
        let grad = t.grad.as_mut().expect("checked above");
        let m = &mut state.m[id.index()];
        let v = &mut state.v[id.index()];
        for i in 0..t.data.len() {
            let g = grad[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            t.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            grad[i] = 0.0;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(value: f64, grad: f64) -> ParamStore {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::filled(&[3], value)).unwrap();
        store.get_mut(id).grad = Some(vec![grad; 3]);
        store
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = store_with(0.5, 1.0);
        let mut state = AdamState::new(&store, AdamConfig::default());
        adam_step(&mut store, &mut state).unwrap();
        let expected = 0.5 - 1e-4 * (1.0 / (1.0 + 1e-8));
        for v in &store.by_name("w").unwrap().data {
            assert!((v - expected).abs() < 1e-18);
        }
        assert_eq!(state.step, 1);
        assert_eq!(
            store.by_name("w").unwrap().grad.as_deref(),
            Some(&[0.0; 3][..])
        );
    }

    #[test]
    fn zero_gradient_leaves_params_but_advances_step() {
        let mut store = store_with(0.5, 0.0);
        let mut state = AdamState::new(&store, AdamConfig::default());
        adam_step(&mut store, &mut state).unwrap();
        assert_eq!(store.by_name("w").unwrap().data, vec![0.5; 3]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn two_constant_steps_follow_closed_form() {
        // Hand-evaluated recurrences with g = 1:
        //   m1 = 0.1,  v1 = 0.001,    m_hat = 1, v_hat = 1
        //   m2 = 0.19, v2 = 0.001999, m_hat = 0.19/0.19 = 1, v_hat = 0.001999/0.001999 = 1
        // so each step moves by lr / (1 + eps).
        let mut store = store_with(0.0, 1.0);
        let mut state = AdamState::new(&store, AdamConfig::default());
        adam_step(&mut store, &mut state).unwrap();
        store.get_mut(store.id("w").unwrap()).grad = Some(vec![1.0; 3]);
        adam_step(&mut store, &mut state).unwrap();
        let expected = -2.0 * 1e-4 / (1.0 + 1e-8);
        for v in &store.by_name("w").unwrap().data {
            assert!((v - expected).abs() < 1e-15, "{v} vs {expected}");
        }
        assert!((state.first_moment(0)[0] - 0.19).abs() < 1e-15);
        assert!((state.second_moment(0)[0] - 0.001999).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_named() {
        let mut store = ParamStore::new();
        store.insert("encoder.w", Tensor::zeros(&[2])).unwrap();
        let mut state = AdamState::new(&store, AdamConfig::default());
        let err = adam_step(&mut store, &mut state).unwrap_err();
        assert!(err.to_string().contains("encoder.w"));
        assert_eq!(state.step, 0);
    }
}
