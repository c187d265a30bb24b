//! Adam and the closed-form penalty terms (L1 and L2) with their
//! (sub)gradients.

use crate::tensor::Tensor;
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter first/second moment accumulators keyed by tensor name.
/// Keys are stable layer-tensor identities, so the state survives as long as
/// the shapes do; edited layers simply start fresh accumulators.
pub struct AdamState {
    hyper: AdamParams,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(hyper: AdamParams) -> Self {
        AdamState { hyper, step: 0, moments: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Starts the next optimizer step (shared bias-correction counter).
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Standard Adam update with bias correction for one tensor.
    pub fn update(&mut self, key: &str, param: &mut [f64], grad: &[f64]) {
        assert_eq!(param.len(), grad.len(), "grad shape mismatch for {key}");
        assert!(self.step > 0, "call begin_step before update");
        let (m, v) = self
            .moments
            .entry(key.to_string())
            .or_insert_with(|| (vec![0.0; param.len()], vec![0.0; param.len()]));
        assert_eq!(m.len(), param.len(), "stale accumulator shape for {key}");
        let AdamParams { learning_rate, beta1, beta2, eps } = self.hyper;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..param.len() {
            let g = grad[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            param[i] -= learning_rate * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Sum of absolute values.
pub fn l1_value(t: &Tensor) -> f64 {
    t.abs_sum()
}

/// Subgradient of the L1 norm: sign(x), zero at exact zeros so dead weights
/// stay dead.
pub fn l1_subgrad(t: &Tensor) -> Tensor {
    t.map(|v| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    })
}

/// Squared L2 mass and its gradient 2x.
pub fn l2_value(t: &Tensor) -> f64 {
    t.sq_sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut state = AdamState::new(AdamParams::default());
        let mut p = vec![1.0, -2.0, 3.0];
        state.begin_step();
        state.update("w", &mut p, &[0.0, 0.0, 0.0]);
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn constant_gradient_update_approaches_learning_rate() {
        let hyper = AdamParams { learning_rate: 1e-3, ..Default::default() };
        let mut state = AdamState::new(hyper);
        let mut p = vec![0.0];
        let mut prev = p[0];
        let mut last_step = 0.0;
        for _ in 0..500 {
            state.begin_step();
            state.update("w", &mut p, &[2.5]);
            last_step = (p[0] - prev).abs();
            prev = p[0];
        }
        // With a fixed gradient, m/sqrt(v) -> 1, so |update| -> lr.
        assert!((last_step - 1e-3).abs() < 1e-5, "step size {last_step}");
    }

    #[test]
    fn identical_inputs_give_identical_updates() {
        let mut s1 = AdamState::new(AdamParams::default());
        let mut s2 = AdamState::new(AdamParams::default());
        let mut p1 = vec![0.3, -0.7];
        let mut p2 = vec![0.3, -0.7];
        for i in 0..10 {
            let g = vec![0.1 * (i as f64 + 1.0), -0.05];
            s1.begin_step();
            s1.update("w", &mut p1, &g);
            s2.begin_step();
            s2.update("w", &mut p2, &g);
        }
        assert_eq!(p1, p2);
    }

    #[test]
    fn l1_examples() {
        assert_eq!(l1_value(&Tensor::zeros(&[4])), 0.0);
        let t = Tensor::from_vec(&[3], vec![1.0, -2.0, 3.0]).unwrap();
        assert_eq!(l1_value(&t), 6.0);
        assert_eq!(l1_subgrad(&t).data(), &[1.0, -1.0, 1.0]);
        assert_eq!(l1_subgrad(&Tensor::zeros(&[2])).data(), &[0.0, 0.0]);
    }
}
