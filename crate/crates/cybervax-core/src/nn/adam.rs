//! Adam optimiser over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
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

/// Stateful optimiser. The step counter `t` drives bias correction and is
/// part of the checkpoint, so a resumed run continues bit-exactly.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, t: 0 }
    }

    /// One update from the gradients accumulated in the store. Gradients
    /// are not cleared here; call `zero_grads` when starting the next step.
    pub fn step<S: Scalar>(&mut self, store: &mut ParamStore<S>) {
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let lr = S::of_f64(c.lr);
        let b1 = S::of_f64(c.beta1);
        let b2 = S::of_f64(c.beta2);
        let one_m_b1 = S::of_f64(1.0 - c.beta1);
        let one_m_b2 = S::of_f64(1.0 - c.beta2);
        let inv_bc1 = S::of_f64(1.0 / bc1);
        let inv_bc2 = S::of_f64(1.0 / bc2);
        let eps = S::of_f64(c.eps);
        for (_, e) in store.iter_mut() {
            ndarray::Zip::from(&mut e.value)
                .and(&mut e.adam_m)
                .and(&mut e.adam_v)
                .and(&e.grad)
                .for_each(|val, m, v, &g| {
                    *m = b1 * *m + one_m_b1 * g;
                    *v = b2 * *v + one_m_b2 * g * g;
                    let mhat = *m * inv_bc1;
                    let vhat = *v * inv_bc2;
                    *val = *val - lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    /// Hand-computed two-step Adam trace on a single weight with constant
    /// gradient 1, default hyperparameters.
    #[test]
    fn matches_hand_rolled_reference_steps() {
        let mut store = ParamStore::<f64>::new();
        store.declare("w", Array4::from_elem((1, 1, 1, 1), 1.0)).unwrap();
        let mut adam = Adam::new(AdamConfig::default());

        // Step 1: m=0.1, v=0.001; mhat=1, vhat=1; Δ = lr·1/(1+eps)
        store.entry_mut("w").unwrap().grad.fill(1.0);
        adam.step(&mut store);
        let w1 = store.value("w").unwrap()[[0, 0, 0, 0]];
        let expect1 = 1.0 - 1e-4 * 1.0 / (1.0f64.sqrt() + 1e-8);
        assert!((w1 - expect1).abs() < 1e-15, "{w1} vs {expect1}");

        // Step 2 with the same gradient.
        store.zero_grads();
        store.entry_mut("w").unwrap().grad.fill(1.0);
        adam.step(&mut store);
        let m2: f64 = 0.9 * 0.1 + 0.1;
        let v2: f64 = 0.999 * 0.001 + 0.001;
        let mhat = m2 / (1.0 - 0.9f64.powi(2));
        let vhat = v2 / (1.0 - 0.999f64.powi(2));
        let expect2 = expect1 - 1e-4 * mhat / (vhat.sqrt() + 1e-8);
        let w2 = store.value("w").unwrap()[[0, 0, 0, 0]];
        assert!((w2 - expect2).abs() < 1e-15, "{w2} vs {expect2}");
        assert_eq!(adam.t, 2);
    }

    #[test]
    fn descends_a_quadratic() {
        // Minimise (w − 3)²; Adam should close most of the gap.
        let mut store = ParamStore::<f64>::new();
        store.declare("w", Array4::from_elem((1, 1, 1, 1), 0.0)).unwrap();
        let mut adam = Adam::new(AdamConfig { lr: 0.05, ..AdamConfig::default() });
        for _ in 0..400 {
            store.zero_grads();
            let w = store.value("w").unwrap()[[0, 0, 0, 0]];
            store.entry_mut("w").unwrap().grad.fill(2.0 * (w - 3.0));
            adam.step(&mut store);
        }
        let w = store.value("w").unwrap()[[0, 0, 0, 0]];
        assert!((w - 3.0).abs() < 0.1, "ended at {w}");
    }
}
