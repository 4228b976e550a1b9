//! Adam with lazy (sparse) moment updates, run as gradient *ascent*.
//!
//! Only offsets listed in [`Gradient::touched`] advance their moments and
//! their own bias-correction step count; everything else is left untouched.

use serde::{Deserialize, Serialize};

use crate::elbo::Gradient;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: Vec<u32>,
    t: u64,
}

impl Adam {
    pub fn new(num_params: usize, config: AdamConfig) -> Self {
        Adam {
            config,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            steps: vec![0; num_params],
            t: 0,
        }
    }

    /// Number of `step` calls so far.
    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &Gradient) {
        assert_eq!(params.len(), self.m.len(), "optimizer state does not match parameters");
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.t += 1;
        for &o in &grad.touched {
            let g = grad.values[o];
            self.steps[o] += 1;
            let t = self.steps[o] as i32;
            self.m[o] = beta1 * self.m[o] + (1.0 - beta1) * g;
            self.v[o] = beta2 * self.v[o] + (1.0 - beta2) * g * g;
            let m_hat = self.m[o] / (1.0 - beta1.powi(t));
            let v_hat = self.v[o] / (1.0 - beta2.powi(t));
            params[o] += learning_rate * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad(values: Vec<f64>) -> Gradient {
        let touched = (0..values.len()).collect();
        Gradient { values, touched }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut adam = Adam::new(3, AdamConfig::default());
        let mut p = vec![1.0, -2.0, 0.5];
        adam.step(&mut p, &grad(vec![0.0; 3]));
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_is_learning_rate_times_sign() {
        let mut adam = Adam::new(3, AdamConfig::default());
        let mut p = vec![0.0; 3];
        let g = vec![3.0, -0.02, 1e-3];
        adam.step(&mut p, &grad(g.clone()));
        for (pi, gi) in p.iter().zip(&g) {
            // m̂ = g, v̂ = g² so Δ = γ g / (|g| + ε)
            let expected = 0.1 * gi / (gi.abs() + 1e-8);
            assert!((pi - expected).abs() < 1e-15, "{pi} vs {expected}");
            assert!((pi.abs() - 0.1).abs() < 1e-5);
        }
    }

    #[test]
    fn untouched_coordinates_keep_state() {
        let mut adam = Adam::new(2, AdamConfig::default());
        let mut p = vec![0.0, 0.0];
        let g = Gradient {
            values: vec![1.0, 5.0],
            touched: vec![0],
        };
        adam.step(&mut p, &g);
        adam.step(&mut p, &g);
        assert_eq!(p[1], 0.0);
        assert_eq!(adam.steps, vec![2, 0]);
        // a later first touch of coordinate 1 still gets a full-size step
        adam.step(
            &mut p,
            &Gradient {
                values: vec![0.0, 5.0],
                touched: vec![1],
            },
        );
        assert!((p[1] - 0.1).abs() < 1e-9);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut adam = Adam::new(2, AdamConfig::default());
            let mut p = vec![0.3, 0.1];
            for i in 0..50 {
                let g = grad(vec![-(p[0] - 1.0) + 0.01 * i as f64, -p[1]]);
                adam.step(&mut p, &g);
            }
            p
        };
        assert_eq!(
            run().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            run().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }
}
