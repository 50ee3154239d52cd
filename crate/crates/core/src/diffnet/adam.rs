use serde::{Deserialize, Serialize};

use super::DiffError;

/// Optimizer and loop settings shared by every trainable component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 64,
            epochs: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Checks the bounds; `learning_rate` may be zero to freeze parameters.
    pub fn validate(&self) -> Result<(), DiffError> {
        let bad = |field: &str, why: &str| Err(DiffError::Config(format!("{field} {why}")));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be a finite non-negative number");
        }
        if !(self.adam_beta1 > 0.0 && self.adam_beta1 < 1.0) {
            return bad("adam_beta1", "must lie in (0, 1)");
        }
        if !(self.adam_beta2 > 0.0 && self.adam_beta2 < 1.0) {
            return bad("adam_beta2", "must lie in (0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be positive");
        }
        Ok(())
    }
}

/// First/second moment buffers for a fixed list of parameter buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(lens: &[usize]) -> Self {
        Self {
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn lens(&self) -> Vec<usize> {
        self.m.iter().map(Vec::len).collect()
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn update(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[Vec<f64>],
        cfg: &TrainConfig,
    ) -> Result<(), DiffError> {
        if params.len() != self.m.len() {
            return Err(DiffError::MissingGradient(format!(
                "optimizer tracks {} buffers, got {} parameters",
                self.m.len(),
                params.len()
            )));
        }
        if grads.len() != params.len() {
            return Err(DiffError::MissingGradient(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(DiffError::MissingGradient(format!(
                    "parameter {i}: {} values, gradient {}, state {}",
                    p.len(),
                    g.len(),
                    self.m[i].len()
                )));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64) -> TrainConfig {
        TrainConfig { learning_rate: lr, ..TrainConfig::default() }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut w = vec![1.5, -2.0];
        let mut st = AdamState::new(&[2]);
        st.update(&mut [&mut w], &[vec![0.0, 0.0]], &cfg(0.1)).unwrap();
        assert_eq!(w, vec![1.5, -2.0]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut w = vec![0.0];
        let mut st = AdamState::new(&[1]);
        st.update(&mut [&mut w], &[vec![1.0]], &cfg(0.1)).unwrap();
        assert!((w[0] + 0.1).abs() < 1e-8, "w = {}", w[0]);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut w = vec![0.0];
        let mut st = AdamState::new(&[1]);
        let c = cfg(0.05);
        for _ in 0..500 {
            let g = vec![2.0 * (w[0] - 3.0)];
            st.update(&mut [&mut w], &[g], &c).unwrap();
        }
        assert!((w[0] - 3.0).abs() < 1e-2, "w = {}", w[0]);
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut w = vec![0.0];
        let mut st = AdamState::new(&[1]);
        assert!(st.update(&mut [&mut w], &[], &cfg(0.1)).is_err());
        assert!(st.update(&mut [&mut w], &[vec![1.0, 2.0]], &cfg(0.1)).is_err());
    }

    #[test]
    fn config_bounds() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { adam_beta1: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { adam_eps: 0.0, ..TrainConfig::default() }.validate().is_err());
    }
}
