//! Adam over flat parameter slices.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
    /// Round updated parameters to `f32` so they serialize losslessly.
    round_to_f32: bool,
}

impl Adam {
    pub fn new(config: AdamConfig, param_count: usize) -> Self {
        Self {
            config,
            first: vec![0.0; param_count],
            second: vec![0.0; param_count],
            steps: 0,
            round_to_f32: true,
        }
    }

    pub fn without_rounding(mut self) -> Self {
        self.round_to_f32 = false;
        self
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update. `params` and `grads` are matching slice lists whose total
    /// length equals the optimizer's parameter count.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        assert_eq!(params.len(), grads.len());
        self.steps += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.steps as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        let mut offset = 0;
        for (p, g) in params.into_iter().zip(grads) {
            assert_eq!(p.len(), g.len());
            let m = &mut self.first[offset..offset + p.len()];
            let v = &mut self.second[offset..offset + p.len()];
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                let mut next = p[i] - learning_rate * m_hat / (v_hat.sqrt() + epsilon);
                if self.round_to_f32 {
                    next = next as f32 as f64;
                }
                p[i] = next;
            }
            offset += p.len();
        }
        assert_eq!(offset, self.first.len(), "parameter count changed");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut adam = Adam::new(
            AdamConfig {
                learning_rate: 0.05,
                ..Default::default()
            },
            2,
        )
        .without_rounding();
        for _ in 0..2000 {
            let g = vec![2.0 * (x[0] - 1.0), 2.0 * (x[1] + 0.5)];
            adam.step(vec![&mut x[..]], vec![&g[..]]);
        }
        assert!((x[0] - 1.0).abs() < 1e-3 && (x[1] + 0.5).abs() < 1e-3);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut x = vec![0.0];
        let mut adam = Adam::new(AdamConfig::default(), 1).without_rounding();
        adam.step(vec![&mut x[..]], vec![&[4.0][..]]);
        assert!((x[0] + 1e-4).abs() < 1e-10);
    }

    #[test]
    fn rounding_keeps_f32_values() {
        let mut x = vec![0.1f32 as f64];
        let mut adam = Adam::new(AdamConfig::default(), 1);
        adam.step(vec![&mut x[..]], vec![&[0.3][..]]);
        assert_eq!(x[0], x[0] as f32 as f64);
    }
}
