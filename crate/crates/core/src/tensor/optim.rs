//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moment buffers, one per parameter, plus the step count.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self { m, v, t: 0 }
    }
}

/// One AdamW update of a single buffer at step `t` (1-based, already
/// incremented). Decay is applied to the weights before the Adam delta:
/// `w <- w - lr*wd*w`, then `w <- w - lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adamw_update(w: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32], t: u64, cfg: &AdamWConfig) {
    let lr = cfg.learning_rate as f64;
    let (b1, b2) = (cfg.beta1 as f64, cfg.beta2 as f64);
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    let decay = 1.0 - lr * cfg.weight_decay as f64;
    for i in 0..w.len() {
        let gi = g[i] as f64;
        let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
        let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let step = lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps as f64);
        w[i] = (w[i] as f64 * decay - step) as f32;
    }
}

/// AdamW over a fixed list of parameter tensors.
#[derive(Debug)]
pub struct AdamW {
    params: Vec<Tensor>,
    state: OptimizerState,
    pub config: AdamWConfig,
}

impl AdamW {
    pub fn new(params: Vec<Tensor>, config: AdamWConfig) -> Result<Self> {
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::Config(format!(
                "Adam betas must lie in [0, 1): {} {}",
                config.beta1, config.beta2
            )));
        }
        let state = OptimizerState::new(params.iter().map(Tensor::numel));
        Ok(Self { params, state, config })
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    /// Applies one update using the gradients currently stored on the
    /// parameters. A parameter without a gradient is treated as having a
    /// zero gradient (it still decays).
    pub fn step(&mut self) {
        self.state.t += 1;
        let t = self.state.t;
        for (i, p) in self.params.iter().enumerate() {
            let g = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
            let mut w = p.to_vec();
            adamw_update(&mut w, &g, &mut self.state.m[i], &mut self.state.v[i], t, &self.config);
            p.assign(&w).expect("optimizer state matches parameter shape");
        }
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(Tensor::zero_grad);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f32, wd: f32) -> AdamWConfig {
        AdamWConfig {
            learning_rate: lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let mut w = vec![0.3, -1.2];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adamw_update(&mut w, &[0.0, 0.0], &mut m, &mut v, 1, &cfg(0.1, 0.0));
        assert_eq!(w, vec![0.3, -1.2]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // bias-corrected m_hat = 1, v_hat = 1
        let mut w = vec![1.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        adamw_update(&mut w, &[1.0], &mut m, &mut v, 1, &cfg(0.1, 0.0));
        assert!((w[0] - 0.9).abs() < 1e-6, "{}", w[0]);
    }

    #[test]
    fn decay_only_step() {
        let mut w = vec![1.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        adamw_update(&mut w, &[0.0], &mut m, &mut v, 1, &cfg(0.1, 0.1));
        assert!((w[0] - 0.99).abs() < 1e-7);
    }

    #[test]
    fn optimizer_counts_steps_and_rejects_bad_betas() {
        let p = Tensor::parameter(vec![1.0, 2.0], &[2]).unwrap();
        let mut opt = AdamW::new(vec![p.clone()], cfg(0.1, 0.0)).unwrap();
        p.sum().backward().unwrap();
        opt.step();
        opt.step();
        assert_eq!(opt.state().t, 2);
        opt.zero_grad();
        assert!(p.grad().is_none());
        let bad = AdamWConfig { beta1: 1.0, ..cfg(0.1, 0.0) };
        assert!(AdamW::new(vec![p], bad).is_err());
    }
}
