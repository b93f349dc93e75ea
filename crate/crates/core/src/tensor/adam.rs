//! Adam with bias correction.

use super::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
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

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
    pub step_count: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState {
            first_moment: vec![T::zero(); len],
            second_moment: vec![T::zero(); len],
            step_count: 0,
        }
    }

    /// One update of `param` against `grad` with learning rate `cfg.lr`.
    pub fn step(&mut self, cfg: &AdamConfig, param: &mut [T], grad: &[T]) {
        assert_eq!(param.len(), self.first_moment.len());
        assert_eq!(grad.len(), param.len());
        self.step_count += 1;
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let bc1 = T::of(1.0 - cfg.beta1.powi(self.step_count as i32));
        let bc2 = T::of(1.0 - cfg.beta2.powi(self.step_count as i32));
        let (lr, eps, one) = (T::of(cfg.lr), T::of(cfg.eps), T::one());
        for (((p, &g), m), v) in param
            .iter_mut()
            .zip(grad)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Adam over a fixed, ordered list of parameters.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    states: Vec<AdamState<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, param_lens: impl IntoIterator<Item = usize>) -> Self {
        Adam {
            config,
            states: param_lens.into_iter().map(AdamState::new).collect(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn state(&self, i: usize) -> &AdamState<T> {
        &self.states[i]
    }

    pub fn step(&mut self, i: usize, param: &mut [T], grad: &[T]) {
        self.states[i].step(&self.config, param, grad);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![0.5f64, -1.0];
        let mut s = AdamState::new(2);
        let cfg = AdamConfig::default();
        for _ in 0..3 {
            s.step(&cfg, &mut p, &[0.0, 0.0]);
        }
        assert_eq!(p, vec![0.5, -1.0]);
        assert_eq!(s.step_count, 3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m = 0.1, v = 0.001; bias-corrected both 1 -> step = lr / (1 + eps).
        let cfg = AdamConfig { lr: 0.1, eps: 1e-12, ..Default::default() };
        let mut p = vec![1.0f64];
        let mut s = AdamState::new(1);
        s.step(&cfg, &mut p, &[1.0]);
        assert!((p[0] - 0.9).abs() < 1e-10);
    }

    #[test]
    fn two_steps_match_reference() {
        let cfg = AdamConfig { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let grads = [[0.3f64, -2.0], [-0.1, 0.5]];
        let mut p = vec![0.2f64, 0.7];
        let mut s = AdamState::new(2);
        for g in &grads {
            s.step(&cfg, &mut p, g);
        }
        // Reference written out step by step.
        let mut expect = [0.2f64, 0.7];
        for i in 0..2 {
            let (mut m, mut v) = (0.0f64, 0.0f64);
            for (t, g) in grads.iter().enumerate() {
                let t = t as i32 + 1;
                m = 0.9 * m + 0.1 * g[i];
                v = 0.999 * v + 0.001 * g[i] * g[i];
                let mh = m / (1.0 - 0.9f64.powi(t));
                let vh = v / (1.0 - 0.999f64.powi(t));
                expect[i] -= 0.01 * mh / (vh.sqrt() + 1e-8);
            }
        }
        for i in 0..2 {
            assert!((p[i] - expect[i]).abs() < 1e-10, "{} vs {}", p[i], expect[i]);
        }
    }
}
