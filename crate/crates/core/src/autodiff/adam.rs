use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    /// `lr = 1e-4` with the usual moment decay rates and no weight decay.
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected first and second moments.
#[derive(Debug, Clone)]
pub struct Adam<S: Real> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor<S>>,
    second: Vec<Tensor<S>>,
}

impl<S: Real> Adam<S> {
    /// Fresh state with zeroed accumulators shaped like `shapes`.
    pub fn new<'a>(config: AdamConfig, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let (first, second) = shapes.into_iter().map(|s| (Tensor::zeros(s), Tensor::zeros(s))).unzip();
        Self {
            config,
            step: 0,
            first,
            second,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. `params` and `grads` pair up with the
    /// accumulator order given at construction.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor<S>>, grads: &[Tensor<S>]) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (S::of(beta1), S::of(beta2));
        let (one_b1, one_b2) = (S::of(1.0 - beta1), S::of(1.0 - beta2));
        let (c1, c2, lr, eps) = (S::of(c1), S::of(c2), S::of(lr), S::of(eps));
        for (i, p) in params.into_iter().enumerate() {
            let g = &grads[i];
            assert_eq!(p.shape(), g.shape(), "parameter {i} and its gradient disagree");
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *x -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_adam(lr: f64) -> (Adam<f64>, Tensor<f64>) {
        let cfg = AdamConfig {
            lr,
            ..AdamConfig::default()
        };
        (Adam::new(cfg, [&[1usize][..]]), Tensor::scalar(1.0))
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        for g in [3.0, -0.02, 1e4] {
            let (mut opt, mut x) = scalar_adam(0.01);
            opt.step([&mut x], &[Tensor::scalar(g)]);
            let expected = 1.0 - 0.01 * f64::signum(g);
            assert!((x.data()[0] - expected).abs() < 1e-8, "{g}: {:?}", x);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let (mut opt, mut x) = scalar_adam(0.1);
        opt.step([&mut x], &[Tensor::scalar(0.0)]);
        assert_eq!(x.data()[0], 1.0);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn minimizes_square_in_hundred_steps() {
        // Independent scalar recurrence gives x_100 ~ 2.94e-3.
        let (mut opt, mut x) = scalar_adam(0.1);
        for _ in 0..100 {
            let g = 2.0 * x.data()[0];
            opt.step([&mut x], &[Tensor::scalar(g)]);
        }
        assert!(x.data()[0].abs() < 0.05);
        assert!((x.data()[0] - 2.936_675_681e-3).abs() < 1e-9);
    }
}
