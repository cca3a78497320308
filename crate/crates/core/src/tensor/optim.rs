use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
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

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
}

/// Adam with bias correction. Moment buffers are matched to parameters by
/// position, so every call must pass the same parameter list in the same order.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update and zeroes the gradients. Tensors that do not
    /// require gradients are left untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| (vec![0.0; p.numel()], vec![0.0; p.numel()]))
                .collect();
        }
        if self.moments.len() != params.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} tensors but was given {}",
                self.moments.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.requires_grad() && p.grad().is_none() {
                return Err(Error::contract(format!(
                    "trainable tensor #{i} (shape {:?}) has no gradient",
                    p.shape()
                )));
            }
            if self.moments[i].0.len() != p.numel() {
                return Err(Error::contract(format!(
                    "tensor #{i} changed size between optimizer steps"
                )));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (p, (m, v)) in params.iter_mut().zip(self.moments.iter_mut()) {
            if !p.requires_grad() {
                continue;
            }
            let mut g = p.take_grad().expect("checked above");
            {
                let data = p.data_mut();
                for j in 0..data.len() {
                    m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                    v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                    let mhat = m[j] / bc1;
                    let vhat = v[j] / bc2;
                    data[j] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
            g.iter_mut().for_each(|x| *x = 0.0);
            p.put_grad(g);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut w = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap().with_grad();
        w.accumulate_grad(&[0.0; 3]).unwrap();
        let before = w.to_le_bytes();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut [&mut w]).unwrap();
        assert_eq!(w.to_le_bytes(), before);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        let mut w = Tensor::new(&[1], vec![0.3]).unwrap().with_grad();
        w.accumulate_grad(&[1.0]).unwrap();
        let mut adam = Adam::new(AdamConfig::with_lr(1e-4));
        adam.step(&mut [&mut w]).unwrap();
        // m = 0.1, v = 0.001; both bias corrections give exactly 1.
        let m_hat = 0.1 / (1.0 - 0.9);
        let v_hat = 0.001 / (1.0 - 0.999);
        let expected = 0.3 - 1e-4 * m_hat / (f64::sqrt(v_hat) + 1e-8);
        assert!((w.data()[0] - expected).abs() < 1e-12);
        assert_eq!(w.grad().unwrap(), &[0.0]);
    }

    #[test]
    fn frozen_tensor_is_bit_identical() {
        let mut frozen = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let mut live = Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_grad();
        let before = frozen.to_le_bytes();
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        for _ in 0..5 {
            live.accumulate_grad(&[1.0, 1.0]).unwrap();
            frozen.accumulate_grad(&[1.0, 1.0]).unwrap();
            adam.step(&mut [&mut frozen, &mut live]).unwrap();
        }
        assert_eq!(frozen.to_le_bytes(), before);
        assert_ne!(live.data(), &[1.0, 2.0]);
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let mut w = Tensor::zeros(&[2]).with_grad();
        let mut adam = Adam::new(AdamConfig::default());
        assert!(matches!(adam.step(&mut [&mut w]), Err(Error::Contract(_))));
    }
}
