use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::scalar::Scalar;

/// Adam with bias correction; moment estimates kept in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub const DEFAULT_LR: f64 = 1e-3;

    pub fn new(learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every trainable tensor from its accumulated gradient.
    pub fn update<T: Scalar>(&mut self, params: &mut ModelParams<T>) -> Result<()> {
        let tensors = params.trainable_mut();
        if self.first.is_empty() {
            self.first = tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != tensors.len() {
            return Err(Error::Contract("optimizer state does not match the model".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((tensor, m), v) in tensors.into_iter().zip(&mut self.first).zip(&mut self.second) {
            let grad: Vec<f64> = match tensor.grad() {
                Some(g) => g.iter().map(|x| x.as_f64()).collect(),
                None => continue,
            };
            for (((p, g), m), v) in tensor
                .data_mut()
                .iter_mut()
                .zip(grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let delta = self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
                *p = T::from_f64_lossy(p.as_f64() - delta);
            }
        }
        Ok(())
    }
}

/// Plain gradient descent step `p -= lr * grad`.
pub fn sgd_update<T: Scalar>(params: &mut ModelParams<T>, learning_rate: f64) {
    for tensor in params.trainable_mut() {
        let grad: Vec<f64> = match tensor.grad() {
            Some(g) => g.iter().map(|x| x.as_f64()).collect(),
            None => continue,
        };
        for (p, g) in tensor.data_mut().iter_mut().zip(grad) {
            *p = T::from_f64_lossy(p.as_f64() - learning_rate * g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_step_moves_each_weight_by_the_learning_rate() {
        let config = ModelConfig::grayscale28();
        let mut params = ModelParams::<f64>::init(&config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let before = params.clone();
        for t in params.trainable_mut() {
            let g: Vec<f64> = (0..t.numel()).map(|i| if i % 2 == 0 { 3.0 } else { -0.5 }).collect();
            t.accumulate_grad(&g).unwrap();
        }
        let mut adam = Adam::new(1e-3).unwrap();
        adam.update(&mut params).unwrap();
        for ((_, a), (_, b)) in params.named_trainable().into_iter().zip(before.named_trainable()) {
            for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
                let expected = if i % 2 == 0 { -1e-3 } else { 1e-3 };
                assert!((x - y - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn non_positive_rate_is_rejected() {
        assert!(Adam::new(0.0).is_err());
        assert!(Adam::new(f64::NAN).is_err());
    }
}
