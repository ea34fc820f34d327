//! Adam with bias correction, keyed by parameter name.

use std::collections::BTreeMap;

use crate::model::ModelParams;
use crate::tensor::Matrix;

use super::TrainError;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Completed update steps.
    pub step: u64,
    /// First and second moment accumulators per parameter.
    moments: BTreeMap<String, (Matrix, Matrix)>,
}

impl AdamState {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One optimizer step over every parameter that received a gradient.
    ///
    /// A non-finite gradient aborts without touching any parameter.
    pub fn apply(
        &mut self,
        params: &mut ModelParams,
        grads: &BTreeMap<String, Matrix>,
    ) -> Result<(), TrainError> {
        for (name, grad) in grads {
            if !grad.is_finite() {
                return Err(TrainError::NonFinite {
                    what: format!("gradient of {name}"),
                });
            }
        }

        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);

        for (name, param) in params.named_mut() {
            let Some(grad) = grads.get(&name) else {
                continue;
            };
            assert_eq!(
                grad.shape(),
                param.shape(),
                "gradient shape mismatch for {name}"
            );
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (Matrix::zeros(grad.rows(), grad.cols()), Matrix::zeros(grad.rows(), grad.cols())));
            for ((p, g), (m, v)) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()))
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::model::Sizes;
    use approx::assert_relative_eq;

    fn tiny_params() -> ModelParams {
        let config = RunConfig {
            embed_dim: 2,
            user_dim: 2,
            time_dim: 2,
            graph_dim: 2,
            hidden_dim: 2,
            attention_heads: 1,
            hour_slots: 4,
            ..RunConfig::default()
        };
        ModelParams::new(
            &config,
            Sizes {
                users: 1,
                activities: 2,
                locations: 2,
                hour_slots: 4,
            },
            3,
        )
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = tiny_params();
        let before = params.clone();
        let mut adam = AdamState::new(1e-3, 0.9, 0.999, 1e-8);
        let grads: BTreeMap<String, Matrix> = params
            .named()
            .into_iter()
            .map(|(n, m)| (n, Matrix::zeros(m.rows(), m.cols())))
            .collect();
        adam.apply(&mut params, &grads).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        // With a constant gradient, the bias-corrected ratio at t = 1 is
        // g / |g|, so the update magnitude is the learning rate (up to eps).
        let mut params = tiny_params();
        let before = params.user_emb.clone();
        let mut adam = AdamState::new(1e-3, 0.9, 0.999, 1e-8);
        let mut grads = BTreeMap::new();
        grads.insert(
            "embed.user".to_string(),
            Matrix::from_vec(1, 2, vec![0.5, -2.0]),
        );
        adam.apply(&mut params, &grads).unwrap();
        for (after, before) in params.user_emb.data().iter().zip(before.data()) {
            assert_relative_eq!((after - before).abs(), 1e-3, epsilon = 1e-7);
        }
        // Sign opposes the gradient.
        assert!(params.user_emb.data()[0] < before.data()[0]);
        assert!(params.user_emb.data()[1] > before.data()[1]);
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let mut params = tiny_params();
        let before = params.clone();
        let mut adam = AdamState::new(1e-3, 0.9, 0.999, 1e-8);
        let mut grads = BTreeMap::new();
        grads.insert(
            "embed.user".to_string(),
            Matrix::from_vec(1, 2, vec![f64::NAN, 0.0]),
        );
        assert!(adam.apply(&mut params, &grads).is_err());
        assert_eq!(params, before);
    }

    #[test]
    fn deterministic_across_runs() {
        let run = || {
            let mut params = tiny_params();
            let mut adam = AdamState::new(1e-3, 0.9, 0.999, 1e-8);
            for step in 0..10 {
                let grads: BTreeMap<String, Matrix> = params
                    .named()
                    .into_iter()
                    .map(|(n, m)| {
                        let g = Matrix::from_vec(
                            m.rows(),
                            m.cols(),
                            (0..m.len()).map(|i| ((i + step) as f64).sin()).collect(),
                        );
                        (n, g)
                    })
                    .collect();
                adam.apply(&mut params, &grads).unwrap();
            }
            params
        };
        assert_eq!(run(), run());
    }
}
