use crate::error::{Error, Result};

use super::MlpParams;

/// ADAM moments and hyperparameters over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Standard defaults: β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn new(num_params: usize, learning_rate: f64) -> Self {
        Self::with_hyperparameters(num_params, learning_rate, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparameters(
        num_params: usize,
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    ) -> Self {
        Self {
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step_count: 0,
            learning_rate,
            beta1,
            beta2,
            epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0
            && self.first_moment.len() == self.second_moment.len();
        if ok {
            Ok(())
        } else {
            Err(Error::Config("invalid ADAM hyperparameters".into()))
        }
    }

    /// One bias-corrected ADAM update of `params` in place.
    ///
    /// A non-finite gradient aborts the step before anything is modified.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return Err(Error::Shape {
                context: "ADAM parameters",
                expected: self.first_moment.len(),
                got: params.len(),
            });
        }
        if grads.len() != params.len() {
            return Err(Error::Shape {
                context: "ADAM gradients",
                expected: params.len(),
                got: grads.len(),
            });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::PoisonedGradient {
                iteration: self.step_count + 1,
                function: None,
            });
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Functional form over a single network.
pub fn adam_step(
    params: &MlpParams,
    grads: &MlpParams,
    state: &AdamState,
) -> Result<(MlpParams, AdamState)> {
    if params.layer_sizes() != grads.layer_sizes() {
        return Err(Error::Contract(
            "gradient shapes do not match the parameters".into(),
        ));
    }
    let mut flat = params.to_flat();
    let mut next = state.clone();
    next.step(&mut flat, &grads.to_flat())?;
    let mut out = params.clone();
    out.set_flat(&flat)?;
    Ok((out, next))
}
