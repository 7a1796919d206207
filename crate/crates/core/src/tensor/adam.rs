use serde::{Deserialize, Serialize};

use super::{ParamStore, Result, Scalar, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.lr > 0.0) || !(self.eps > 0.0) || !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(TensorError::Argument(format!("invalid Adam hyperparameters {self:?}")));
        }
        Ok(())
    }
}

/// Adam with bias correction.
///
/// Tensors whose gradient slot is empty or identically zero are skipped
/// entirely: neither their moments nor their values change. This keeps the
/// heads of tasks absent from an accumulation window bitwise frozen.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(config: AdamConfig, params: &ParamStore<F>) -> Result<Self> {
        config.validate()?;
        let zeros = || params.iter().map(|(_, _, t)| vec![F::zero(); t.len()]).collect();
        Ok(Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<F>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<F>] {
        &self.v
    }

    /// Applies one update from the gradients stored in `params`.
    /// Gradients are left in place; the caller zeroes them.
    pub fn step(&mut self, params: &mut ParamStore<F>) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(TensorError::State(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        for id in params.ids() {
            let n = params.get(id).len();
            if n != self.m[id.0].len() {
                return Err(TensorError::State(format!(
                    "tensor {} changed size from {} to {}",
                    params.name(id),
                    self.m[id.0].len(),
                    n
                )));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let b1 = F::lit(self.config.beta1);
        let b2 = F::lit(self.config.beta2);
        let one = F::one();
        let bc1 = one - F::lit(self.config.beta1.powi(t));
        let bc2 = one - F::lit(self.config.beta2.powi(t));
        let lr = F::lit(self.config.lr);
        let eps = F::lit(self.config.eps);

        for id in params.ids().collect::<Vec<_>>() {
            let tensor = params.get_mut(id);
            let Some(grad) = tensor.grad().map(<[F]>::to_vec) else { continue };
            if grad.iter().all(|g| *g == F::zero()) {
                continue;
            }
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            for (((w, &g), mi), vi) in tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
