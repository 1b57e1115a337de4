//! Bias-corrected ADAM over an ordered list of parameter tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid ADAM hyperparameters {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub step_count: u64,
    pub config: AdamConfig,
    first_moment: Vec<DenseTensor<T>>,
    second_moment: Vec<DenseTensor<T>>,
    names: Vec<String>,
}

impl<T: Real> AdamState<T> {
    /// Zero moments for parameters with the given names and shapes.
    pub fn new<'a>(
        config: AdamConfig,
        params: impl IntoIterator<Item = (String, &'a [usize])>,
    ) -> Result<Self> {
        config.validate()?;
        let mut names = Vec::new();
        let mut first_moment = Vec::new();
        for (name, shape) in params {
            names.push(name);
            first_moment.push(DenseTensor::zeros(shape));
        }
        Ok(Self {
            step_count: 0,
            config,
            second_moment: first_moment.clone(),
            first_moment,
            names,
        })
    }

    pub fn first_moment(&self) -> &[DenseTensor<T>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[DenseTensor<T>] {
        &self.second_moment
    }

    fn name(&self, i: usize) -> String {
        self.names
            .get(i)
            .cloned()
            .unwrap_or_else(|| format!("param[{i}]"))
    }

    /// Applies one update in place. Nothing is modified if any gradient is
    /// non-finite or any shape disagrees.
    pub fn step(&mut self, params: &mut [&mut DenseTensor<T>], grads: &[&DenseTensor<T>]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "ADAM tracks {} tensors, got {} parameters and {} gradients",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first_moment[i].shape() {
                return Err(Error::Shape(format!(
                    "{}: parameter {:?}, gradient {:?}",
                    self.name(i),
                    p.shape(),
                    g.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    tensor: format!("gradient of {}", self.name(i)),
                });
            }
        }

        self.step_count += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as i32;
        let correction1 = 1.0 - beta1.powi(t);
        let correction2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (one_minus_b1, one_minus_b2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
        let (c1, c2) = (T::of(correction1), T::of(correction2));
        let (lr, eps) = (T::of(lr), T::of(epsilon));

        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for (((w, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = b1 * *mv + one_minus_b1 * gv;
                *vv = b2 * *vv + one_minus_b2 * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Value-semantics form of [`AdamState::step`].
pub fn adam_step<T: Real>(
    weights: &[DenseTensor<T>],
    gradients: &[DenseTensor<T>],
    state: &AdamState<T>,
) -> Result<(Vec<DenseTensor<T>>, AdamState<T>)> {
    let mut new_weights = weights.to_vec();
    let mut new_state = state.clone();
    {
        let mut refs: Vec<&mut DenseTensor<T>> = new_weights.iter_mut().collect();
        let grads: Vec<&DenseTensor<T>> = gradients.iter().collect();
        new_state.step(&mut refs, &grads)?;
    }
    Ok((new_weights, new_state))
}
