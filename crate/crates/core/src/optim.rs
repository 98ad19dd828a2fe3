use alloc::vec::Vec;

use crate::config::AdamConfig;
use crate::error::{Error, Result};
use crate::params::{Grads, ParamStore};
use crate::tensor::Matrix;

/// Bias-corrected Adam with a fixed learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Matrix::zeros(t.rows(), t.cols())).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    /// One update over all parameters.
    pub fn update(&mut self, params: &mut ParamStore, grads: &Grads) -> Result<()> {
        self.update_masked(params, grads, None)
    }

    /// One update; parameters with `trainable[i] == false` are left untouched
    /// and their moments are not advanced.
    pub fn update_masked(&mut self, params: &mut ParamStore, grads: &Grads, trainable: Option<&[bool]>) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape("optimizer state does not match parameters".into()));
        }
        if !grads.all_finite() {
            return Err(Error::NonFinite("gradients".into()));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - libm::pow(beta1, t as f64);
        let c2 = 1.0 - libm::pow(beta2, t as f64);
        for (id, g) in grads.iter() {
            if trainable.is_some_and(|tr| !tr[id.0]) {
                continue;
            }
            let p = params.get_mut(id);
            if p.shape() != g.shape() {
                return Err(Error::Shape("gradient shape differs from parameter".into()));
            }
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi -= lr * m_hat / (libm::sqrt(v_hat) + eps);
            }
        }
        Ok(())
    }
}
