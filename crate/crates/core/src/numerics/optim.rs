use serde::{Deserialize, Serialize};

use super::{NumericsError, ParamId, ParamStore, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment estimates are kept in `f64` regardless
/// of the parameter precision.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub(crate) m: Vec<Vec<f64>>,
    pub(crate) v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Scalar>(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .entries()
            .iter()
            .map(|e| vec![0.0; e.tensor.numel()])
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update. Any non-finite gradient aborts the whole step
    /// before a single parameter changes.
    pub fn step<T: Scalar>(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[(ParamId, Tensor<T>)],
    ) -> Result<(), NumericsError> {
        for (id, g) in grads {
            if !g.all_finite() {
                return Err(NumericsError::NonFiniteGradient(store.name(*id).to_string()));
            }
            if g.shape() != store.get(*id).shape() {
                return Err(super::shape_err("adam", store.name(*id).to_string()));
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
        for (id, g) in grads {
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(*id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i].to_f64_lossy();
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                p[i] = T::from_f64_lossy(p[i].to_f64_lossy() - update);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Init;

    fn scalar_store(w: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new(0);
        let id = s.add("w", &[1], Init::Constant(w)).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut s, id) = scalar_store(0.7);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &s);
        adam.step(&mut s, &[(id, Tensor::zeros(&[1]))]).unwrap();
        assert_eq!(s.get(id).data()[0], 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = scalar_store(0.0);
        let mut adam = Adam::new(AdamConfig::with_lr(0.01), &s);
        adam.step(&mut s, &[(id, Tensor::scalar(1.0))]).unwrap();
        assert!((s.get(id).data()[0] + 0.01).abs() < 1e-9);
    }

    #[test]
    fn minimizes_quadratic() {
        let (mut s, id) = scalar_store(1.0);
        let mut adam = Adam::new(AdamConfig::with_lr(0.05), &s);
        for _ in 0..500 {
            let w = s.get(id).data()[0];
            adam.step(&mut s, &[(id, Tensor::scalar(2.0 * w))]).unwrap();
        }
        assert!(s.get(id).data()[0].abs() < 1e-2);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let (mut s, id) = scalar_store(0.5);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &s);
        let err = adam.step(&mut s, &[(id, Tensor::scalar(f64::NAN))]).unwrap_err();
        assert_eq!(err, NumericsError::NonFiniteGradient("w".into()));
        assert_eq!(s.get(id).data()[0], 0.5);
        assert_eq!(adam.step, 0);
    }
}
