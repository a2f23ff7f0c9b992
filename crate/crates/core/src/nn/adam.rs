use serde::{Deserialize, Serialize};

use super::{NnError, ParamStore, Result, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment accumulators for bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(NnError::InvalidArgument(format!("learning rate {} must be positive", config.lr)));
        }
        let zeros: Vec<Vec<T>> = params.iter().map(|(_, p)| vec![T::zero(); p.len()]).collect();
        Ok(Self { config, t: 0, m: zeros.clone(), v: zeros })
    }

    /// One update. `grads` must follow the parameter order of the store.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() || grads.len() != self.m.len() {
            return Err(NnError::ShapeMismatch(format!(
                "adam: {} parameters, {} gradients, {} accumulators",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(NnError::ShapeMismatch(format!(
                    "adam: parameter {name} is {:?}, gradient is {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let bc1 = T::from_f64(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(self.t as i32));
        let (lr, eps) = (T::from_f64(c.lr), T::from_f64(c.eps));
        for (k, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (pi, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(v));
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = store(1.25);
        let mut st = AdamState::new(AdamConfig::default(), &p).unwrap();
        st.step(&mut p, &[Tensor::scalar(0.0)]).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.25]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction m_hat = g and v_hat = g^2 at t = 1.
        let mut p = store(0.0);
        let mut st = AdamState::new(AdamConfig::default(), &p).unwrap();
        st.step(&mut p, &[Tensor::scalar(0.1)]).unwrap();
        let expected = -3e-4 * 0.1 / (0.1 + 1e-8);
        assert!((p.get("w").unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_steps_do_not_grow() {
        let mut p = store(0.0);
        let mut st = AdamState::new(AdamConfig::default(), &p).unwrap();
        st.step(&mut p, &[Tensor::scalar(0.1)]).unwrap();
        let d1 = p.get("w").unwrap().data()[0];
        st.step(&mut p, &[Tensor::scalar(0.1)]).unwrap();
        let d2 = p.get("w").unwrap().data()[0] - d1;
        assert!(d2.abs() <= d1.abs() + 1e-12);
    }

    #[test]
    fn rejects_bad_shapes_and_rates() {
        let mut p = store(0.0);
        let mut st = AdamState::new(AdamConfig::default(), &p).unwrap();
        assert!(st.step(&mut p, &[Tensor::zeros(&[2])]).is_err());
        assert!(AdamState::new(AdamConfig { lr: 0.0, ..Default::default() }, &p).is_err());
    }
}
