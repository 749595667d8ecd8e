use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &BTreeMap<String, Tensor>) -> Self {
        let zeros: BTreeMap<_, _> = params
            .iter()
            .map(|(k, p)| (k.clone(), Tensor::zeros(p.shape())))
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One Adam update of `params` in place.
    ///
    /// Every parameter must have a gradient of the same shape. Gradients for
    /// names that are not parameters are ignored, which lets callers pass
    /// the full gradient map of a graph that also contains frozen inputs.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::invalid(format!("no gradient for parameter `{name}`")))?;
            if g.shape() != p.shape() {
                return Err(Error::shape(
                    name.clone(),
                    format!("grad {:?} vs param {:?}", g.shape(), p.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
            if !self.m.contains_key(name) {
                return Err(Error::invalid(format!("optimizer has no slot for `{name}`")));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let g = grads[name].data();
            let m = self.m.get_mut(name).unwrap().data_mut();
            let v = self.v.get_mut(name).unwrap().data_mut();
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("p".to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut params = single(0.7);
        let mut st = AdamState::new(AdamConfig::default(), &params);
        for _ in 0..3 {
            st.step(&mut params, &single(0.0), 0.1).unwrap();
        }
        assert_eq!(params["p"].item(), 0.7);
        assert_eq!(st.m["p"].item(), 0.0);
        assert_eq!(st.step, 3);
    }

    #[test]
    fn moments_decay_under_zero_grads() {
        let mut params = single(0.7);
        let mut st = AdamState::new(AdamConfig::default(), &params);
        st.step(&mut params, &single(1.0), 0.1).unwrap();
        let (m0, v0) = (st.m["p"].item(), st.v["p"].item());
        st.step(&mut params, &single(0.0), 0.1).unwrap();
        assert_eq!(st.m["p"].item(), 0.9 * m0);
        assert_eq!(st.v["p"].item(), 0.999 * v0);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m1 = 0.1, v1 = 0.001; m_hat = 1, v_hat = 1; update = lr / (1 + 1e-8)
        let mut params = single(0.0);
        let mut st = AdamState::new(AdamConfig::default(), &params);
        st.step(&mut params, &single(1.0), 0.01).unwrap();
        let expected = -0.01 / (1.0 + 1e-8);
        assert!((params["p"].item() - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_update_magnitude_is_lr() {
        let mut params = single(0.0);
        let mut st = AdamState::new(AdamConfig::default(), &params);
        let lr = 1e-3;
        let mut prev = 0.0;
        for _ in 0..2000 {
            st.step(&mut params, &single(-2.5), lr).unwrap();
            let now = params["p"].item();
            let delta = now - prev;
            assert!((delta - lr).abs() < 1e-9, "delta {delta}");
            prev = now;
        }
    }

    #[test]
    fn rejects_non_finite_and_missing() {
        let mut params = single(0.0);
        let mut st = AdamState::new(AdamConfig::default(), &params);
        assert!(st.step(&mut params, &single(f64::NAN), 0.1).is_err());
        assert!(st.step(&mut params, &BTreeMap::new(), 0.1).is_err());
        assert_eq!(st.step, 0);
        assert_eq!(params["p"].item(), 0.0);
    }
}
