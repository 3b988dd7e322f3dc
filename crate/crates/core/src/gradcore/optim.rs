use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{KwsError, Result};

use super::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named trainable parameters with their Adam moments, plus non-trainable
/// buffers (batchnorm running statistics). Iteration is in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    adam: BTreeMap<String, AdamState>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(KwsError::Config(format!("duplicate parameter `{name}`")));
        }
        if !t.is_finite() {
            return Err(KwsError::Numeric(format!("non-finite initial value for `{name}`")));
        }
        let shape = t.shape().to_vec();
        self.adam.insert(
            name.to_string(),
            AdamState {
                m: Tensor::zeros(&shape),
                v: Tensor::zeros(&shape),
                step: 0,
            },
        );
        self.params.insert(name.to_string(), t);
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(KwsError::Config(format!("duplicate buffer `{name}`")));
        }
        self.buffers.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| KwsError::Missing(format!("parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| KwsError::Missing(format!("parameter `{name}`")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| KwsError::Missing(format!("buffer `{name}`")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| KwsError::Missing(format!("buffer `{name}`")))
    }

    pub fn adam_state(&self, name: &str) -> Option<&AdamState> {
        self.adam.get(name)
    }

    pub fn adam_state_mut(&mut self, name: &str) -> Option<&mut AdamState> {
        self.adam.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Uniform(-sqrt(1/fan_in), sqrt(1/fan_in)) weights.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Result<()> {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(shape, data)?)
    }

    /// One Adam update with bias correction. Parameters without a gradient
    /// entry are untouched. A non-finite gradient rejects the whole update.
    pub fn adam_step(&mut self, grads: &BTreeMap<String, Tensor>, lr: f64, cfg: AdamConfig) -> Result<()> {
        for (name, g) in grads {
            let p = self.get(name)?;
            if p.shape() != g.shape() {
                return Err(KwsError::dim("adam_step", p.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(KwsError::Numeric(format!("non-finite gradient for `{name}`")));
            }
        }
        for (name, g) in grads {
            let state = self.adam.get_mut(name).expect("adam state exists for every param");
            state.step += 1;
            let t = state.step as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            let p = self.params.get_mut(name).expect("checked above");
            let (m, v) = (state.m.data_mut(), state.v.data_mut());
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
                *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, Tensor::scalar(v)).unwrap();
        s
    }

    fn grad(name: &str, v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(name.to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn zero_gradient_leaves_everything() {
        let mut s = one("w", 0.4);
        s.adam_step(&grad("w", 0.0), 0.1, AdamConfig::default()).unwrap();
        assert_eq!(s.get("w").unwrap().item(), 0.4);
        let st = s.adam_state("w").unwrap();
        assert_eq!(st.m.item(), 0.0);
        assert_eq!(st.v.item(), 0.0);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [3.0, -0.02] {
            let mut s = one("w", 1.0);
            s.adam_step(&grad("w", g), 0.01, AdamConfig::default()).unwrap();
            let expected = 1.0 - 0.01 * g / (g.abs() + 1e-8);
            assert!((s.get("w").unwrap().item() - expected).abs() < 1e-15);
            assert_eq!(s.adam_state("w").unwrap().step, 1);
        }
    }

    #[test]
    fn three_steps_on_square_match_hand_iteration() {
        let mut s = one("w", 1.0);
        // hand iteration written out independently of adam_step
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let g = 2.0 * w;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.1 * mh / (vh.sqrt() + 1e-8);

            let cur = s.get("w").unwrap().item();
            s.adam_step(&grad("w", 2.0 * cur), 0.1, AdamConfig::default()).unwrap();
        }
        assert!((s.get("w").unwrap().item() - w).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let mut s = one("w", 1.0);
        let err = s.adam_step(&grad("w", f64::NAN), 0.1, AdamConfig::default());
        assert!(matches!(err, Err(KwsError::Numeric(_))));
        assert_eq!(s.get("w").unwrap().item(), 1.0);
        assert_eq!(s.adam_state("w").unwrap().step, 0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = one("w", 1.0);
        assert!(s.insert("w", Tensor::scalar(2.0)).is_err());
    }
}
