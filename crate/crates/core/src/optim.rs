//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for a fixed subset of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub config: AdamConfig,
    pub step: u64,
    ids: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptState {
    pub fn new(config: AdamConfig, store: &ParamStore, ids: &[ParamId]) -> Self {
        let zeros = |id: &ParamId| vec![0.0; store.get(*id).numel()];
        Self {
            config,
            step: 0,
            ids: ids.to_vec(),
            m: ids.iter().map(zeros).collect(),
            v: ids.iter().map(zeros).collect(),
        }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn moments(&self, k: usize) -> (&[f64], &[f64]) {
        (&self.m[k], &self.v[k])
    }

    /// Restores accumulators, e.g. from a checkpoint.
    pub fn set_moments(&mut self, k: usize, m: Vec<f64>, v: Vec<f64>) -> Result<()> {
        if m.len() != self.m[k].len() || v.len() != self.v[k].len() {
            return Err(Error::shape("opt_state", "moment length mismatch"));
        }
        self.m[k] = m;
        self.v[k] = v;
        Ok(())
    }

    /// One update over every tracked parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        // Validate before touching anything so a failed step leaves state intact.
        for id in &self.ids {
            let g = grads
                .get(*id)
                .ok_or_else(|| Error::contract(format!("no gradient for {}", store.name(*id))))?;
            if g.numel() != store.get(*id).numel() {
                return Err(Error::shape(
                    "adam_step",
                    format!("gradient shape for {}", store.name(*id)),
                ));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (k, id) in self.ids.iter().enumerate() {
            let g = grads.get(*id).expect("validated above").data();
            let p = store.get(*id);
            let mut data = p.data().to_vec();
            for i in 0..data.len() {
                let m = &mut self.m[k][i];
                let v = &mut self.v[k][i];
                *m = beta1 * *m + (1.0 - beta1) * g[i];
                *v = beta2 * *v + (1.0 - beta2) * g[i] * g[i];
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            let updated = Tensor::new(p.shape().to_vec(), data)?;
            store.set(*id, updated)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn one_param(v: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::vector(vec![v]).unwrap());
        (store, id)
    }

    fn grads_of(store: &ParamStore, id: ParamId, g: f64) -> ParamGrads {
        let mut tape = Tape::new();
        let bound = store.bind_all(&mut tape);
        let w = bound.var(id);
        let c = tape.scale(w, g).unwrap();
        let s = tape.sum(c).unwrap();
        let grads = tape.backward(s).unwrap();
        bound.grads(&grads, &[id])
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut store, id) = one_param(1.5);
        let mut opt = OptState::new(AdamConfig::default(), &store, &[id]);
        let g = grads_of(&store, id, 0.0);
        opt.step(&mut store, &g).unwrap();
        assert_eq!(store.get(id).data(), &[1.5]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // t = 1: mhat = g, vhat = g^2, update = lr * g / (|g| + eps) ~ lr.
        let (mut store, id) = one_param(0.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut opt = OptState::new(cfg, &store, &[id]);
        let g = grads_of(&store, id, 1.0);
        opt.step(&mut store, &g).unwrap();
        let expected = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((store.get(id).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn deterministic_given_state() {
        let (store0, id) = one_param(0.3);
        let run = || {
            let mut store = store0.clone();
            let mut opt = OptState::new(AdamConfig::default(), &store, &[id]);
            for _ in 0..2 {
                let g = grads_of(&store, id, 0.7);
                opt.step(&mut store, &g).unwrap();
            }
            (store, opt)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let (mut store, id) = one_param(0.0);
        let mut opt = OptState::new(AdamConfig::default(), &store, &[id]);
        assert!(matches!(
            opt.step(&mut store, &ParamGrads::default()),
            Err(Error::Contract(_))
        ));
        assert_eq!(opt.step, 0);
    }
}
