//! AdamW with decoupled weight decay.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{decode, encode};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay,
        }
    }
}

/// One AdamW update of a single tensor. `step` is the 1-based step count.
/// Decay is applied first: θ ← θ·(1 − lr·wd), then θ ← θ − lr·m̂/(√v̂ + eps).
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    cfg: &AdamWConfig,
    decay: bool,
) {
    let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
    let lr = T::c(cfg.lr);
    let eps = T::c(cfg.eps);
    let one = T::one();
    let bc1 = one - T::c(cfg.beta1.powf(step as f64));
    let bc2 = one - T::c(cfg.beta2.powf(step as f64));
    let shrink = if decay { one - lr * T::c(cfg.weight_decay) } else { one };
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        param[i] = param[i] * shrink - lr * mh / (vh.sqrt() + eps);
    }
}

/// Optimizer state over every parameter of a store, in registration order.
/// Matrices (rank ≥ 2) are decayed; vectors and scalars (biases, norms,
/// temperatures) are not.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies the accumulated gradients of `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Compat(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if m.shape() != p.value.shape() {
                return Err(Error::Compat(format!("optimizer state shape mismatch for {}", p.name)));
            }
            let decay = p.value.shape().len() >= 2;
            adamw_update(
                p.value.data_mut(),
                p.grad.data(),
                m.data_mut(),
                v.data_mut(),
                self.step,
                &self.config,
                decay,
            );
        }
        Ok(())
    }

    /// GAMS-encoded moments plus the step counter.
    pub fn to_bytes(&self, store: &ParamStore<T>) -> Vec<u8> {
        let step = Tensor::scalar(T::from_f64_lossy(self.step as f64));
        let names: Vec<(String, String)> = store
            .iter()
            .map(|(_, p)| (format!("adamw.m.{}", p.name), format!("adamw.v.{}", p.name)))
            .collect();
        let mut entries: Vec<(&str, &Tensor<T>)> = vec![("adamw.step", &step)];
        for (i, (mn, vn)) in names.iter().enumerate() {
            entries.push((mn, &self.m[i]));
            entries.push((vn, &self.v[i]));
        }
        encode(entries)
    }

    pub fn from_bytes(store: &ParamStore<T>, config: AdamWConfig, bytes: &[u8]) -> Result<Self> {
        let tensors = decode(bytes)?;
        let find = |name: &str| {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Compat(format!("optimizer state lacks {name}")))
        };
        let step = find("adamw.step")?.value.data()[0];
        if tensors.len() != 1 + 2 * store.len() {
            return Err(Error::Compat("optimizer state does not match the parameter set".into()));
        }
        let mut opt = Self::new(store, config);
        opt.step = step as u64;
        for (i, (_, p)) in store.iter().enumerate() {
            for (slot, kind) in [(&mut opt.m[i], "m"), (&mut opt.v[i], "v")] {
                let t = &find(&format!("adamw.{kind}.{}", p.name))?.value;
                if t.shape() != p.value.shape() {
                    return Err(Error::Compat(format!("optimizer state shape mismatch for {}", p.name)));
                }
                *slot = t.cast();
            }
        }
        Ok(opt)
    }

    pub fn save(&self, store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes(store))?;
        Ok(())
    }

    pub fn load(store: &ParamStore<T>, config: AdamWConfig, path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(store, config, &std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.register("w", Tensor::from_f64(&[1, v.len()], v).unwrap()).unwrap();
        s.register("b", Tensor::from_f64(&[v.len()], v).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut s = store(&[0.5, -2.0]);
        let before = s.clone();
        let mut opt = AdamW::new(&s, AdamWConfig::new(1e-2, 0.0));
        opt.step(&mut s).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut s = store(&[0.5, -2.0]);
        s.get_mut(s.id("w").unwrap()).grad = Tensor::from_f64(&[1, 2], &[3.0, -1.0]).unwrap();
        let before: Vec<_> = s.iter().map(|(_, p)| p.value.clone()).collect();
        let mut opt = AdamW::new(&s, AdamWConfig::new(0.0, 0.1));
        opt.step(&mut s).unwrap();
        let after: Vec<_> = s.iter().map(|(_, p)| p.value.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let cfg = AdamWConfig::new(0.1, 0.0);
        let (mut p, g) = ([1.0f64], [0.5f64]);
        let (mut m, mut v) = ([0.0], [0.0]);
        adamw_update(&mut p, &g, &mut m, &mut v, 1, &cfg, true);
        let m1 = 0.1 * 0.5;
        let v1 = 0.001 * 0.25;
        let (mh, vh) = (m1 / 0.1, v1 / 0.001);
        assert!((m[0] - m1).abs() < 1e-15 && (v[0] - v1).abs() < 1e-15);
        let expect = 1.0 - 0.1 * mh / (vh.sqrt() + 1e-8);
        assert!((p[0] - expect).abs() < 1e-15);
        assert!((p[0] - 0.9).abs() < 1e-6);

        // second step, same gradient
        adamw_update(&mut p, &g, &mut m, &mut v, 2, &cfg, true);
        let m2 = 0.9 * m1 + 0.1 * 0.5;
        let v2 = 0.999 * v1 + 0.001 * 0.25;
        let expect2 = expect - 0.1 * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        assert!((p[0] - expect2).abs() < 1e-15);
    }

    #[test]
    fn decay_only_step_scales_matrices() {
        let mut s = store(&[2.0, -4.0]);
        let mut opt = AdamW::new(&s, AdamWConfig::new(0.5, 0.1));
        opt.step(&mut s).unwrap();
        assert_eq!(s.by_name("w").unwrap().value.data(), &[2.0 * 0.95, -4.0 * 0.95]);
        assert_eq!(s.by_name("b").unwrap().value.data(), &[2.0, -4.0]);
    }

    #[test]
    fn state_round_trip() {
        let mut s = store(&[0.5, -2.0]);
        s.get_mut(s.id("b").unwrap()).grad = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let mut opt = AdamW::new(&s, AdamWConfig::new(1e-2, 0.01));
        opt.step(&mut s).unwrap();
        opt.step(&mut s).unwrap();
        let back = AdamW::from_bytes(&s, opt.config, &opt.to_bytes(&s)).unwrap();
        assert_eq!(back, opt);
        let other = store(&[1.0, 2.0, 3.0]);
        assert!(AdamW::from_bytes(&other, opt.config, &opt.to_bytes(&s)).is_err());
    }
}
