//! Adam with explicit, serializable state.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{NamedArray, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

const EPS: f64 = 1e-8;

struct Slot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
}

/// Adam over one or more parameter sets. Variables without a gradient in a
/// given step are left untouched, moments included.
pub struct Adam {
    config: AdamConfig,
    steps: u64,
    slots: Vec<Slot>,
}

impl Adam {
    pub fn new(params: &[&ParamSet], config: AdamConfig) -> Result<Self> {
        let mut slots = Vec::new();
        for (set_index, set) in params.iter().enumerate() {
            for (name, var) in set.vars() {
                slots.push(Slot {
                    name: format!("{set_index}.{name}"),
                    var: var.clone(),
                    m: var.as_tensor().zeros_like()?,
                    v: var.as_tensor().zeros_like()?,
                });
            }
        }
        Ok(Self {
            config,
            steps: 0,
            slots,
        })
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Gradients for the optimized variables, in slot order.
    pub fn collect(&self, grads: &GradStore) -> Vec<Option<Tensor>> {
        self.slots
            .iter()
            .map(|s| grads.get(s.var.as_tensor()).cloned())
            .collect()
    }

    pub fn grad_norm(grads: &[Option<Tensor>]) -> Result<f64> {
        let mut total = 0.0f64;
        for g in grads.iter().flatten() {
            total += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
        Ok(total.sqrt())
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        let collected = self.collect(grads);
        self.step_with(&collected)
    }

    pub fn step_with(&mut self, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != self.slots.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.slots.len()
            )));
        }
        self.steps += 1;
        let AdamConfig { lr, beta1, beta2 } = self.config;
        let t = self.steps as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        for (slot, g) in self.slots.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            let g = g.detach();
            slot.m = ((slot.m.affine(beta1, 0.0)? + g.affine(1.0 - beta1, 0.0)?)?).detach();
            slot.v = ((slot.v.affine(beta2, 0.0)? + g.sqr()?.affine(1.0 - beta2, 0.0)?)?).detach();
            let m_hat = slot.m.affine(1.0 / bias1, 0.0)?;
            let v_hat = slot.v.affine(1.0 / bias2, 0.0)?;
            let update = m_hat.div(&v_hat.sqrt()?.affine(1.0, EPS)?)?.affine(lr, 0.0)?;
            let next = slot.var.as_tensor().detach().sub(&update)?;
            slot.var.set(&next)?;
        }
        Ok(())
    }

    /// Moments plus a one-element `step` array.
    pub fn state_arrays(&self, prefix: &str) -> Result<Vec<NamedArray>> {
        let mut out = vec![NamedArray {
            name: format!("{prefix}step"),
            shape: vec![1],
            data: vec![self.steps as f32],
        }];
        for s in &self.slots {
            out.push(NamedArray::from_tensor(format!("{prefix}m.{}", s.name), &s.m)?);
            out.push(NamedArray::from_tensor(format!("{prefix}v.{}", s.name), &s.v)?);
        }
        Ok(out)
    }

    pub fn load_state(&mut self, arrays: &[NamedArray], prefix: &str) -> Result<()> {
        let find = |name: &str| {
            arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| Error::InvalidArgument(format!("optimizer state {name} missing")))
        };
        self.steps = find(&format!("{prefix}step"))?.data[0] as u64;
        for s in &mut self.slots {
            s.m = find(&format!("{prefix}m.{}", s.name))?.to_tensor()?;
            s.v = find(&format!("{prefix}v.{}", s.name))?.to_tensor()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;

    fn scalar_param(value: f32) -> ParamSet {
        let mut p = ParamSet::new();
        p.add_uniform("w", &[1], 0.0, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        p.get("w")
            .set(&Tensor::new(&[value], &Device::Cpu).unwrap())
            .unwrap();
        p
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let p = scalar_param(1.0);
        let mut opt = Adam::new(&[&p], AdamConfig { lr: 0.1, beta1: 0.5, beta2: 0.999 }).unwrap();
        // loss = 3 w  => gradient +3, so w must decrease by ~lr
        let loss = p.get("w").as_tensor().affine(3.0, 0.0).unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let w: Vec<f32> = p.get("w").as_tensor().to_vec1().unwrap();
        assert!((w[0] - 0.9).abs() < 1e-6, "{w:?}");
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let p = scalar_param(0.25);
        let mut opt = Adam::new(&[&p], AdamConfig { lr: 0.0, beta1: 0.5, beta2: 0.999 }).unwrap();
        let loss = p.get("w").as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let w: Vec<f32> = p.get("w").as_tensor().to_vec1().unwrap();
        assert_eq!(w[0].to_bits(), 0.25f32.to_bits());
    }

    #[test]
    fn missing_gradient_skips_variable() {
        let p = scalar_param(0.5);
        let mut opt = Adam::new(&[&p], AdamConfig { lr: 0.1, beta1: 0.5, beta2: 0.999 }).unwrap();
        opt.step_with(&[None]).unwrap();
        let w: Vec<f32> = p.get("w").as_tensor().to_vec1().unwrap();
        assert_eq!(w[0], 0.5);
    }

    #[test]
    fn state_round_trip() {
        let p = scalar_param(1.0);
        let cfg = AdamConfig { lr: 0.1, beta1: 0.5, beta2: 0.999 };
        let mut opt = Adam::new(&[&p], cfg).unwrap();
        let loss = p.get("w").as_tensor().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let state = opt.state_arrays("opt.").unwrap();
        let mut other = Adam::new(&[&p], cfg).unwrap();
        other.load_state(&state, "opt.").unwrap();
        assert_eq!(other.steps(), 1);
        assert_eq!(other.state_arrays("opt.").unwrap(), state);
    }
}
