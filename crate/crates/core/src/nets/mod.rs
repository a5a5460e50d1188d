//! Differentiable networks: the frozen surrogate embedder, the generator and
//! the discriminator, plus the parameter store they share.
//!
//! Parameters are candle [`Var`]s so that a scalar loss can be differentiated
//! with respect to both parameters and network inputs.

mod checkpoint;
mod discriminator;
mod embedder;
mod generator;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use checkpoint::{config_digest, load_checkpoint, save_checkpoint, Checkpoint, LoadedCheckpoint, NamedArray, MAGIC};
pub use discriminator::Discriminator;
pub use embedder::{
    build_toy_embedder, embed_images, embedder_from_checkpoint, train_embedder, victim_checkpoint, Arch, Embedder,
    LinearEmbedder, ToyEmbedder, VictimTrainConfig,
};
pub use generator::{Generator, GeneratorConfig};

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    vars: BTreeMap<String, Var>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter drawn uniformly from `[-bound, bound]`.
    pub(crate) fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        bound: f32,
        rng: &mut R,
    ) -> Result<()> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = if bound > 0.0 {
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        } else {
            vec![0.0; n]
        };
        let var = Var::from_vec(data, shape, &Device::Cpu)?;
        if self.vars.insert(name.to_string(), var).is_some() {
            return Err(Error::InvalidArgument(format!("parameter {name} declared twice")));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Element type of the stored parameters, `F32` unless cast.
    pub(crate) fn dtype(&self) -> DType {
        self.vars.values().next().map_or(DType::F32, |v| v.dtype())
    }

    /// Copy with every parameter converted, for double-precision gradient checks.
    #[cfg(test)]
    pub(crate) fn cast(&self, dtype: DType) -> Result<ParamSet> {
        let mut vars = BTreeMap::new();
        for (name, var) in &self.vars {
            vars.insert(name.clone(), Var::from_tensor(&var.as_tensor().to_dtype(dtype)?)?);
        }
        Ok(ParamSet { vars })
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn to_arrays(&self, prefix: &str) -> Result<Vec<NamedArray>> {
        self.vars
            .iter()
            .map(|(name, var)| NamedArray::from_tensor(format!("{prefix}{name}"), var.as_tensor()))
            .collect()
    }

    /// Overwrite every parameter from `arrays` (looked up as `prefix + name`).
    pub fn load_arrays(&self, arrays: &[NamedArray], prefix: &str) -> Result<()> {
        let by_name: BTreeMap<&str, &NamedArray> =
            arrays.iter().map(|a| (a.name.as_str(), a)).collect();
        for (name, var) in &self.vars {
            let key = format!("{prefix}{name}");
            let arr = by_name
                .get(key.as_str())
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {key}")))?;
            if arr.shape != var.dims() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{key} {:?}", var.dims()),
                    got: format!("{:?}", arr.shape),
                });
            }
            var.set(&arr.to_tensor()?)?;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and raw parameter bits.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let values: Vec<f32> = var.as_tensor().flatten_all()?.to_vec1()?;
            for v in values {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

/// Per-sample, per-channel normalization without learned affine terms.
pub(crate) fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(3)?.mean_keepdim(2)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(3)?.mean_keepdim(2)?;
    Ok(centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?)
}

/// Parameter lookup that optionally cuts the autograd link.
pub(crate) struct Weights<'a> {
    params: &'a ParamSet,
    frozen: bool,
}

impl<'a> Weights<'a> {
    pub(crate) fn new(params: &'a ParamSet, frozen: bool) -> Self {
        Self { params, frozen }
    }

    pub(crate) fn get(&self, name: &str) -> Tensor {
        let t = self.params.get(name).as_tensor();
        if self.frozen {
            t.detach()
        } else {
            t.clone()
        }
    }

    pub(crate) fn conv(&self, x: &Tensor, name: &str, stride: usize, padding: usize) -> Result<Tensor> {
        let w = self.get(&format!("{name}.weight"));
        let b = self.get(&format!("{name}.bias"));
        let y = x.conv2d(&w, padding, stride, 1, 1)?;
        Ok(y.broadcast_add(&b.reshape((1, b.elem_count(), 1, 1))?)?)
    }

    pub(crate) fn conv_transpose(
        &self,
        x: &Tensor,
        name: &str,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let w = self.get(&format!("{name}.weight"));
        let b = self.get(&format!("{name}.bias"));
        let y = x.conv_transpose2d(&w, padding, 0, stride, 1)?;
        Ok(y.broadcast_add(&b.reshape((1, b.elem_count(), 1, 1))?)?)
    }

    pub(crate) fn linear(&self, x: &Tensor, name: &str) -> Result<Tensor> {
        let w = self.get(&format!("{name}.weight"));
        let b = self.get(&format!("{name}.bias"));
        Ok(x.matmul(&w.t()?)?.broadcast_add(&b)?)
    }
}

/// Declare conv weights `(out, in, k, k)` and bias with fan-in scaled init.
pub(crate) fn add_conv<R: Rng + ?Sized>(
    p: &mut ParamSet,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    rng: &mut R,
) -> Result<()> {
    let bound = (3.0 / (c_in * k * k) as f32).sqrt();
    p.add_uniform(&format!("{name}.weight"), &[c_out, c_in, k, k], bound, rng)?;
    p.add_uniform(&format!("{name}.bias"), &[c_out], 0.0, rng)
}

/// Transposed conv weights are laid out `(in, out, k, k)`.
pub(crate) fn add_conv_transpose<R: Rng + ?Sized>(
    p: &mut ParamSet,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    rng: &mut R,
) -> Result<()> {
    let bound = (3.0 / (c_in * k * k) as f32).sqrt();
    p.add_uniform(&format!("{name}.weight"), &[c_in, c_out, k, k], bound, rng)?;
    p.add_uniform(&format!("{name}.bias"), &[c_out], 0.0, rng)
}

pub(crate) fn add_linear<R: Rng + ?Sized>(
    p: &mut ParamSet,
    name: &str,
    c_in: usize,
    c_out: usize,
    rng: &mut R,
) -> Result<()> {
    let bound = (3.0 / c_in as f32).sqrt();
    p.add_uniform(&format!("{name}.weight"), &[c_out, c_in], bound, rng)?;
    p.add_uniform(&format!("{name}.bias"), &[c_out], 0.0, rng)
}

pub(crate) fn check_input(x: &Tensor, shape: (usize, usize, usize), what: &str) -> Result<()> {
    match x.dims() {
        [_, c, h, w] if (*c, *h, *w) == shape => Ok(()),
        dims => Err(Error::ShapeMismatch {
            expected: format!("{what} input B x {} x {} x {}", shape.0, shape.1, shape.2),
            got: format!("{dims:?}"),
        }),
    }
}

pub(crate) fn ensure_f32(x: &Tensor) -> Result<Tensor> {
    if x.dtype() == DType::F32 {
        Ok(x.clone())
    } else {
        Ok(x.to_dtype(DType::F32)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn digest_tracks_values() {
        let mut p = ParamSet::new();
        p.add_uniform("a", &[2, 3], 0.5, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let d0 = p.digest().unwrap();
        assert_eq!(d0, p.digest().unwrap());
        p.get("a")
            .set(&Tensor::zeros((2, 3), DType::F32, &Device::Cpu).unwrap())
            .unwrap();
        assert_ne!(d0, p.digest().unwrap());
    }

    #[test]
    fn instance_norm_has_zero_mean_per_channel() {
        let x = Tensor::arange(0f32, 32.0, &Device::Cpu)
            .unwrap()
            .reshape((2, 1, 4, 4))
            .unwrap();
        let y = instance_norm(&x).unwrap();
        let m: Vec<f32> = y.mean((2, 3)).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(m.iter().all(|v| v.abs() < 1e-5));
    }
}
