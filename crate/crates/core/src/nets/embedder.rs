//! Surrogate / victim embedders.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{add_conv, add_linear, check_input, ensure_f32, Checkpoint, NamedArray, ParamSet, Weights};
use crate::dataset::{augment, Dataset, Image};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};

/// A feature extractor mapping `B x C x H x W` images to `B x d` features.
pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn forward(&self, x: &Tensor) -> Result<Tensor>;
    /// Hash of the parameters, used to verify the surrogate stays frozen.
    fn param_digest(&self) -> Result<String>;
}

/// Embed images in chunks, returning one `Vec<f32>` per image.
pub fn embed_images(f: &dyn Embedder, images: &[&Image], chunk: usize) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(images.len());
    for part in images.chunks(chunk.max(1)) {
        let x = Image::stack(part, &Device::Cpu)?;
        let e = f.forward(&x)?.detach().to_dtype(DType::F32)?;
        out.extend(e.to_vec2::<f32>()?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    /// Three conv blocks with average pooling.
    A,
    /// Four wider conv stages with max pooling.
    B,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arch::A => f.write_str("A"),
            Arch::B => f.write_str("B"),
        }
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Arch::A),
            "B" | "b" => Ok(Arch::B),
            other => Err(Error::InvalidArgument(format!("unknown architecture '{other}'"))),
        }
    }
}

/// Small convolutional embedder with global average pooling and a linear head.
#[derive(Debug, Clone)]
pub struct ToyEmbedder {
    arch: Arch,
    dim: usize,
    params: ParamSet,
    frozen: bool,
    name: String,
}

/// Fresh embedder with seeded initialization.
pub fn build_toy_embedder(arch: Arch, dim: usize, seed: u64) -> Result<ToyEmbedder> {
    if dim < 4 {
        return Err(Error::InvalidArgument(format!("embedding dim must be >= 4, got {dim}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    match arch {
        Arch::A => {
            add_conv(&mut p, "c1", 3, 32, 3, &mut rng)?;
            add_conv(&mut p, "c2", 32, 64, 3, &mut rng)?;
            add_conv(&mut p, "c3", 64, 128, 3, &mut rng)?;
            add_linear(&mut p, "fc", 128, dim, &mut rng)?;
        }
        Arch::B => {
            add_conv(&mut p, "c1a", 3, 24, 3, &mut rng)?;
            add_conv(&mut p, "c1b", 24, 24, 3, &mut rng)?;
            add_conv(&mut p, "c2", 24, 48, 3, &mut rng)?;
            add_conv(&mut p, "c3", 48, 96, 3, &mut rng)?;
            add_conv(&mut p, "c4", 96, 96, 3, &mut rng)?;
            add_linear(&mut p, "fc", 96, dim, &mut rng)?;
        }
    }
    Ok(ToyEmbedder {
        arch,
        dim,
        params: p,
        frozen: false,
        name: format!("toy-{arch}"),
    })
}

impl ToyEmbedder {
    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Copy whose forward pass is cut from the autograd graph of its parameters.
    pub fn frozen(&self) -> Self {
        Self {
            frozen: true,
            ..self.clone()
        }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn to_arrays(&self) -> Result<Vec<NamedArray>> {
        self.params.to_arrays("embedder.")
    }

    pub fn load_arrays(&self, arrays: &[NamedArray]) -> Result<()> {
        self.params.load_arrays(arrays, "embedder.")
    }

    fn features(&self, x: &Tensor) -> Result<Tensor> {
        let x = ensure_f32(x)?;
        if x.rank() != 4 || x.dim(1)? != 3 {
            return Err(Error::ShapeMismatch {
                expected: "B x 3 x H x W".into(),
                got: format!("{:?}", x.dims()),
            });
        }
        let w = Weights::new(&self.params, self.frozen);
        let h = match self.arch {
            Arch::A => {
                let h = w.conv(&x, "c1", 1, 1)?.relu()?.avg_pool2d(2)?;
                let h = w.conv(&h, "c2", 1, 1)?.relu()?.avg_pool2d(2)?;
                w.conv(&h, "c3", 1, 1)?.relu()?.avg_pool2d(2)?
            }
            Arch::B => {
                let h = w.conv(&x, "c1a", 1, 1)?.relu()?;
                let h = w.conv(&h, "c1b", 1, 1)?.relu()?.max_pool2d(2)?;
                let h = w.conv(&h, "c2", 1, 1)?.relu()?.max_pool2d(2)?;
                let h = w.conv(&h, "c3", 1, 1)?.relu()?.max_pool2d(2)?;
                w.conv(&h, "c4", 1, 1)?.relu()?
            }
        };
        let pooled = h.mean((2, 3))?;
        w.linear(&pooled, "fc")
    }
}

impl Embedder for ToyEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.features(x)
    }

    fn param_digest(&self) -> Result<String> {
        self.params.digest()
    }
}

/// Victim checkpoint holding a trained embedder.
pub fn victim_checkpoint(f: &ToyEmbedder, epochs: u64, config_hash: &str) -> Result<Checkpoint> {
    Ok(Checkpoint {
        kind: "victim".into(),
        epoch: epochs,
        config_hash: config_hash.to_string(),
        meta: serde_json::json!({
            "arch": f.arch,
            "dim": f.dim,
            "name": f.name,
        }),
        arrays: f.to_arrays()?,
    })
}

/// Rebuild a frozen embedder from a victim checkpoint.
pub fn embedder_from_checkpoint(ckpt: &Checkpoint) -> Result<ToyEmbedder> {
    if ckpt.kind != "victim" {
        return Err(Error::Config(format!("expected a victim checkpoint, got '{}'", ckpt.kind)));
    }
    let arch: Arch = serde_json::from_value(ckpt.meta["arch"].clone())?;
    let dim: usize = serde_json::from_value(ckpt.meta["dim"].clone())?;
    let f = build_toy_embedder(arch, dim, 0)?;
    f.load_arrays(&ckpt.arrays)?;
    let f = match ckpt.meta["name"].as_str() {
        Some(name) => f.with_name(name),
        None => f,
    };
    Ok(f.frozen())
}

/// `f(x) = W vec(x)`. Used where an analytic gradient is needed.
#[derive(Debug, Clone)]
pub struct LinearEmbedder {
    weight: Tensor,
    shape: (usize, usize, usize),
}

impl LinearEmbedder {
    /// `weight` is `d x (C*H*W)`; any float dtype.
    pub fn new(weight: Tensor, shape: (usize, usize, usize)) -> Result<Self> {
        let (_, n) = weight.dims2()?;
        if n != shape.0 * shape.1 * shape.2 {
            return Err(Error::ShapeMismatch {
                expected: format!("{} input columns", shape.0 * shape.1 * shape.2),
                got: format!("{n}"),
            });
        }
        Ok(Self { weight, shape })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

impl Embedder for LinearEmbedder {
    fn name(&self) -> &str {
        "linear"
    }

    fn dim(&self) -> usize {
        self.weight.dim(0).unwrap_or(0)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_input(x, self.shape, "linear embedder")?;
        let flat = x.flatten_from(1)?.to_dtype(self.weight.dtype())?;
        Ok(flat.matmul(&self.weight.t()?)?)
    }

    fn param_digest(&self) -> Result<String> {
        let v: Vec<f64> = self.weight.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_bits().to_le_bytes()).collect();
        use sha2::Digest;
        Ok(hex::encode(sha2::Sha256::digest(&bytes)))
    }
}

/// Softmax identity classification on the training pool.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VictimTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: bool,
}

impl Default for VictimTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 120,
            lr: 5e-3,
            batch_size: 16,
            seed: 0,
            augment: true,
        }
    }
}

/// Train `f` plus a throwaway linear classifier over identities; returns the
/// frozen embedder.
pub fn train_embedder(
    ds: &Dataset,
    mut f: ToyEmbedder,
    cfg: &VictimTrainConfig,
) -> Result<ToyEmbedder> {
    if !ds.is_labeled() {
        return Err(Error::InvalidArgument(
            "victim training needs identity labels".into(),
        ));
    }
    let pool = ds.training_pool();
    if pool.is_empty() {
        return Err(Error::Dataset(format!("dataset '{}' has no training samples", ds.name())));
    }
    f.frozen = false;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head = ParamSet::new();
    add_linear(&mut head, "cls", f.dim, ds.num_identities(), &mut rng)?;
    let mut opt = Adam::new(
        &[&f.params, &head],
        AdamConfig {
            lr: cfg.lr,
            beta1: 0.9,
            beta2: 0.999,
        },
    )?;
    let samples = ds.samples();
    for epoch in 0..cfg.epochs {
        let mut order = pool.clone();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(2)) {
            let images: Vec<Image> = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        augment(&samples[i].image, &mut rng)
                    } else {
                        samples[i].image.clone()
                    }
                })
                .collect();
            let refs: Vec<&Image> = images.iter().collect();
            let x = Image::stack(&refs, &Device::Cpu)?;
            let labels: Vec<u32> = chunk
                .iter()
                .map(|&i| samples[i].identity.expect("labeled") as u32)
                .collect();
            let target = Tensor::new(labels.as_slice(), &Device::Cpu)?;
            let feats = f.features(&x)?;
            let logits = Weights::new(&head, false).linear(&feats, "cls")?;
            let loss = candle_nn::loss::cross_entropy(&logits, &target)?;
            total += loss.to_scalar::<f32>()?;
            let grads = loss.backward()?;
            opt.step(&grads)?;
        }
        log::debug!("victim {} epoch {epoch}: loss {total:.4}", f.name);
    }
    Ok(f.frozen())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_init() {
        let a = build_toy_embedder(Arch::A, 64, 3).unwrap();
        let b = build_toy_embedder(Arch::A, 64, 3).unwrap();
        assert_eq!(a.param_digest().unwrap(), b.param_digest().unwrap());
        let c = build_toy_embedder(Arch::A, 64, 4).unwrap();
        assert_ne!(a.param_digest().unwrap(), c.param_digest().unwrap());
    }

    #[test]
    fn forward_shape() {
        let f = build_toy_embedder(Arch::A, 64, 0).unwrap();
        let x = Tensor::rand(0f32, 1.0, (8, 3, 32, 32), &Device::Cpu).unwrap();
        assert_eq!(f.forward(&x).unwrap().dims(), &[8, 64]);
        let g = build_toy_embedder(Arch::B, 64, 0).unwrap();
        assert_eq!(g.forward(&x).unwrap().dims(), &[8, 64]);
    }

    #[test]
    fn architectures_differ() {
        let a = build_toy_embedder(Arch::A, 64, 0).unwrap();
        let b = build_toy_embedder(Arch::B, 64, 0).unwrap();
        assert_ne!(a.num_params(), b.num_params());
    }

    #[test]
    fn checkpoint_round_trip() {
        let f = build_toy_embedder(Arch::B, 16, 5).unwrap();
        let ckpt = victim_checkpoint(&f, 3, "h").unwrap();
        let g = embedder_from_checkpoint(&ckpt).unwrap();
        assert_eq!(f.param_digest().unwrap(), g.param_digest().unwrap());
        assert_eq!((g.arch(), g.dim(), g.name()), (Arch::B, 16, "toy-B"));
        assert!(g.is_frozen());
    }

    #[test]
    fn tiny_dim_rejected() {
        assert!(build_toy_embedder(Arch::A, 3, 0).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let f = build_toy_embedder(Arch::B, 16, 1).unwrap().frozen();
        let x = Tensor::rand(0f32, 1.0, (2, 3, 16, 16), &Device::Cpu).unwrap();
        let a: Vec<Vec<f32>> = f.forward(&x).unwrap().to_vec2().unwrap();
        let b: Vec<Vec<f32>> = f.forward(&x).unwrap().to_vec2().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn frozen_forward_produces_no_parameter_grads() {
        let f = build_toy_embedder(Arch::A, 8, 1).unwrap().frozen();
        let x = candle_core::Var::from_tensor(
            &Tensor::rand(0f32, 1.0, (1, 3, 16, 16), &Device::Cpu).unwrap(),
        )
        .unwrap();
        let grads = f.forward(x.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap();
        assert!(grads.get(x.as_tensor()).is_some());
        for (_, v) in f.params().vars() {
            assert!(grads.get(v.as_tensor()).is_none());
        }
    }
}
