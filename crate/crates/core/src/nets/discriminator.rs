//! Four-layer conv discriminator emitting one logit per image.

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{add_conv, check_input, ensure_f32, instance_norm, GeneratorConfig, NamedArray, ParamSet, Weights};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Discriminator {
    shape: (usize, usize, usize),
    params: ParamSet,
}

impl Discriminator {
    pub fn new(config: &GeneratorConfig, seed: u64) -> Result<Self> {
        let (c, h, w) = (config.channels, config.height, config.width);
        if h % 8 != 0 || w % 8 != 0 || h != w {
            return Err(Error::InvalidArgument(format!(
                "discriminator needs square inputs divisible by 8, got {h}x{w}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let b = config.base_width;
        add_conv(&mut p, "l1", c, b, 4, &mut rng)?;
        add_conv(&mut p, "l2", b, 2 * b, 4, &mut rng)?;
        add_conv(&mut p, "l3", 2 * b, 4 * b, 4, &mut rng)?;
        add_conv(&mut p, "l4", 4 * b, 1, h / 8, &mut rng)?;
        Ok(Self {
            shape: (c, h, w),
            params: p,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn to_arrays(&self) -> Result<Vec<NamedArray>> {
        self.params.to_arrays("discriminator.")
    }

    pub fn load_arrays(&self, arrays: &[NamedArray]) -> Result<()> {
        self.params.load_arrays(arrays, "discriminator.")
    }

    /// One real logit per image, shape `B`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_input(x, self.shape, "discriminator")?;
        let x = ensure_f32(x)?;
        let w = Weights::new(&self.params, false);
        let h = candle_nn::ops::leaky_relu(&w.conv(&x, "l1", 2, 1)?, 0.2)?;
        let h = candle_nn::ops::leaky_relu(&instance_norm(&w.conv(&h, "l2", 2, 1)?)?, 0.2)?;
        let h = candle_nn::ops::leaky_relu(&instance_norm(&w.conv(&h, "l3", 2, 1)?)?, 0.2)?;
        let out = w.conv(&h, "l4", 1, 0)?;
        Ok(out.flatten_all()?)
    }
}
