//! Encoder-decoder generator producing the adversarial image directly.

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{add_conv, add_conv_transpose, check_input, ensure_f32, instance_norm, NamedArray, ParamSet, Weights};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channel count of the first downsampling block; doubles per block.
    pub base_width: usize,
}

impl GeneratorConfig {
    pub fn for_images(shape: (usize, usize, usize)) -> Self {
        Self {
            channels: shape.0,
            height: shape.1,
            width: shape.2,
            base_width: 16,
        }
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
}

/// Three stride-2 conv blocks, two residual blocks, three transposed-conv
/// blocks, sigmoid output. Instance normalization only, so samples never
/// interact within a batch.
#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamSet,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        if config.height % 8 != 0 || config.width % 8 != 0 {
            return Err(Error::InvalidArgument(format!(
                "generator needs height and width divisible by 8, got {}x{}",
                config.height, config.width
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let b = config.base_width;
        add_conv(&mut p, "down1", config.channels, b, 4, &mut rng)?;
        add_conv(&mut p, "down2", b, 2 * b, 4, &mut rng)?;
        add_conv(&mut p, "down3", 2 * b, 4 * b, 4, &mut rng)?;
        for r in ["res1", "res2"] {
            add_conv(&mut p, &format!("{r}.a"), 4 * b, 4 * b, 3, &mut rng)?;
            add_conv(&mut p, &format!("{r}.b"), 4 * b, 4 * b, 3, &mut rng)?;
        }
        add_conv_transpose(&mut p, "up1", 4 * b, 2 * b, 4, &mut rng)?;
        add_conv_transpose(&mut p, "up2", 2 * b, b, 4, &mut rng)?;
        add_conv_transpose(&mut p, "up3", b, config.channels, 4, &mut rng)?;
        Ok(Self { config, params: p })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn to_arrays(&self) -> Result<Vec<NamedArray>> {
        self.params.to_arrays("generator.")
    }

    pub fn load_arrays(&self, arrays: &[NamedArray]) -> Result<()> {
        self.params.load_arrays(arrays, "generator.")
    }

    /// `B x C x H x W` in, same shape out, values in `[0, 1]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_input(x, self.config.input_shape(), "generator")?;
        let x = match self.params.dtype() {
            candle_core::DType::F32 => ensure_f32(x)?,
            dtype => x.to_dtype(dtype)?,
        };
        let w = Weights::new(&self.params, false);
        let h = instance_norm(&w.conv(&x, "down1", 2, 1)?)?.relu()?;
        let h = instance_norm(&w.conv(&h, "down2", 2, 1)?)?.relu()?;
        let mut h = instance_norm(&w.conv(&h, "down3", 2, 1)?)?.relu()?;
        for r in ["res1", "res2"] {
            let y = instance_norm(&w.conv(&h, &format!("{r}.a"), 1, 1)?)?.relu()?;
            let y = instance_norm(&w.conv(&y, &format!("{r}.b"), 1, 1)?)?;
            h = (h + y)?;
        }
        let h = instance_norm(&w.conv_transpose(&h, "up1", 2, 1)?)?.relu()?;
        let h = instance_norm(&w.conv_transpose(&h, "up2", 2, 1)?)?.relu()?;
        let out = w.conv_transpose(&h, "up3", 2, 1)?;
        Ok(candle_nn::ops::sigmoid(&out)?)
    }
}
