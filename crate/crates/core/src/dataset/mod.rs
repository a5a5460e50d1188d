//! Re-ID datasets: in-memory images with identity, camera and split labels.
//!
//! Images are stored channel-major (`C x H x W`) with values in `[0, 1]`.
//! Identity labels, when present, are contiguous integers starting at zero.

mod augment;
mod folder;
mod manifest;
mod mining;
mod sampling;
mod toy;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{augment, augment_with, AugmentParams};
pub use folder::{load_image_folder, LoadOptions, LoadReport, Naming, SplitSpec};
pub use manifest::{export_manifest, read_manifest, write_manifest};
pub use mining::{
    euclidean, mine_triplet_unsupervised, mine_triplets_supervised, MiningPolicy, TripletIndices,
};
pub use sampling::{epoch_batches, sample_pk_batch, sample_random_batch, ImageBatch};
pub use toy::generate_toy_dataset;

/// Role of a sample in an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    MetaTrain,
    MetaTest,
    Query,
    Gallery,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::MetaTrain => "meta_train",
            Split::MetaTest => "meta_test",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "meta_train" => Ok(Split::MetaTrain),
            "meta_test" => Ok(Split::MetaTest),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(Error::InvalidArgument(format!("unknown split '{other}'"))),
        }
    }
}

/// A dense `C x H x W` image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values ({channels}x{height}x{width})", channels * height * width),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// `1 x C x H x W` tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(
            &self.data,
            (1, self.channels, self.height, self.width),
            device,
        )?)
    }

    /// Stack images of identical shape into a `B x C x H x W` tensor.
    pub fn stack(images: &[&Image], device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack an empty image list".into()))?;
        let shape = first.shape();
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if img.shape() != shape {
                return Err(Error::ShapeMismatch {
                    expected: format!("{shape:?}"),
                    got: format!("{:?}", img.shape()),
                });
            }
            data.extend_from_slice(&img.data);
        }
        Ok(Tensor::from_vec(
            data,
            (images.len(), shape.0, shape.1, shape.2),
            device,
        )?)
    }

    /// Split a `B x C x H x W` tensor back into images.
    pub fn unstack(t: &Tensor) -> Result<Vec<Image>> {
        let (b, c, h, w) = t.dims4()?;
        let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let n = c * h * w;
        Ok((0..b)
            .map(|i| Image {
                channels: c,
                height: h,
                width: w,
                data: flat[i * n..(i + 1) * n].to_vec(),
            })
            .collect())
    }
}

/// One image with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub path: Option<PathBuf>,
    pub image: Image,
    pub identity: Option<usize>,
    pub camera: Option<usize>,
    pub split: Split,
}

/// An ordered, immutable collection of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    samples: Vec<Sample>,
    num_identities: usize,
    pixel_range: (f32, f32),
}

impl Dataset {
    /// Validates labels and pixel range.
    ///
    /// Either every sample carries an identity or none does; present identities
    /// must cover `0..num_identities` without gaps.
    pub fn new(name: impl Into<String>, samples: Vec<Sample>) -> Result<Self> {
        let name = name.into();
        if samples.is_empty() {
            return Err(Error::Dataset(format!("dataset '{name}' has no samples")));
        }
        let labeled = samples.iter().filter(|s| s.identity.is_some()).count();
        if labeled != 0 && labeled != samples.len() {
            return Err(Error::Dataset(format!(
                "dataset '{name}' mixes labeled and unlabeled samples"
            )));
        }
        let shape = samples[0].image.shape();
        let mut seen = std::collections::BTreeSet::new();
        for s in &samples {
            if s.image.shape() != shape {
                return Err(Error::ShapeMismatch {
                    expected: format!("{shape:?}"),
                    got: format!("{:?}", s.image.shape()),
                });
            }
            let (lo, hi) = s.image.min_max();
            if !(lo >= 0.0 && hi <= 1.0) {
                return Err(Error::Dataset(format!(
                    "sample values outside [0,1]: [{lo}, {hi}]"
                )));
            }
            if let Some(id) = s.identity {
                seen.insert(id);
            }
        }
        let num_identities = seen.len();
        if let Some(&max) = seen.iter().next_back() {
            if max + 1 != num_identities {
                return Err(Error::Dataset(format!(
                    "identity labels are not contiguous: {num_identities} distinct, max {max}"
                )));
            }
        }
        Ok(Self {
            name,
            samples,
            num_identities,
            pixel_range: (0.0, 1.0),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_identities(&self) -> usize {
        self.num_identities
    }

    pub fn pixel_range(&self) -> (f32, f32) {
        self.pixel_range
    }

    pub fn is_labeled(&self) -> bool {
        self.samples[0].identity.is_some()
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.samples[0].image.shape()
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Samples usable for attack or victim training: the `meta_train` and
    /// `meta_test` splits.
    pub fn training_pool(&self) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s.split, Split::MetaTrain | Split::MetaTest))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split_samples(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    /// Same images with every identity removed, as if loaded unlabeled.
    pub fn without_labels(&self) -> Self {
        let samples = self
            .samples
            .iter()
            .cloned()
            .map(|mut s| {
                s.identity = None;
                s
            })
            .collect();
        Self {
            name: self.name.clone(),
            samples,
            num_identities: 0,
            pixel_range: self.pixel_range,
        }
    }
}
