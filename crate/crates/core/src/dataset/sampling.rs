//! Batch sampling for training loops.

use std::collections::BTreeMap;

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

use super::{Dataset, Image};
use crate::error::{Error, Result};

/// Images drawn from a dataset, with their source indices and labels.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub indices: Vec<usize>,
    pub images: Vec<Image>,
    pub labels: Option<Vec<usize>>,
}

impl ImageBatch {
    pub fn from_indices(ds: &Dataset, indices: Vec<usize>) -> Self {
        let samples = ds.samples();
        let images = indices.iter().map(|&i| samples[i].image.clone()).collect();
        let labels = if ds.is_labeled() {
            Some(
                indices
                    .iter()
                    .map(|&i| samples[i].identity.expect("labeled dataset"))
                    .collect(),
            )
        } else {
            None
        };
        Self {
            indices,
            images,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn tensor(&self, device: &Device) -> Result<Tensor> {
        let refs: Vec<&Image> = self.images.iter().collect();
        Image::stack(&refs, device)
    }
}

fn identities_in(ds: &Dataset, pool: &[usize]) -> Result<BTreeMap<usize, Vec<usize>>> {
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in pool {
        let id = ds.samples()[i].identity.ok_or_else(|| {
            Error::InvalidArgument("P x K sampling needs identity labels".into())
        })?;
        by_id.entry(id).or_default().push(i);
    }
    Ok(by_id)
}

/// `P` distinct identities, `K` images each. Identities with fewer than `K`
/// images are sampled with replacement.
pub fn sample_pk_batch<R: Rng + ?Sized>(
    ds: &Dataset,
    pool: &[usize],
    p: usize,
    k: usize,
    rng: &mut R,
) -> Result<ImageBatch> {
    if p == 0 || k == 0 {
        return Err(Error::InvalidArgument("P and K must be positive".into()));
    }
    let by_id = identities_in(ds, pool)?;
    if p > by_id.len() {
        return Err(Error::InvalidArgument(format!(
            "P={p} exceeds the {} identities available",
            by_id.len()
        )));
    }
    let mut ids: Vec<usize> = by_id.keys().copied().collect();
    ids.shuffle(rng);
    let mut indices = Vec::with_capacity(p * k);
    for id in &ids[..p] {
        let members = &by_id[id];
        if members.len() >= k {
            let mut m = members.clone();
            m.shuffle(rng);
            indices.extend_from_slice(&m[..k]);
        } else {
            for _ in 0..k {
                indices.push(members[rng.random_range(0..members.len())]);
            }
        }
    }
    Ok(ImageBatch::from_indices(ds, indices))
}

/// Uniform batch without replacement; labels are ignored.
pub fn sample_random_batch<R: Rng + ?Sized>(
    ds: &Dataset,
    pool: &[usize],
    size: usize,
    rng: &mut R,
) -> Result<ImageBatch> {
    if size == 0 || size > pool.len() {
        return Err(Error::InvalidArgument(format!(
            "batch of {size} from a pool of {}",
            pool.len()
        )));
    }
    let mut m = pool.to_vec();
    m.shuffle(rng);
    m.truncate(size);
    Ok(ImageBatch::from_indices(ds, m))
}

/// All batches of one epoch.
///
/// Identity-aware epochs draw `pool / (P*K)` independent P x K batches; plain
/// epochs shuffle the pool and cut it into full batches of `P*K`.
pub fn epoch_batches<R: Rng + ?Sized>(
    ds: &Dataset,
    pool: &[usize],
    p: usize,
    k: usize,
    use_identities: bool,
    rng: &mut R,
) -> Result<Vec<ImageBatch>> {
    let size = p * k;
    if size == 0 {
        return Err(Error::InvalidArgument("empty batch specification".into()));
    }
    if pool.len() < size {
        return Err(Error::Dataset(format!(
            "dataset '{}' has {} training samples, fewer than one batch of {size}",
            ds.name(),
            pool.len()
        )));
    }
    let count = pool.len() / size;
    if use_identities {
        (0..count)
            .map(|_| sample_pk_batch(ds, pool, p, k, rng))
            .collect()
    } else {
        let mut m = pool.to_vec();
        m.shuffle(rng);
        Ok(m.chunks_exact(size)
            .map(|c| ImageBatch::from_indices(ds, c.to_vec()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_toy_dataset, Sample, Split};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    #[test]
    fn pk_batch_has_p_ids_times_k() {
        let ds = generate_toy_dataset(8, 8, 16, 0).unwrap();
        let pool = ds.training_pool();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_pk_batch(&ds, &pool, 4, 4, &mut rng).unwrap();
        assert_eq!(b.len(), 16);
        let labels = b.labels.unwrap();
        let distinct: BTreeSet<_> = labels.iter().collect();
        assert_eq!(distinct.len(), 4);
        for id in distinct {
            assert_eq!(labels.iter().filter(|&l| l == id).count(), 4);
        }
    }

    #[test]
    fn small_identity_is_sampled_with_replacement() {
        let mut samples = Vec::new();
        for (id, n) in [(0, 2), (1, 5)] {
            for _ in 0..n {
                samples.push(Sample {
                    path: None,
                    image: crate::dataset::Image::filled(3, 4, 4, 0.1 * id as f32),
                    identity: Some(id),
                    camera: None,
                    split: Split::MetaTrain,
                });
            }
        }
        let ds = Dataset::new("t", samples).unwrap();
        let pool = ds.training_pool();
        let b = sample_pk_batch(&ds, &pool, 2, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let small: Vec<_> = b
            .indices
            .iter()
            .zip(b.labels.as_ref().unwrap())
            .filter(|(_, &l)| l == 0)
            .map(|(&i, _)| i)
            .collect();
        assert_eq!(small.len(), 4);
        assert!(small.iter().all(|i| *i < 2));
    }

    #[test]
    fn seeded_batches_repeat() {
        let ds = generate_toy_dataset(8, 4, 16, 2).unwrap();
        let pool: Vec<usize> = (0..ds.len()).collect();
        let a = sample_pk_batch(&ds, &pool, 4, 2, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = sample_pk_batch(&ds, &pool, 4, 2, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a.indices, b.indices);
    }

    #[test]
    fn too_many_identities_is_fatal() {
        let ds = generate_toy_dataset(3, 4, 16, 2).unwrap();
        let pool = ds.training_pool();
        assert!(sample_pk_batch(&ds, &pool, 4, 2, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn plain_epoch_covers_disjoint_samples() {
        let ds = generate_toy_dataset(16, 8, 16, 2).unwrap();
        let pool = ds.training_pool();
        let batches =
            epoch_batches(&ds, &pool, 4, 4, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(batches.len(), 3);
        let all: BTreeSet<_> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        assert_eq!(all.len(), 48);
    }
}
