//! Generator training: discriminator and generator updates on the meta-train
//! set, then an outer update of the generator from the meta-test loss of the
//! extracted perturbations.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{assert_budget, project_linf_t, AttackBudget};
use crate::dataset::{
    augment_with, epoch_batches, mine_triplet_unsupervised, mine_triplets_supervised, sample_pk_batch,
    sample_random_batch, AugmentParams, Dataset, Image, ImageBatch,
};
use crate::error::{Error, Result};
use crate::nets::{save_checkpoint, Checkpoint, Discriminator, Embedder, Generator, GeneratorConfig};
use crate::objectives::{
    adv_triplet_loss_t, discriminator_loss_t, generator_gan_loss_non_saturating_t, generator_gan_loss_t, scalar,
    FlipMask,
};
use crate::optim::{Adam, AdamConfig};
use crate::saliency_mask::{apply_mask_t, batch_masks};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Supervised,
    Unsupervised,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Supervised => "supervised",
            TrainMode::Unsupervised => "unsupervised",
        })
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(TrainMode::Supervised),
            "unsupervised" => Ok(TrainMode::Unsupervised),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    /// Triplet margin.
    pub m: f64,
    pub lambda: f64,
    pub eps_255: f64,
    pub flip_prob: f64,
    pub p: usize,
    pub k: usize,
    pub mode: TrainMode,
    pub use_meta: bool,
    pub use_mask: bool,
    pub seed: u64,
    /// Apply the meta-test update after every batch instead of once per epoch
    /// on the mean gradient.
    pub meta_update_per_batch: bool,
    /// Clamp perturbed meta-test anchors to `[0, 1]`.
    pub meta_clamp: bool,
    /// Use `-log D(x_adv)` instead of `log(1 - D(x_adv))` for the generator.
    pub non_saturating: bool,
    /// Batches per epoch; 0 means one pass over the training pool.
    pub iters_per_epoch: usize,
    pub generator_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.5,
            beta2: 0.999,
            epochs: 40,
            m: 1.0,
            lambda: 0.01,
            eps_255: 16.0,
            flip_prob: 0.05,
            p: 4,
            k: 4,
            mode: TrainMode::Supervised,
            use_meta: true,
            use_mask: true,
            seed: 0,
            meta_update_per_batch: false,
            meta_clamp: true,
            non_saturating: false,
            iters_per_epoch: 0,
            generator_width: 16,
        }
    }
}

impl TrainConfig {
    /// Parse a `key = value` file whose keys are the field names.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be a finite value >= 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must be in [0, 1)".into());
        }
        if !(self.m >= 0.0) || !(self.lambda >= 0.0) {
            return bad("m and lambda must be >= 0".into());
        }
        if !(0.0..0.5).contains(&self.flip_prob) {
            return bad(format!("flip_prob must be in [0, 0.5), got {}", self.flip_prob));
        }
        AttackBudget::new(self.eps_255).map_err(|e| Error::Config(e.to_string()))?;
        if self.p == 0 || self.k == 0 {
            return bad("p and k must be >= 1".into());
        }
        match self.mode {
            TrainMode::Supervised if self.p < 2 || self.k < 2 => {
                bad("supervised mining needs p >= 2 and k >= 2".into())
            }
            TrainMode::Unsupervised if self.p * self.k < 2 => bad("unsupervised mining needs a batch of at least 2".into()),
            _ if self.generator_width == 0 => bad("generator_width must be >= 1".into()),
            _ => Ok(()),
        }
    }

    pub fn budget(&self) -> Result<AttackBudget> {
        AttackBudget::new(self.eps_255)
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Ablation label: `l`, `l+M`, `l+A` or `l+M+A`.
    pub fn cell_name(&self) -> &'static str {
        match (self.use_mask, self.use_meta) {
            (false, false) => "l",
            (true, false) => "l+M",
            (false, true) => "l+A",
            (true, true) => "l+M+A",
        }
    }
}

/// Invert each target independently with probability `p`.
pub fn flip_labels<R: Rng + ?Sized>(targets: &[bool], p: f64, rng: &mut R) -> Result<Vec<bool>> {
    if !(0.0..0.5).contains(&p) {
        return Err(Error::InvalidArgument(format!("flip probability must be in [0, 0.5), got {p}")));
    }
    Ok(targets.iter().map(|&t| if rng.random_bool(p) { !t } else { t }).collect())
}

/// One inner iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub epoch: usize,
    pub batch: usize,
    pub d_loss: f64,
    pub g_gan: f64,
    pub g_trip: f64,
    pub meta_loss: Option<f64>,
    pub d_grad_norm: f64,
    pub g_grad_norm: f64,
    pub meta_grad_norm: Option<f64>,
    pub wall_ms: f64,
}

pub const TRACE_HEADER: &str = "epoch,batch,d_loss,g_gan,g_trip,meta_loss,wall_ms";

impl StepTrace {
    /// `epoch,batch,d_loss,g_gan,g_trip,meta_loss,wall_ms`; losses print in
    /// shortest round-trip form so equal lines mean bit-equal losses.
    pub fn to_line(&self) -> String {
        let meta = self.meta_loss.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.epoch, self.batch, self.d_loss, self.g_gan, self.g_trip, meta, self.wall_ms
        )
    }

    /// The loss fields only, for reproducibility comparisons.
    pub fn losses(&self) -> (f64, f64, f64, Option<f64>) {
        (self.d_loss, self.g_gan, self.g_trip, self.meta_loss)
    }

    fn all_finite(&self) -> bool {
        [self.d_loss, self.g_gan, self.g_trip, self.meta_loss.unwrap_or(0.0)]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub fn write_trace(trace: &[StepTrace], path: &Path) -> Result<()> {
    let mut text = String::from(TRACE_HEADER);
    text.push('\n');
    for t in trace {
        text.push_str(&t.to_line());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Discriminator,
    Generator,
    MetaTest,
}

/// Which parameter sets changed during one phase, and the largest
/// perturbation seen in it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub epoch: usize,
    pub batch: usize,
    pub phase: Phase,
    pub surrogate_changed: bool,
    pub generator_changed: bool,
    pub discriminator_changed: bool,
    pub max_perturbation: f32,
}

/// Result of [`MetaTrainer::meta_train_step`].
pub struct InnerStep {
    pub d_loss: f64,
    pub g_gan: f64,
    pub g_trip: f64,
    pub d_grad_norm: f64,
    pub g_grad_norm: f64,
    /// `x - Pi(G(x'))` after the generator update, still attached to the
    /// generator parameters when meta-learning is enabled.
    pub delta: Tensor,
    pub max_perturbation: f32,
}

struct Digests {
    f: String,
    g: String,
    d: String,
}

pub struct MetaTrainer<'a> {
    cfg: TrainConfig,
    budget: AttackBudget,
    surrogate: &'a dyn Embedder,
    generator: Generator,
    discriminator: Discriminator,
    opt_g: Adam,
    opt_d: Adam,
    opt_meta: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
    trace: Vec<StepTrace>,
    audit: Option<Vec<AuditRecord>>,
    meta_acc: Vec<Option<Tensor>>,
    meta_count: usize,
    device: Device,
}

fn rows(t: &Tensor) -> Result<Vec<Vec<f32>>> {
    Ok(t.detach().to_dtype(DType::F32)?.to_vec2::<f32>()?)
}

fn select(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let idx: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
    let idx = Tensor::new(idx.as_slice(), t.device())?;
    Ok(t.index_select(&idx, 0)?)
}

fn stack_images(images: &[Image], device: &Device) -> Result<Tensor> {
    let refs: Vec<&Image> = images.iter().collect();
    Image::stack(&refs, device)
}

/// Augmented copies of each row of `x` with the given parameters.
fn augment_rows(x: &Tensor, params: &[AugmentParams]) -> Result<Tensor> {
    let images = Image::unstack(x)?;
    let out: Vec<Image> = images.iter().zip(params).map(|(img, p)| augment_with(img, p)).collect();
    stack_images(&out, x.device())
}

impl<'a> MetaTrainer<'a> {
    pub fn new(cfg: TrainConfig, surrogate: &'a dyn Embedder, image_shape: (usize, usize, usize)) -> Result<Self> {
        cfg.validate()?;
        let mut gcfg = GeneratorConfig::for_images(image_shape);
        gcfg.base_width = cfg.generator_width;
        let generator = Generator::new(gcfg, cfg.seed)?;
        let discriminator = Discriminator::new(&gcfg, cfg.seed.wrapping_add(1))?;
        let adam = AdamConfig {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
        };
        let opt_g = Adam::new(&[generator.params()], adam)?;
        let opt_d = Adam::new(&[discriminator.params()], adam)?;
        let opt_meta = Adam::new(&[generator.params()], adam)?;
        Ok(Self {
            budget: cfg.budget()?,
            rng: Self::epoch_rng(cfg.seed, 0),
            cfg,
            surrogate,
            generator,
            discriminator,
            opt_g,
            opt_d,
            opt_meta,
            epoch: 0,
            trace: Vec::new(),
            audit: None,
            meta_acc: Vec::new(),
            meta_count: 0,
            device: Device::Cpu,
        })
    }

    /// Each epoch has its own random stream so a restored run continues
    /// exactly where the saved one stopped.
    fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        rng
    }

    /// Record which parameter sets change in every phase.
    pub fn enable_audit(&mut self) {
        self.audit = Some(Vec::new());
    }

    pub fn audit(&self) -> &[AuditRecord] {
        self.audit.as_deref().unwrap_or(&[])
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    pub fn trace(&self) -> &[StepTrace] {
        &self.trace
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn digests(&self) -> Result<Option<Digests>> {
        if self.audit.is_none() {
            return Ok(None);
        }
        Ok(Some(Digests {
            f: self.surrogate.param_digest()?,
            g: self.generator.params().digest()?,
            d: self.discriminator.params().digest()?,
        }))
    }

    fn record(&mut self, batch: usize, phase: Phase, before: Option<Digests>, max_perturbation: f32) -> Result<()> {
        let Some(before) = before else { return Ok(()) };
        let after = self.digests()?.expect("audit enabled");
        let rec = AuditRecord {
            epoch: self.epoch,
            batch,
            phase,
            surrogate_changed: before.f != after.f,
            generator_changed: before.g != after.g,
            discriminator_changed: before.d != after.d,
            max_perturbation,
        };
        self.audit.as_mut().expect("audit enabled").push(rec);
        Ok(())
    }

    fn non_finite(&self, batch: usize, what: &str, value: f64) -> Error {
        let mut detail = format!("{what} = {value}");
        for t in self.trace.iter().rev().take(5).rev() {
            detail.push_str("; ");
            detail.push_str(&t.to_line());
        }
        Error::NonFiniteLoss {
            epoch: self.epoch,
            batch,
            detail,
        }
    }

    fn check(&self, batch: usize, what: &str, value: f64) -> Result<f64> {
        if value.is_finite() {
            Ok(value)
        } else {
            Err(self.non_finite(batch, what, value))
        }
    }

    /// Triplets over adversarial embeddings: `(anchor, negative, positive)`.
    fn adversarial_triplets(&self, emb: &Tensor, labels: Option<&[usize]>, b: usize) -> Result<Vec<[usize; 3]>> {
        let values = rows(emb)?;
        let trips: Vec<[usize; 3]> = match self.cfg.mode {
            TrainMode::Supervised => {
                let labels =
                    labels.ok_or_else(|| Error::Dataset("supervised training needs identity labels".into()))?;
                mine_triplets_supervised(&values, labels)?
                    .into_iter()
                    .map(|t| [t.anchor, t.negative, t.positive])
                    .collect()
            }
            TrainMode::Unsupervised => (0..b)
                .map(|i| mine_triplet_unsupervised(&values, i, i + b).map(|t| [t.anchor, t.negative, t.positive]))
                .collect::<Result<_>>()?,
        };
        if trips.is_empty() {
            return Err(Error::Dataset("no triplet can be mined from the batch".into()));
        }
        Ok(trips)
    }

    /// Masked generator input for a clean batch.
    fn generator_input(&mut self, x: &Tensor) -> Result<Tensor> {
        if self.cfg.use_mask {
            let m = batch_masks(self.surrogate, x, self.cfg.m, &mut self.rng)?;
            apply_mask_t(x, &m)
        } else {
            Ok(x.clone())
        }
    }

    /// Discriminator step, generator step and perturbation extraction on one
    /// meta-train batch.
    pub fn meta_train_step(&mut self, batch: &ImageBatch, batch_index: usize) -> Result<InnerStep> {
        let eps = self.budget.epsilon_f32();
        let b = batch.len();
        let x = batch.tensor(&self.device)?;
        let x_in = self.generator_input(&x)?;

        // Unsupervised batches carry an augmented copy of every sample, the
        // same transform applied to the masked input and to the clean image.
        let (gen_in, clean) = match self.cfg.mode {
            TrainMode::Supervised => (x_in.clone(), x.clone()),
            TrainMode::Unsupervised => {
                let params: Vec<AugmentParams> = (0..b).map(|_| AugmentParams::sample(&mut self.rng)).collect();
                (
                    Tensor::cat(&[&x_in, &augment_rows(&x_in, &params)?], 0)?,
                    Tensor::cat(&[&x, &augment_rows(&x, &params)?], 0)?,
                )
            }
        };

        let before = self.digests()?;
        let raw = self.generator.forward(&gen_in)?.detach();
        let x_fake = project_linf_t(&raw, &clean, eps)?.detach();
        let mut worst = assert_budget(&x_fake, &clean, eps)?;
        let real_flip = flip_labels(&vec![true; b], self.cfg.flip_prob, &mut self.rng)?;
        let fake_flip = flip_labels(&vec![false; b], self.cfg.flip_prob, &mut self.rng)?;
        let flips = FlipMask {
            real: real_flip.iter().map(|t| !t).collect(),
            fake: fake_flip,
        };
        let logits_real = self.discriminator.forward(&x)?;
        let logits_fake = self.discriminator.forward(&x_fake.narrow(0, 0, b)?)?;
        let d_loss_t = discriminator_loss_t(&logits_real, &logits_fake, &flips)?;
        let d_loss = self.check(batch_index, "d_loss", scalar(&d_loss_t)?)?;
        let d_grads = self.opt_d.collect(&d_loss_t.backward()?);
        let d_grad_norm = Adam::grad_norm(&d_grads)?;
        self.opt_d.step_with(&d_grads)?;
        self.record(batch_index, Phase::Discriminator, before, worst)?;

        let before = self.digests()?;
        let raw = self.generator.forward(&gen_in)?;
        let x_adv = project_linf_t(&raw, &clean, eps)?;
        worst = worst.max(assert_budget(&x_adv, &clean, eps)?);
        let logits = self.discriminator.forward(&x_adv.narrow(0, 0, b)?)?;
        let gan_t = if self.cfg.non_saturating {
            generator_gan_loss_non_saturating_t(&logits)?
        } else {
            generator_gan_loss_t(&logits)?
        };
        let emb = self.surrogate.forward(&x_adv)?.to_dtype(DType::F32)?;
        let trips = self.adversarial_triplets(&emb, batch.labels.as_deref(), b)?;
        let trip_t = adv_triplet_loss_t(
            &select(&emb, &trips.iter().map(|t| t[0]).collect::<Vec<_>>())?,
            &select(&emb, &trips.iter().map(|t| t[1]).collect::<Vec<_>>())?,
            &select(&emb, &trips.iter().map(|t| t[2]).collect::<Vec<_>>())?,
            self.cfg.m,
        )?;
        let g_gan = self.check(batch_index, "g_gan", scalar(&gan_t)?)?;
        let g_trip = self.check(batch_index, "g_trip", scalar(&trip_t)?)?;
        let total = (gan_t + trip_t.affine(self.cfg.lambda, 0.0)?)?;
        // discriminator gradients from this graph are discarded
        let g_grads = self.opt_g.collect(&total.backward()?);
        let g_grad_norm = Adam::grad_norm(&g_grads)?;
        self.opt_g.step_with(&g_grads)?;

        let raw = self.generator.forward(&x_in)?;
        let x_adv = project_linf_t(&raw, &x, eps)?;
        worst = worst.max(assert_budget(&x_adv, &x, eps)?);
        let delta = (&x - &x_adv)?;
        let delta = if self.cfg.use_meta { delta } else { delta.detach() };
        self.record(batch_index, Phase::Generator, before, worst)?;

        Ok(InnerStep {
            d_loss,
            g_gan,
            g_trip,
            d_grad_norm,
            g_grad_norm,
            delta,
            max_perturbation: worst,
        })
    }

    /// Adversarial triplet loss of meta-test anchors shifted by `-delta`,
    /// differentiable with respect to the generator through `delta`.
    pub fn meta_test_loss(&mut self, batch_a: &ImageBatch, delta: &Tensor) -> Result<Tensor> {
        if delta.dim(0)? != batch_a.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} perturbations", batch_a.len()),
                got: format!("{}", delta.dim(0)?),
            });
        }
        let b = batch_a.len();
        let xa = batch_a.tensor(&self.device)?;
        if delta.dims() != xa.dims() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", xa.dims()),
                got: format!("{:?}", delta.dims()),
            });
        }
        let (clean_emb, trips) = match self.cfg.mode {
            TrainMode::Supervised => {
                let labels = batch_a
                    .labels
                    .as_deref()
                    .ok_or_else(|| Error::Dataset("supervised meta-test needs identity labels".into()))?;
                let emb = self.surrogate.forward(&xa)?.detach();
                let trips: Vec<[usize; 3]> = mine_triplets_supervised(&rows(&emb)?, labels)?
                    .into_iter()
                    .map(|t| [t.anchor, t.negative, t.positive])
                    .collect();
                (emb, trips)
            }
            TrainMode::Unsupervised => {
                let params: Vec<AugmentParams> = (0..b).map(|_| AugmentParams::sample(&mut self.rng)).collect();
                let both = Tensor::cat(&[&xa, &augment_rows(&xa, &params)?], 0)?;
                let emb = self.surrogate.forward(&both)?.detach();
                let values = rows(&emb)?;
                let trips = (0..b)
                    .map(|i| mine_triplet_unsupervised(&values, i, i + b).map(|t| [t.anchor, t.negative, t.positive]))
                    .collect::<Result<Vec<_>>>()?;
                (emb, trips)
            }
        };
        if trips.is_empty() {
            return Err(Error::Dataset("no triplet can be mined from the meta-test batch".into()));
        }
        let shifted = (&xa - delta)?;
        let shifted = if self.cfg.meta_clamp { shifted.clamp(0f32, 1f32)? } else { shifted };
        let anchors = self.surrogate.forward(&shifted)?.to_dtype(DType::F32)?;
        let clean_emb = clean_emb.to_dtype(DType::F32)?;
        adv_triplet_loss_t(
            &select(&anchors, &trips.iter().map(|t| t[0]).collect::<Vec<_>>())?,
            &select(&clean_emb, &trips.iter().map(|t| t[1]).collect::<Vec<_>>())?,
            &select(&clean_emb, &trips.iter().map(|t| t[2]).collect::<Vec<_>>())?,
            self.cfg.m,
        )
    }

    fn meta_grads(&self, loss: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let scaled = loss.affine(self.cfg.lambda, 0.0)?;
        Ok(self.opt_meta.collect(&scaled.backward()?))
    }

    /// One Adam step on the generator minimizing `lambda * loss`. Returns the
    /// gradient norm.
    pub fn meta_test_update(&mut self, loss: &Tensor) -> Result<f64> {
        let grads = self.meta_grads(loss)?;
        let norm = Adam::grad_norm(&grads)?;
        self.opt_meta.step_with(&grads)?;
        Ok(norm)
    }

    /// Add the gradient of `lambda * loss` to the running epoch sum.
    pub fn accumulate_meta(&mut self, loss: &Tensor) -> Result<f64> {
        let grads = self.meta_grads(loss)?;
        let norm = Adam::grad_norm(&grads)?;
        if self.meta_acc.is_empty() {
            self.meta_acc = grads.into_iter().map(|g| g.map(|g| g.detach())).collect();
        } else {
            for (acc, g) in self.meta_acc.iter_mut().zip(grads) {
                *acc = match (acc.take(), g) {
                    (Some(a), Some(g)) => Some((a + g.detach())?),
                    (a, g) => a.or(g.map(|g| g.detach())),
                };
            }
        }
        self.meta_count += 1;
        Ok(norm)
    }

    /// One Adam step on the mean of the accumulated gradients.
    pub fn apply_accumulated_meta(&mut self) -> Result<()> {
        if self.meta_count == 0 {
            return Ok(());
        }
        let scale = 1.0 / self.meta_count as f64;
        let grads = std::mem::take(&mut self.meta_acc)
            .into_iter()
            .map(|g| g.map(|g| g.affine(scale, 0.0)).transpose())
            .collect::<std::result::Result<Vec<_>, _>>()?;
        self.meta_count = 0;
        self.opt_meta.step_with(&grads)?;
        Ok(())
    }

    fn draw_batches(&mut self, ds: &Dataset) -> Result<Vec<ImageBatch>> {
        let pool = ds.training_pool();
        let supervised = self.cfg.mode == TrainMode::Supervised;
        if self.cfg.iters_per_epoch == 0 {
            return epoch_batches(ds, &pool, self.cfg.p, self.cfg.k, supervised, &mut self.rng);
        }
        if pool.len() < self.cfg.batch_size() {
            return Err(Error::Dataset(format!(
                "dataset '{}' has {} training samples, fewer than one batch of {}",
                ds.name(),
                pool.len(),
                self.cfg.batch_size()
            )));
        }
        (0..self.cfg.iters_per_epoch)
            .map(|_| self.draw_one(ds, &pool))
            .collect()
    }

    fn draw_one(&mut self, ds: &Dataset, pool: &[usize]) -> Result<ImageBatch> {
        match self.cfg.mode {
            TrainMode::Supervised => sample_pk_batch(ds, pool, self.cfg.p, self.cfg.k, &mut self.rng),
            TrainMode::Unsupervised => sample_random_batch(ds, pool, self.cfg.batch_size(), &mut self.rng),
        }
    }

    /// One outer iteration over the meta-train set.
    pub fn run_epoch(&mut self, ds_t: &Dataset, ds_a: Option<&Dataset>) -> Result<()> {
        if self.cfg.use_meta && ds_a.is_none() {
            return Err(Error::Config("meta-learning needs a meta-test dataset".into()));
        }
        self.rng = Self::epoch_rng(self.cfg.seed, self.epoch);
        let batches = self.draw_batches(ds_t)?;
        let pool_a = ds_a.map(|d| d.training_pool()).unwrap_or_default();
        if let Some(a) = ds_a {
            if self.cfg.use_meta && pool_a.len() < self.cfg.batch_size() {
                return Err(Error::Dataset(format!(
                    "meta-test dataset '{}' has {} training samples, fewer than one batch of {}",
                    a.name(),
                    pool_a.len(),
                    self.cfg.batch_size()
                )));
            }
        }
        for (bi, batch) in batches.iter().enumerate() {
            let start = Instant::now();
            let step = self.meta_train_step(batch, bi)?;
            let mut meta_loss = None;
            let mut meta_grad_norm = None;
            if self.cfg.use_meta {
                let ds_a = ds_a.expect("checked above");
                let batch_a = self.draw_one(ds_a, &pool_a)?;
                let before = self.digests()?;
                let loss = self.meta_test_loss(&batch_a, &step.delta)?;
                meta_loss = Some(self.check(bi, "meta_loss", scalar(&loss)?)?);
                meta_grad_norm = Some(if self.cfg.meta_update_per_batch {
                    self.meta_test_update(&loss)?
                } else {
                    self.accumulate_meta(&loss)?
                });
                self.record(bi, Phase::MetaTest, before, step.max_perturbation)?;
            }
            let entry = StepTrace {
                epoch: self.epoch,
                batch: bi,
                d_loss: step.d_loss,
                g_gan: step.g_gan,
                g_trip: step.g_trip,
                meta_loss,
                d_grad_norm: step.d_grad_norm,
                g_grad_norm: step.g_grad_norm,
                meta_grad_norm,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            };
            debug_assert!(entry.all_finite());
            log::debug!("{}", entry.to_line());
            self.trace.push(entry);
        }
        if self.cfg.use_meta && !self.cfg.meta_update_per_batch {
            let before = self.digests()?;
            self.apply_accumulated_meta()?;
            self.record(batches.len(), Phase::MetaTest, before, 0.0)?;
        }
        self.epoch += 1;
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut arrays = self.generator.to_arrays()?;
        arrays.extend(self.discriminator.to_arrays()?);
        arrays.extend(self.opt_g.state_arrays("opt_g.")?);
        arrays.extend(self.opt_d.state_arrays("opt_d.")?);
        arrays.extend(self.opt_meta.state_arrays("opt_meta.")?);
        let meta = serde_json::json!({
            "generator": self.generator.config(),
            "train_config": self.cfg,
            "surrogate": self.surrogate.name(),
            "surrogate_digest": self.surrogate.param_digest()?,
        });
        Ok(Checkpoint {
            kind: "attack".into(),
            epoch: self.epoch as u64,
            config_hash: self.cfg.config_hash(),
            meta,
            arrays,
        })
    }

    /// Continue from a saved attack checkpoint with the same configuration.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.kind != "attack" {
            return Err(Error::Config(format!("expected an attack checkpoint, got '{}'", ckpt.kind)));
        }
        if ckpt.config_hash != self.cfg.config_hash() {
            return Err(Error::Config("checkpoint was written with a different configuration".into()));
        }
        self.generator.load_arrays(&ckpt.arrays)?;
        self.discriminator.load_arrays(&ckpt.arrays)?;
        self.opt_g.load_state(&ckpt.arrays, "opt_g.")?;
        self.opt_d.load_state(&ckpt.arrays, "opt_d.")?;
        self.opt_meta.load_state(&ckpt.arrays, "opt_meta.")?;
        self.epoch = ckpt.epoch as usize;
        Ok(())
    }
}

/// Rebuild the generator stored in an attack checkpoint.
pub fn generator_from_checkpoint(ckpt: &Checkpoint) -> Result<Generator> {
    if ckpt.kind != "attack" {
        return Err(Error::Config(format!("expected an attack checkpoint, got '{}'", ckpt.kind)));
    }
    let cfg: GeneratorConfig = serde_json::from_value(ckpt.meta["generator"].clone())?;
    let g = Generator::new(cfg, 0)?;
    g.load_arrays(&ckpt.arrays)?;
    Ok(g)
}

/// Training configuration stored in an attack checkpoint.
pub fn train_config_from_checkpoint(ckpt: &Checkpoint) -> Result<TrainConfig> {
    Ok(serde_json::from_value(ckpt.meta["train_config"].clone())?)
}

pub struct TrainOutcome {
    pub generator: Generator,
    pub trace: Vec<StepTrace>,
    pub checkpoint: Checkpoint,
    pub audit: Vec<AuditRecord>,
    pub artifacts: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Checkpoints and the trace go here when set.
    pub out_dir: Option<PathBuf>,
    pub audit: bool,
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("attack_epoch_{epoch:03}.ckpt")
}

/// Full training loop.
pub fn train(
    ds_t: &Dataset,
    ds_a: Option<&Dataset>,
    surrogate: &dyn Embedder,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.use_meta && ds_a.is_none() {
        return Err(Error::Config("meta-learning needs a meta-test dataset".into()));
    }
    let ds_a = if cfg.use_meta { ds_a } else { None };
    if let Some(a) = ds_a {
        if a.image_shape() != ds_t.image_shape() {
            return Err(Error::ShapeMismatch {
                expected: format!("meta-test images of shape {:?}", ds_t.image_shape()),
                got: format!("{:?}", a.image_shape()),
            });
        }
    }
    if cfg.mode == TrainMode::Supervised {
        for ds in std::iter::once(ds_t).chain(ds_a) {
            if !ds.is_labeled() {
                return Err(Error::Dataset(format!(
                    "dataset '{}' has no identity labels; use unsupervised mode",
                    ds.name()
                )));
            }
        }
    }
    let f_hash = surrogate.param_digest()?;
    let mut trainer = MetaTrainer::new(cfg.clone(), surrogate, ds_t.image_shape())?;
    if opts.audit {
        trainer.enable_audit();
    }
    let mut artifacts = BTreeMap::new();
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for _ in 0..cfg.epochs {
        trainer.run_epoch(ds_t, ds_a)?;
        log::info!(
            "epoch {} done: {}",
            trainer.epoch(),
            trainer.trace().last().map(|t| t.to_line()).unwrap_or_default()
        );
        if let Some(dir) = &opts.out_dir {
            let path = dir.join(checkpoint_name(trainer.epoch()));
            save_checkpoint(&path, &trainer.checkpoint()?)?;
            let trace_path = dir.join("trace.csv");
            write_trace(trainer.trace(), &trace_path)?;
            artifacts.insert(format!("checkpoint_epoch_{}", trainer.epoch()), path);
            artifacts.insert("trace".into(), trace_path);
        }
    }
    if surrogate.param_digest()? != f_hash {
        return Err(Error::InvalidArgument("surrogate parameters changed during training".into()));
    }
    let checkpoint = trainer.checkpoint()?;
    if let Some(dir) = &opts.out_dir {
        let path = dir.join("attack.ckpt");
        save_checkpoint(&path, &checkpoint)?;
        artifacts.insert("checkpoint".into(), path);
    }
    Ok(TrainOutcome {
        generator: trainer.generator.clone(),
        trace: trainer.trace.clone(),
        audit: trainer.audit().to_vec(),
        checkpoint,
        artifacts,
    })
}
