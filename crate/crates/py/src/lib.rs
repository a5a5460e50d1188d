//! Python bindings: datasets, victim embedders, attack training and
//! evaluation, plus the scalar building blocks.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mega_core::attack::{attack, project_linf_slice, AttackBudget, MaskSource};
use mega_core::dataset::{
    export_manifest, generate_toy_dataset, load_image_folder, read_manifest, Dataset, Image, LoadOptions, Naming,
    Split, SplitSpec,
};
use mega_core::meta_trainer::{
    generator_from_checkpoint, train, train_config_from_checkpoint, TrainConfig, TrainOptions,
};
use mega_core::nets::{
    build_toy_embedder, embed_images, embedder_from_checkpoint, load_checkpoint, save_checkpoint, train_embedder,
    victim_checkpoint, Arch, Checkpoint, Embedder, Generator, ToyEmbedder, VictimTrainConfig,
};
use mega_core::objectives;
use mega_core::retrieval_eval::{self, evaluate_attack, DistMatrix, QueryAttack};

fn py_err(e: mega_core::Error) -> PyErr {
    let msg = format!("[{}] {e}", e.kind());
    match e {
        mega_core::Error::Io { .. } => PyIOError::new_err(msg),
        mega_core::Error::NonFiniteLoss { .. } | mega_core::Error::Tensor(_) => PyRuntimeError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for mega_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// A labeled or unlabeled image collection with split assignments.
#[pyclass(name = "Dataset", module = "mega")]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    /// Synthetic pedestrians: colored outfits, patterns and per-image jitter.
    #[staticmethod]
    #[pyo3(signature = (num_ids=16, imgs_per_id=8, image_size=32, seed=0))]
    fn toy(num_ids: usize, imgs_per_id: usize, image_size: usize, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: generate_toy_dataset(num_ids, imgs_per_id, image_size, seed).py()?,
        })
    }

    /// Load a manifest file or an image folder.
    #[staticmethod]
    #[pyo3(signature = (path, naming="reid_underscore", split="meta_train", height=32, width=32))]
    fn load(path: PathBuf, naming: &str, split: &str, height: usize, width: usize) -> PyResult<Self> {
        let opts = LoadOptions { height, width };
        let inner = if path.is_file() {
            read_manifest(&path, &opts).py()?
        } else {
            let naming: Naming = naming.parse().py()?;
            let spec: SplitSpec = split.parse().py()?;
            load_image_folder(&path, naming, &spec, &opts).py()?.0
        };
        Ok(Self { inner })
    }

    /// Write PNGs and `manifest.csv` into `dir`; returns the manifest path.
    fn export(&self, dir: PathBuf) -> PyResult<PathBuf> {
        Ok(export_manifest(&self.inner, &dir).py()?.0)
    }

    fn without_labels(&self) -> Self {
        Self {
            inner: self.inner.without_labels(),
        }
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name().to_string()
    }

    #[getter]
    fn num_identities(&self) -> usize {
        self.inner.num_identities()
    }

    #[getter]
    fn image_shape(&self) -> (usize, usize, usize) {
        self.inner.image_shape()
    }

    #[getter]
    fn is_labeled(&self) -> bool {
        self.inner.is_labeled()
    }

    /// Sample indices of a split.
    fn indices(&self, split: &str) -> PyResult<Vec<usize>> {
        let split: Split = split.parse().py()?;
        Ok(self.inner.indices_of(split))
    }

    /// Flat CHW pixel values of one sample.
    fn image(&self, index: usize) -> PyResult<Vec<f32>> {
        self.inner
            .samples()
            .get(index)
            .map(|s| s.image.data().to_vec())
            .ok_or_else(|| PyValueError::new_err(format!("index {index} out of range")))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(name={:?}, len={}, identities={})",
            self.inner.name(),
            self.inner.len(),
            self.inner.num_identities()
        )
    }
}

/// A frozen toy re-ID embedder.
#[pyclass(name = "Embedder", module = "mega")]
struct PyEmbedder {
    inner: ToyEmbedder,
    epochs: u64,
}

#[pymethods]
impl PyEmbedder {
    /// Identity-classification training of architecture "A" or "B".
    #[staticmethod]
    #[pyo3(signature = (dataset, arch="A", dim=64, epochs=120, lr=5e-3, seed=0))]
    fn train(dataset: &PyDataset, arch: &str, dim: usize, epochs: usize, lr: f64, seed: u64) -> PyResult<Self> {
        let arch: Arch = arch.parse().py()?;
        let cfg = VictimTrainConfig {
            epochs,
            lr,
            seed,
            ..VictimTrainConfig::default()
        };
        let inner = train_embedder(&dataset.inner, build_toy_embedder(arch, dim, seed).py()?, &cfg).py()?;
        Ok(Self {
            inner,
            epochs: epochs as u64,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = load_checkpoint(&path, None).py()?.checkpoint;
        Ok(Self {
            inner: embedder_from_checkpoint(&ckpt).py()?,
            epochs: ckpt.epoch,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &victim_checkpoint(&self.inner, self.epochs, "").py()?).py()
    }

    /// Embeddings of the given sample indices (all samples when omitted).
    #[pyo3(signature = (dataset, indices=None))]
    fn embed(&self, dataset: &PyDataset, indices: Option<Vec<usize>>) -> PyResult<Vec<Vec<f32>>> {
        let samples = dataset.inner.samples();
        let indices = indices.unwrap_or_else(|| (0..samples.len()).collect());
        let images = indices
            .iter()
            .map(|&i| samples.get(i).map(|s| &s.image))
            .collect::<Option<Vec<&Image>>>()
            .ok_or_else(|| PyValueError::new_err("sample index out of range"))?;
        embed_images(&self.inner, &images, 64).py()
    }

    /// Clean retrieval metrics on the query and gallery splits.
    fn evaluate(&self, py: Python<'_>, dataset: &PyDataset) -> PyResult<Py<PyDict>> {
        report_dict(py, &self.inner, None, &dataset.inner, "")
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name().to_string()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn digest(&self) -> PyResult<String> {
        self.inner.param_digest().py()
    }
}

/// A trained perturbation generator and its budget.
#[pyclass(name = "Attack", module = "mega")]
struct PyAttack {
    generator: Generator,
    config: TrainConfig,
    checkpoint: Checkpoint,
    trace: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
enum ConfigValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

/// Training configuration from keyword overrides of the defaults.
fn config_from_pairs(pairs: Vec<(String, ConfigValue)>) -> mega_core::Result<TrainConfig> {
    let mut map = serde_json::Map::new();
    for (k, v) in pairs {
        let value = match v {
            ConfigValue::Bool(b) => serde_json::Value::from(b),
            ConfigValue::Int(i) => serde_json::Value::from(i),
            ConfigValue::Float(f) => serde_json::Value::from(f),
            ConfigValue::Str(s) => serde_json::Value::from(s),
        };
        map.insert(k, value);
    }
    // integral floats such as `epochs=2.0` are rejected by serde, as intended
    let cfg: TrainConfig = serde_json::from_value(serde_json::Value::Object(map))
        .map_err(|e| mega_core::Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn pairs_from_kwargs(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Vec<(String, ConfigValue)>> {
    let mut pairs = Vec::new();
    if let Some(kw) = kwargs {
        for (k, v) in kw.iter() {
            let key: String = k.extract()?;
            let value = if let Ok(b) = v.cast::<pyo3::types::PyBool>() {
                ConfigValue::Bool(b.is_true())
            } else if let Ok(i) = v.extract::<i64>() {
                ConfigValue::Int(i)
            } else if let Ok(f) = v.extract::<f64>() {
                ConfigValue::Float(f)
            } else {
                ConfigValue::Str(v.extract::<String>()?)
            };
            pairs.push((key, value));
        }
    }
    Ok(pairs)
}

#[pymethods]
impl PyAttack {
    /// Train a generator against `surrogate`. Keyword arguments override the
    /// training configuration fields (lr, epochs, use_mask, use_meta, mode, ...).
    #[staticmethod]
    #[pyo3(signature = (dataset, surrogate, meta_dataset=None, out_dir=None, **kwargs))]
    fn train(
        py: Python<'_>,
        dataset: &PyDataset,
        surrogate: &PyEmbedder,
        meta_dataset: Option<&PyDataset>,
        out_dir: Option<PathBuf>,
        kwargs: Option<&Bound<'_, PyDict>>,
    ) -> PyResult<Self> {
        let cfg = config_from_pairs(pairs_from_kwargs(kwargs)?).py()?;
        let opts = TrainOptions { out_dir, audit: false };
        let ds_a = meta_dataset.map(|d| &d.inner);
        let outcome = py
            .detach(|| train(&dataset.inner, ds_a, &surrogate.inner, &cfg, &opts))
            .py()?;
        Ok(Self {
            generator: outcome.generator,
            config: cfg,
            checkpoint: outcome.checkpoint,
            trace: outcome.trace.iter().map(|t| t.to_line()).collect(),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let checkpoint = load_checkpoint(&path, None).py()?.checkpoint;
        Ok(Self {
            generator: generator_from_checkpoint(&checkpoint).py()?,
            config: train_config_from_checkpoint(&checkpoint).py()?,
            checkpoint,
            trace: Vec::new(),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.checkpoint).py()
    }

    /// Attacked copies of the given samples as flat CHW pixel lists.
    fn perturb(&self, dataset: &PyDataset, indices: Vec<usize>) -> PyResult<Vec<Vec<f32>>> {
        let samples = dataset.inner.samples();
        let images = indices
            .iter()
            .map(|&i| samples.get(i).map(|s| &s.image))
            .collect::<Option<Vec<&Image>>>()
            .ok_or_else(|| PyValueError::new_err("sample index out of range"))?;
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let x = Image::stack(&images, &mega_core::Device::Cpu).py()?;
        let budget = self.config.budget().py()?;
        let adv = attack(&self.generator, &x, &budget, None).py()?;
        Ok(Image::unstack(&adv).py()?.into_iter().map(|i| i.into_data()).collect())
    }

    /// Clean versus attacked metrics for `target` on the query/gallery splits.
    #[pyo3(signature = (target, dataset, mask_surrogate=None))]
    fn evaluate(
        &self,
        py: Python<'_>,
        target: &PyEmbedder,
        dataset: &PyDataset,
        mask_surrogate: Option<&PyEmbedder>,
    ) -> PyResult<Py<PyDict>> {
        let spec = QueryAttack {
            generator: &self.generator,
            budget: self.config.budget().py()?,
            mask: mask_surrogate.map(|s| MaskSource {
                embedder: &s.inner as &dyn Embedder,
                margin: self.config.m,
                seed: self.config.seed,
            }),
        };
        report_dict(py, &target.inner, Some(&spec), &dataset.inner, &self.checkpoint.config_hash)
    }

    /// Training trace lines `epoch,batch,d_loss,g_gan,g_trip,meta_loss,wall_ms`.
    #[getter]
    fn trace(&self) -> Vec<String> {
        self.trace.clone()
    }

    #[getter]
    fn epsilon(&self) -> f64 {
        self.config.eps_255 / 255.0
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.checkpoint.config_hash.clone()
    }

    #[getter]
    fn cell(&self) -> &'static str {
        self.config.cell_name()
    }
}

fn report_dict(
    py: Python<'_>,
    target: &dyn Embedder,
    spec: Option<&QueryAttack<'_>>,
    ds: &Dataset,
    config_hash: &str,
) -> PyResult<Py<PyDict>> {
    let query = ds.split_samples(Split::Query);
    let gallery = ds.split_samples(Split::Gallery);
    let cam_filter = query.iter().chain(&gallery).all(|s| s.camera.is_some());
    let out = evaluate_attack(target, spec, &query, &gallery, ds.name(), cam_filter, config_hash).py()?;
    let r = out.report;
    let d = PyDict::new(py);
    d.set_item("target_model", r.target_model)?;
    d.set_item("dataset", r.dataset)?;
    d.set_item("mAP_before", r.map_before)?;
    d.set_item("r1_before", r.r1_before)?;
    d.set_item("r10_before", r.r10_before)?;
    d.set_item("mAP_after", r.map_after)?;
    d.set_item("r1_after", r.r1_after)?;
    d.set_item("r10_after", r.r10_after)?;
    d.set_item("queries", r.queries)?;
    d.set_item("excluded_queries", r.excluded_queries)?;
    Ok(d.unbind())
}

/// Elementwise `clamp(raw, max(x - eps, 0), min(x + eps, 1))`.
#[pyfunction]
fn project_linf(raw: Vec<f32>, x: Vec<f32>, eps: f32) -> PyResult<Vec<f32>> {
    project_linf_slice(&raw, &x, eps).py()
}

/// `max(|a - n| - |a - p| + margin, 0)`.
#[pyfunction]
#[pyo3(signature = (anchor, negative, positive, margin=1.0))]
fn adv_triplet_loss(anchor: Vec<f64>, negative: Vec<f64>, positive: Vec<f64>, margin: f64) -> PyResult<f64> {
    objectives::adv_triplet_loss(&anchor, &negative, &positive, margin).py()
}

/// Budget on the 0-255 scale converted to `[0, 1]` units.
#[pyfunction]
fn epsilon(eps_255: f64) -> PyResult<f64> {
    Ok(AttackBudget::new(eps_255).py()?.epsilon())
}

fn dist_matrix(distances: Vec<Vec<f64>>, q_ids: Vec<usize>, g_ids: Vec<usize>) -> mega_core::Result<DistMatrix> {
    let rows = distances.len();
    let cols = distances.first().map(|r| r.len()).unwrap_or(0);
    DistMatrix::from_values(rows, cols, distances.into_iter().flatten().collect())?.with_labels(q_ids, g_ids)
}

/// Mean average precision of a query x gallery distance matrix.
#[pyfunction]
fn mean_average_precision(distances: Vec<Vec<f64>>, q_ids: Vec<usize>, g_ids: Vec<usize>) -> PyResult<f64> {
    let dm = dist_matrix(distances, q_ids, g_ids).py()?;
    Ok(retrieval_eval::mean_average_precision(&dm, false).py()?.value)
}

/// CMC rank-k accuracy of a query x gallery distance matrix.
#[pyfunction]
fn cmc_rank_k(distances: Vec<Vec<f64>>, q_ids: Vec<usize>, g_ids: Vec<usize>, k: usize) -> PyResult<f64> {
    let dm = dist_matrix(distances, q_ids, g_ids).py()?;
    Ok(retrieval_eval::cmc_rank_k(&dm, k, false).py()?.value)
}

#[pymodule]
fn mega(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyEmbedder>()?;
    m.add_class::<PyAttack>()?;
    m.add_function(wrap_pyfunction!(project_linf, m)?)?;
    m.add_function(wrap_pyfunction!(adv_triplet_loss, m)?)?;
    m.add_function(wrap_pyfunction!(epsilon, m)?)?;
    m.add_function(wrap_pyfunction!(mean_average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(cmc_rank_k, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kwargs_override_defaults() {
        let cfg = config_from_pairs(vec![
            ("epochs".into(), ConfigValue::Int(2)),
            ("use_mask".into(), ConfigValue::Bool(false)),
            ("lr".into(), ConfigValue::Float(1e-3)),
            ("mode".into(), ConfigValue::Str("unsupervised".into())),
        ])
        .unwrap();
        assert_eq!(cfg.epochs, 2);
        assert!(!cfg.use_mask);
        assert_eq!(cfg.lr, 1e-3);
        assert_eq!(cfg.lambda, TrainConfig::default().lambda);
    }

    #[test]
    fn unknown_or_invalid_kwargs_fail() {
        assert!(config_from_pairs(vec![("bogus".into(), ConfigValue::Int(1))]).is_err());
        assert!(config_from_pairs(vec![("flip_prob".into(), ConfigValue::Float(0.7))]).is_err());
    }

    #[test]
    fn int_for_float_field_is_accepted() {
        let cfg = config_from_pairs(vec![("eps_255".into(), ConfigValue::Int(8))]).unwrap();
        assert_eq!(cfg.eps_255, 8.0);
    }
}
