//! Python bindings: tensors, synthetic data, containers, metrics, the model
//! forward pass and training.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use tubelet_core::config::RunConfig;
use tubelet_core::dataio;
use tubelet_core::datasim;
use tubelet_core::model::{model_forward, ModelConfig, ModelParams, Variant};
use tubelet_core::objectives::{self, MetricSet};
use tubelet_core::trainer::{self, TrainConfig, TrainState};
use tubelet_core::{Error, Tensor};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Numerical(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Dense row-major float32 array.
#[pyclass(name = "Tensor", module = "tubelet", from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: Tensor<f32>,
}

impl From<Tensor<f32>> for PyTensor {
    fn from(inner: Tensor<f32>) -> Self {
        PyTensor { inner }
    }
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        Tensor::new(shape, data).map(Into::into).map_err(to_py)
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Tensor::zeros(shape).into()
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    /// Little-endian float32 bytes, suitable for `numpy.frombuffer`.
    fn tobytes(&self) -> Vec<u8> {
        self.inner.data().iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn sum(&self) -> f64 {
        self.inner.data().iter().map(|&v| v as f64).sum()
    }

    fn __len__(&self) -> usize {
        self.inner.numel()
    }

    fn __eq__(&self, other: &PyTensor) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

fn metrics_dict(m: &MetricSet) -> HashMap<String, Option<f64>> {
    HashMap::from([
        ("mse".to_string(), Some(m.mse)),
        ("sam".to_string(), Some(m.sam)),
        ("psnr".to_string(), Some(m.psnr)),
        ("ssim".to_string(), Some(m.ssim)),
        ("masked_mse".to_string(), m.masked_mse),
        ("masked_sam".to_string(), m.masked_sam),
        ("masked_psnr".to_string(), m.masked_psnr),
        ("masked_ssim".to_string(), m.masked_ssim),
    ])
}

/// Synthetic scene: `(msi, sar, class_map)`.
#[pyfunction]
#[pyo3(signature = (seed, height=60, width=60, n_classes=5))]
fn generate_scene(seed: u64, height: usize, width: usize, n_classes: usize) -> PyResult<(PyTensor, PyTensor, Vec<u16>)> {
    let s = datasim::generate_scene(seed, height, width, n_classes).map_err(to_py)?;
    Ok((s.msi.into(), s.sar.into(), s.class_map))
}

#[pyfunction]
#[pyo3(signature = (seed, frames=6, height=60, width=60, n_clouds=20, cloud_size=0.3))]
fn generate_cloud_mask(seed: u64, frames: usize, height: usize, width: usize, n_clouds: usize, cloud_size: f64) -> PyResult<PyTensor> {
    datasim::generate_cloud_mask(seed, frames, height, width, n_clouds, cloud_size)
        .map(|m| m.mask.into())
        .map_err(to_py)
}

#[pyfunction]
fn apply_cloud_mask(msi: &PyTensor, mask: &PyTensor) -> PyResult<PyTensor> {
    datasim::apply_cloud_mask(&msi.inner, &mask.inner).map(Into::into).map_err(to_py)
}

/// A list of clouded samples with an 80/20 train/validation split.
#[pyclass(name = "Dataset", module = "tubelet")]
pub struct PyDataset {
    inner: datasim::Dataset,
}

#[pymethods]
impl PyDataset {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn n_train(&self) -> usize {
        self.inner.n_train
    }

    #[getter]
    fn has_sar(&self) -> bool {
        self.inner.has_sar()
    }

    /// `{"msi_clouded", "sar", "mask", "target"}` of sample `index`.
    fn sample(&self, index: usize) -> PyResult<HashMap<String, Option<PyTensor>>> {
        let s = self
            .inner
            .samples
            .get(index)
            .ok_or_else(|| PyIndexError::new_err(format!("sample {index} out of range")))?;
        Ok(HashMap::from([
            ("msi_clouded".to_string(), Some(s.msi_clouded.clone().into())),
            ("sar".to_string(), s.sar.clone().map(Into::into)),
            ("mask".to_string(), Some(s.mask.clone().into())),
            ("target".to_string(), Some(s.target.clone().into())),
        ]))
    }

    fn digest(&self) -> PyResult<String> {
        dataio::dataset_digest(&self.inner).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        dataio::write_container(&path, &self.inner).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        dataio::read_container(&path).map(|inner| PyDataset { inner }).map_err(to_py)
    }
}

#[pyfunction]
#[pyo3(signature = (seed, n_samples, height=60, width=60, clouds=20, cloud_size=0.3))]
fn make_dataset(seed: u64, n_samples: usize, height: usize, width: usize, clouds: usize, cloud_size: f64) -> PyResult<PyDataset> {
    datasim::make_dataset(seed, n_samples, height, width, clouds, cloud_size)
        .map(|inner| PyDataset { inner })
        .map_err(to_py)
}

#[pyfunction]
fn mse(pred: &PyTensor, target: &PyTensor) -> PyResult<f32> {
    objectives::mse_loss(&pred.inner, &target.inner).map_err(to_py)
}

#[pyfunction]
fn sam(pred: &PyTensor, target: &PyTensor) -> PyResult<f32> {
    objectives::sam_loss(&pred.inner, &target.inner).map_err(to_py)
}

#[pyfunction]
fn psnr(pred: &PyTensor, target: &PyTensor) -> PyResult<f64> {
    objectives::psnr(&pred.inner, &target.inner).map_err(to_py)
}

#[pyfunction]
fn ssim(pred: &PyTensor, target: &PyTensor) -> PyResult<f64> {
    objectives::ssim(&pred.inner, &target.inner).map_err(to_py)
}

/// All metrics, including the cloud-masked ones (`None` without masked pixels).
#[pyfunction]
fn evaluate(pred: &PyTensor, target: &PyTensor, mask: &PyTensor) -> PyResult<HashMap<String, Option<f64>>> {
    objectives::evaluate_all(&pred.inner, &target.inner, &mask.inner)
        .map(|m| metrics_dict(&m))
        .map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (epoch, lr=1e-3, gamma=0.95, decay_every=10))]
fn lr_at(epoch: usize, lr: f64, gamma: f64, decay_every: usize) -> f64 {
    trainer::lr_at(epoch, &TrainConfig { lr, gamma, decay_every, ..TrainConfig::default() })
}

/// Model configuration plus parameters.
#[pyclass(name = "Model", module = "tubelet")]
pub struct PyModel {
    config: ModelConfig,
    params: ModelParams<f32>,
}

#[pymethods]
impl PyModel {
    /// Freshly initialized model with the reference hyperparameters of `variant`.
    /// `overrides` is a JSON object of `ModelConfig` fields to replace.
    #[new]
    #[pyo3(signature = (variant="smts-vivit", seed=42, overrides=None))]
    fn new(variant: &str, seed: u64, overrides: Option<&str>) -> PyResult<Self> {
        let v: Variant = variant.parse().map_err(to_py)?;
        let mut value = serde_json::to_value(ModelConfig::reference(v)).map_err(|e| to_py(e.into()))?;
        if let Some(text) = overrides {
            let patch: serde_json::Value = serde_json::from_str(text).map_err(|e| to_py(e.into()))?;
            let obj = patch.as_object().ok_or_else(|| PyValueError::new_err("overrides must be a JSON object"))?;
            for (k, val) in obj {
                value[k] = val.clone();
            }
        }
        let config: ModelConfig = serde_json::from_value(value).map_err(|e| to_py(e.into()))?;
        let params = ModelParams::init(&config, seed).map_err(to_py)?;
        Ok(PyModel { config, params })
    }

    /// Loads the parameters and configuration stored in a training checkpoint.
    #[staticmethod]
    fn from_checkpoint(path: PathBuf) -> PyResult<Self> {
        let ckpt = dataio::read_checkpoint(&path).map_err(to_py)?;
        let (exp, state) = TrainState::from_checkpoint(&ckpt).map_err(to_py)?;
        Ok(PyModel { config: exp.model, params: state.params })
    }

    #[getter]
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.config).map_err(|e| to_py(e.into()))
    }

    fn param_count(&self) -> usize {
        self.params.count()
    }

    fn param_names(&self) -> Vec<String> {
        self.params.names().map(str::to_string).collect()
    }

    fn param(&self, name: &str) -> PyResult<PyTensor> {
        self.params
            .get(name)
            .map(|t| t.clone().into())
            .ok_or_else(|| PyValueError::new_err(format!("unknown parameter {name}")))
    }

    /// Reconstruction `[C, T, H, W]` from clouded MSI `[T, C, H, W]`, optional SAR and mask `[T, H, W]`.
    #[pyo3(signature = (msi_clouded, mask, sar=None))]
    fn forward(&self, msi_clouded: &PyTensor, mask: &PyTensor, sar: Option<&PyTensor>) -> PyResult<PyTensor> {
        model_forward(&msi_clouded.inner, sar.map(|s| &s.inner), &mask.inner, &self.params, &self.config)
            .map(Into::into)
            .map_err(to_py)
    }
}

/// Trains on `dataset` with a JSON run configuration; returns the per-epoch training losses.
#[pyfunction]
#[pyo3(signature = (dataset, config_json="{}"))]
fn train(py: Python<'_>, dataset: &PyDataset, config_json: &str) -> PyResult<(PyModel, Vec<f64>)> {
    let cfg = RunConfig::from_json(config_json).map_err(to_py)?;
    let exp = cfg.experiment().map_err(to_py)?;
    let data = dataset.inner.clone();
    let state = py.detach(|| trainer::train(&data, &exp, |_| Ok(()))).map_err(to_py)?;
    let losses = state.log.iter().map(|e| e.train_loss).collect();
    Ok((PyModel { config: exp.model, params: state.params }, losses))
}

#[pymodule]
fn tubelet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyTensor>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(generate_cloud_mask, m)?)?;
    m.add_function(wrap_pyfunction!(apply_cloud_mask, m)?)?;
    m.add_function(wrap_pyfunction!(make_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(mse, m)?)?;
    m.add_function(wrap_pyfunction!(sam, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
