//! Python module `evil_seg`: evidential opinions, losses, schedules,
//! metrics, synthetic data and single-pass inference from checkpoints.

use std::path::PathBuf;

use evil_core::checkpoint::Checkpoint;
use evil_core::config::{Preset, RunConfig};
use evil_core::data::{generate_synthetic as synth, stack_images, stack_labels, Sample, SyntheticSpec};
use evil_core::eval::{self, EmptyMaskPolicy};
use evil_core::evidential::{self, default_tau, DirichletParams, EvidenceMap, Logits};
use evil_core::loss::{self, LossGrad, OneHotLabels, UncertaintyMask};
use evil_core::nn::{build_backbone, UNet};
use evil_core::EvilError;
use ndarray::Array4;
use numpy::{IntoPyArray, PyArray4, PyReadonlyArray2, PyReadonlyArray3, PyReadonlyArray4};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: EvilError) -> PyErr {
    match e {
        EvilError::Io { .. } => PyIOError::new_err(e.to_string()),
        EvilError::NonFinite(_) | EvilError::Checkpoint(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

type LossOut<'py> = (f64, Bound<'py, PyArray4<f64>>);

fn loss_out(py: Python<'_>, l: evil_core::Result<LossGrad>) -> PyResult<LossOut<'_>> {
    let l = l.map_err(py_err)?;
    Ok((l.value, l.grad.into_pyarray(py)))
}

fn one_hot(labels: PyReadonlyArray3<u8>, k: usize) -> PyResult<OneHotLabels> {
    OneHotLabels::from_classes(&labels.as_array().to_owned(), k).map_err(py_err)
}

fn opinion(alpha: &Array4<f64>) -> PyResult<DirichletParams> {
    let k = alpha.shape()[1];
    let evidence = EvidenceMap::from_values(alpha.mapv(|a| a - 1.0), default_tau(k)).map_err(py_err)?;
    evidential::belief_and_uncertainty(&evidence).map_err(py_err)
}

fn policy(name: &str) -> PyResult<EmptyMaskPolicy> {
    match name {
        "skip" => Ok(EmptyMaskPolicy::Skip),
        "diagonal" => Ok(EmptyMaskPolicy::Diagonal),
        other => Err(PyValueError::new_err(format!("unknown empty-mask policy {other:?}; use 'skip' or 'diagonal'"))),
    }
}

/// `exp(tanh(z) / tau)` for logits `[B, K, H, W]`; `tau` defaults to `1/K`.
#[pyfunction]
#[pyo3(signature = (logits, tau=None))]
fn evidence_from_logits<'py>(
    py: Python<'py>,
    logits: PyReadonlyArray4<f64>,
    tau: Option<f64>,
) -> PyResult<Bound<'py, PyArray4<f64>>> {
    let z = Logits::new(logits.as_array().to_owned()).map_err(py_err)?;
    let tau = tau.unwrap_or_else(|| default_tau(z.num_classes()));
    let e = evidential::evidence_from_logits(&z, tau).map_err(py_err)?;
    Ok(e.values().clone().into_pyarray(py))
}

/// Dirichlet opinion of an evidence map: dict with `alpha`, `strength`,
/// `belief` and `uncertainty`.
#[pyfunction]
fn belief_and_uncertainty<'py>(py: Python<'py>, evidence: PyReadonlyArray4<f64>) -> PyResult<Bound<'py, PyDict>> {
    let e = evidence.as_array().to_owned();
    let k = e.shape()[1];
    let map = EvidenceMap::from_values(e, default_tau(k)).map_err(py_err)?;
    let p = evidential::belief_and_uncertainty(&map).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("alpha", p.alpha.into_pyarray(py))?;
    d.set_item("strength", p.strength.into_pyarray(py))?;
    d.set_item("belief", p.belief.into_pyarray(py))?;
    d.set_item("uncertainty", p.uncertainty.into_pyarray(py))?;
    Ok(d)
}

/// `(value, dL/dalpha)`; `labels` holds class indices `[B, H, W]`.
#[pyfunction]
fn digamma_loss<'py>(py: Python<'py>, alpha: PyReadonlyArray4<f64>, labels: PyReadonlyArray3<u8>) -> PyResult<LossOut<'py>> {
    let a = alpha.as_array().to_owned();
    let y = one_hot(labels, a.shape()[1])?;
    loss_out(py, loss::digamma_loss(&a, &y))
}

#[pyfunction]
fn kl_to_uniform<'py>(py: Python<'py>, alpha_tilde: PyReadonlyArray4<f64>) -> PyResult<LossOut<'py>> {
    loss_out(py, loss::kl_to_uniform(&alpha_tilde.as_array().to_owned()))
}

#[pyfunction]
fn evidential_loss<'py>(
    py: Python<'py>,
    alpha: PyReadonlyArray4<f64>,
    labels: PyReadonlyArray3<u8>,
    beta: f64,
) -> PyResult<LossOut<'py>> {
    let a = alpha.as_array().to_owned();
    let y = one_hot(labels, a.shape()[1])?;
    loss_out(py, loss::evidential_loss(&a, &y, beta))
}

/// Dice on `softmax(belief)`, gradient with respect to `alpha`.
#[pyfunction]
fn certain_dice_loss<'py>(py: Python<'py>, alpha: PyReadonlyArray4<f64>, labels: PyReadonlyArray3<u8>) -> PyResult<LossOut<'py>> {
    let a = alpha.as_array().to_owned();
    let y = one_hot(labels, a.shape()[1])?;
    loss_out(py, loss::certain_dice_loss(&opinion(&a)?, &y))
}

#[pyfunction]
fn sseg_loss<'py>(py: Python<'py>, logits: PyReadonlyArray4<f64>, labels: PyReadonlyArray3<u8>) -> PyResult<LossOut<'py>> {
    let z = logits.as_array().to_owned();
    let y = one_hot(labels, z.shape()[1])?;
    loss_out(py, loss::sseg_loss(&z, &y))
}

/// `mask` is boolean `[B, 1, H, W]`.
#[pyfunction]
fn masked_cross_entropy<'py>(
    py: Python<'py>,
    logits: PyReadonlyArray4<f64>,
    pseudo: PyReadonlyArray3<u8>,
    mask: PyReadonlyArray4<bool>,
) -> PyResult<LossOut<'py>> {
    let m = UncertaintyMask::from_bools(mask.as_array().to_owned());
    loss_out(
        py,
        loss::masked_cross_entropy(&logits.as_array().to_owned(), &pseudo.as_array().to_owned(), &m),
    )
}

#[pyfunction]
fn beta_schedule(t: u64, t_max: u64) -> PyResult<f64> {
    loss::beta_schedule(t, t_max).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (t, t_max, lam_max=0.1))]
fn lambda_rampup(t: u64, t_max: u64, lam_max: f64) -> PyResult<f64> {
    loss::lambda_rampup(t, t_max, lam_max).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (t, t_max, lr0=0.01))]
fn poly_lr(t: u64, t_max: u64, lr0: f64) -> PyResult<f64> {
    loss::poly_lr(t, t_max, lr0).map_err(py_err)
}

#[pyfunction]
fn dsc(pred: PyReadonlyArray2<bool>, gt: PyReadonlyArray2<bool>) -> PyResult<f64> {
    eval::dsc(pred.as_array(), gt.as_array()).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (pred, gt, empty_mask="skip"))]
fn hd95(pred: PyReadonlyArray2<bool>, gt: PyReadonlyArray2<bool>, empty_mask: &str) -> PyResult<Option<f64>> {
    eval::hd95(pred.as_array(), gt.as_array(), policy(empty_mask)?).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (pred, gt, empty_mask="skip"))]
fn asd(pred: PyReadonlyArray2<bool>, gt: PyReadonlyArray2<bool>, empty_mask: &str) -> PyResult<Option<f64>> {
    eval::asd(pred.as_array(), gt.as_array(), policy(empty_mask)?).map_err(py_err)
}

/// Synthetic cardiac-like slices: dict with `images` `[N, 1, H, W]`,
/// `labels` `[N, H, W]`, `patients` and `slices`.
#[pyfunction]
#[pyo3(signature = (n_patients=30, slices_per_patient=8, size=32, noise_std=0.2, seed=0))]
fn generate_synthetic(
    py: Python<'_>,
    n_patients: usize,
    slices_per_patient: usize,
    size: usize,
    noise_std: f64,
    seed: u64,
) -> PyResult<Bound<'_, PyDict>> {
    let spec = SyntheticSpec {
        n_patients,
        slices_per_patient,
        size,
        noise_std,
        seed,
        ..SyntheticSpec::default()
    };
    let ds = synth(&spec).map_err(py_err)?;
    let refs: Vec<&Sample> = ds.samples.iter().collect();
    let d = PyDict::new(py);
    d.set_item("images", stack_images(&refs).into_pyarray(py))?;
    d.set_item("labels", stack_labels(&refs).into_pyarray(py))?;
    d.set_item("patients", ds.samples.iter().map(|s| s.patient_id.clone()).collect::<Vec<_>>())?;
    d.set_item("slices", ds.samples.iter().map(|s| s.slice_index).collect::<Vec<_>>())?;
    Ok(d)
}

/// A run configuration (data/model/train/eval sections).
#[pyclass(name = "Config")]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    /// `desk`, `acceptance` or `full-scale`.
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        Ok(PyConfig {
            inner: RunConfig::preset(Preset::parse(name).map_err(py_err)?),
        })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(PyConfig {
            inner: RunConfig::from_toml_str(text).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyConfig {
            inner: RunConfig::load(&path).map_err(py_err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    /// Applies one `section.key=value` override.
    fn set(&mut self, assignment: &str) -> PyResult<()> {
        self.inner.set(assignment).map_err(py_err)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Config({:?})", self.inner.train.mode)
    }
}

/// One segmentation network, either freshly initialized or loaded from a
/// checkpoint.
#[pyclass(name = "Model")]
struct PyModel {
    net: UNet<f32>,
    rate: f64,
    seed: u64,
}

#[pymethods]
impl PyModel {
    /// `head` is `enet` (evidential) or `snet`.
    #[staticmethod]
    #[pyo3(signature = (path, head="enet"))]
    fn from_checkpoint(path: PathBuf, head: &str) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(py_err)?;
        let nets = ckpt.state.nets;
        let net = match head {
            "enet" => nets.enet,
            "snet" => nets.snet,
            other => return Err(PyValueError::new_err(format!("unknown head {other:?}; use 'enet' or 'snet'"))),
        };
        Ok(PyModel {
            net,
            rate: ckpt.config.eval.mc_rate,
            seed: ckpt.config.eval.mc_seed,
        })
    }

    /// Untrained network with the architecture of `config`.
    #[staticmethod]
    fn init(config: &PyConfig, seed: u64) -> PyResult<Self> {
        Ok(PyModel {
            net: build_backbone(&config.inner.model, seed).map_err(py_err)?,
            rate: config.inner.eval.mc_rate,
            seed: config.inner.eval.mc_seed,
        })
    }

    #[getter]
    fn forward_count(&self) -> u64 {
        self.net.forward_count()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.net.config().num_classes
    }

    /// Raw logits `[B, K, H, W]` for images `[B, 1, H, W]`.
    fn forward<'py>(&self, py: Python<'py>, images: PyReadonlyArray4<f32>) -> PyResult<Bound<'py, PyArray4<f32>>> {
        Ok(self.net.forward(&images.as_array().to_owned()).map_err(py_err)?.into_pyarray(py))
    }

    /// Single-pass prediction: dict with `classes`, `uncertainty` and `belief`.
    fn predict<'py>(&self, py: Python<'py>, images: PyReadonlyArray4<f32>) -> PyResult<Bound<'py, PyDict>> {
        let p = eval::predict_with_uncertainty(&self.net, &images.as_array().to_owned()).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("classes", p.classes.into_pyarray(py))?;
        d.set_item("uncertainty", p.uncertainty.into_pyarray(py))?;
        d.set_item("belief", p.belief.into_pyarray(py))?;
        Ok(d)
    }

    /// Normalized predictive entropy over `samples` dropout forwards.
    #[pyo3(signature = (images, samples=8, rate=None, seed=None))]
    fn mc_dropout_uncertainty<'py>(
        &self,
        py: Python<'py>,
        images: PyReadonlyArray4<f32>,
        samples: usize,
        rate: Option<f64>,
        seed: Option<u64>,
    ) -> PyResult<Bound<'py, numpy::PyArray3<f64>>> {
        let u = eval::mc_dropout_uncertainty(
            &self.net,
            &images.as_array().to_owned(),
            samples,
            rate.unwrap_or(self.rate),
            seed.unwrap_or(self.seed),
        )
        .map_err(py_err)?;
        Ok(u.into_pyarray(py))
    }
}

#[pymodule]
fn evil_seg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(evidence_from_logits, m)?)?;
    m.add_function(wrap_pyfunction!(belief_and_uncertainty, m)?)?;
    m.add_function(wrap_pyfunction!(digamma_loss, m)?)?;
    m.add_function(wrap_pyfunction!(kl_to_uniform, m)?)?;
    m.add_function(wrap_pyfunction!(evidential_loss, m)?)?;
    m.add_function(wrap_pyfunction!(certain_dice_loss, m)?)?;
    m.add_function(wrap_pyfunction!(sseg_loss, m)?)?;
    m.add_function(wrap_pyfunction!(masked_cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(beta_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(lambda_rampup, m)?)?;
    m.add_function(wrap_pyfunction!(poly_lr, m)?)?;
    m.add_function(wrap_pyfunction!(dsc, m)?)?;
    m.add_function(wrap_pyfunction!(hd95, m)?)?;
    m.add_function(wrap_pyfunction!(asd, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    Ok(())
}
