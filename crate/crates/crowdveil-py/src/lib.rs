//! Python bindings for the crowdveil core.
//!
//! Images cross the boundary as flat `list[float]` in row-major `[H, W, 3]`
//! order with values in [0, 1], always accompanied by explicit `height` and
//! `width` arguments; density maps and attention maps come back the same way
//! with their own grid shapes. Heavier artifacts (datasets, checkpoints)
//! stay on disk and are addressed by path, mirroring the CLI layout.

use std::path::PathBuf;

use ndarray::{Array2, Array3};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use crowdveil_core::data::{
    chw_to_hwc, dataset_fingerprint, generate_dataset, hwc_to_chw, load_dataset, save_dataset,
    Split,
};
use crowdveil_core::generator::{PerturbationGenerator, DEFAULT_EPSILON};
use crowdveil_core::losses::{self, LossWeights, SignConvention};
use crowdveil_core::metrics;
use crowdveil_core::surrogate::{self, Paradigm, SurrogateModel, SurrogateTrainConfig};
use crowdveil_core::training::{
    self, load_generator, load_surrogate, save_surrogate, TrainConfig,
};
use crowdveil_core::{Error, ErrorCategory};

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.category() {
        ErrorCategory::Config => PyValueError::new_err(msg),
        ErrorCategory::Data => PyIOError::new_err(msg),
        ErrorCategory::Numeric => PyRuntimeError::new_err(msg),
        ErrorCategory::Other => PyIOError::new_err(msg),
    }
}

fn image_from_flat(data: Vec<f64>, height: usize, width: usize) -> PyResult<Array3<f64>> {
    if data.len() != height * width * 3 {
        return Err(PyValueError::new_err(format!(
            "expected {} values for a {height}×{width} RGB image, got {}",
            height * width * 3,
            data.len()
        )));
    }
    Ok(Array3::from_shape_vec((height, width, 3), data).expect("length checked"))
}

fn map_from_flat(data: Vec<f64>, height: usize, width: usize) -> PyResult<Array2<f64>> {
    if data.len() != height * width {
        return Err(PyValueError::new_err(format!(
            "expected {} values for a {height}×{width} map, got {}",
            height * width,
            data.len()
        )));
    }
    Ok(Array2::from_shape_vec((height, width), data).expect("length checked"))
}

fn flat(a: &Array3<f64>) -> Vec<f64> {
    a.iter().cloned().collect()
}

fn parse_paradigm(s: &str) -> PyResult<Paradigm> {
    match s {
        "density-map" => Ok(Paradigm::DensityMap),
        "point-regression" => Ok(Paradigm::PointRegression),
        _ => Err(PyValueError::new_err(format!(
            "unknown paradigm '{s}' (expected 'density-map' or 'point-regression')"
        ))),
    }
}

fn parse_split(s: &str) -> PyResult<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(PyValueError::new_err(format!(
            "unknown split '{s}' (expected 'train' or 'test')"
        ))),
    }
}

// ---------------------------------------------------------------------------
// Surrogate
// ---------------------------------------------------------------------------

/// A localized crowd-counting model: a density-map or point-regression head
/// on a shared convolutional backbone.
#[pyclass(name = "Surrogate")]
struct PySurrogate {
    model: SurrogateModel,
    dataset_fingerprint: String,
    train_config: serde_json::Value,
}

#[pymethods]
impl PySurrogate {
    /// Train a surrogate on the train split stored under `data_dir`.
    #[staticmethod]
    #[pyo3(signature = (data_dir, paradigm="density-map", epochs=20, lr=3e-3, batch_size=8, seed=7, kernel_sigma=4.0))]
    fn train(
        data_dir: PathBuf,
        paradigm: &str,
        epochs: usize,
        lr: f64,
        batch_size: usize,
        seed: u64,
        kernel_sigma: f64,
    ) -> PyResult<Self> {
        let paradigm = parse_paradigm(paradigm)?;
        let dataset = load_dataset(&data_dir, Split::Train).map_err(py_err)?;
        if dataset.scenes.is_empty() {
            return Err(PyIOError::new_err(format!(
                "no train scenes under {}",
                data_dir.display()
            )));
        }
        let cfg = SurrogateTrainConfig { epochs, lr, batch_size, seed, kernel_sigma };
        let (model, _) = surrogate::train_surrogate(&dataset, paradigm, &cfg).map_err(py_err)?;
        Ok(PySurrogate {
            model,
            dataset_fingerprint: dataset_fingerprint(&dataset),
            train_config: serde_json::to_value(&cfg).expect("config serializes"),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let model = load_surrogate(&path).map_err(py_err)?;
        Ok(PySurrogate {
            model,
            dataset_fingerprint: String::new(),
            train_config: serde_json::Value::Null,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_surrogate(&path, &self.model, &self.dataset_fingerprint, self.train_config.clone())
            .map_err(py_err)
    }

    #[getter]
    fn paradigm(&self) -> &'static str {
        self.model.paradigm.as_str()
    }

    fn checksum(&self) -> String {
        self.model.checksum()
    }

    /// Predicted crowd count: density-map sum, or detections scoring above τ.
    #[pyo3(signature = (image, height, width, tau=0.5))]
    fn count(&self, image: Vec<f64>, height: usize, width: usize, tau: f64) -> PyResult<f64> {
        let hwc = image_from_flat(image, height, width)?;
        let out = self.model.forward(&hwc_to_chw(&hwc)).map_err(py_err)?;
        Ok(metrics::count_from_output(&out, tau))
    }

    /// Stride-4 density map as `(values, (grid_h, grid_w))`.
    fn density(
        &self,
        image: Vec<f64>,
        height: usize,
        width: usize,
    ) -> PyResult<(Vec<f64>, (usize, usize))> {
        let hwc = image_from_flat(image, height, width)?;
        let d = self.model.density_forward(&hwc_to_chw(&hwc)).map_err(py_err)?;
        let dim = d.dim();
        Ok((d.iter().cloned().collect(), dim))
    }

    /// Per-anchor detection scores as `(scores, (grid_h, grid_w))`.
    fn scores(
        &self,
        image: Vec<f64>,
        height: usize,
        width: usize,
    ) -> PyResult<(Vec<f64>, (usize, usize))> {
        let hwc = image_from_flat(image, height, width)?;
        let p = self.model.point_forward(&hwc_to_chw(&hwc)).map_err(py_err)?;
        Ok((p.scores.clone(), p.grid))
    }

    /// Gradient-weighted attention map ρ in [0, 1] at full image resolution.
    fn attention(&self, image: Vec<f64>, height: usize, width: usize) -> PyResult<Vec<f64>> {
        let hwc = image_from_flat(image, height, width)?;
        let rho = self
            .model
            .attention_map(&hwc_to_chw(&hwc), &LossWeights::default())
            .map_err(py_err)?;
        Ok(rho.iter().cloned().collect())
    }
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

/// The bounded perturbation generator: δ = ε·softsign(net(x)), ‖δ‖∞ ≤ ε.
#[pyclass(name = "Generator")]
struct PyGenerator {
    inner: PerturbationGenerator,
}

#[pymethods]
impl PyGenerator {
    /// Train a generator against `surrogate` on the train split under
    /// `data_dir`, writing checkpoints and the training log to `out_dir`.
    /// Returns the best-epoch generator.
    #[staticmethod]
    #[pyo3(signature = (data_dir, surrogate, out_dir, epochs=15, lr=2e-3, batch_size=8, seed=11, epsilon=DEFAULT_EPSILON))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        data_dir: PathBuf,
        surrogate: &PySurrogate,
        out_dir: PathBuf,
        epochs: usize,
        lr: f64,
        batch_size: usize,
        seed: u64,
        epsilon: f64,
    ) -> PyResult<Self> {
        let dataset = load_dataset(&data_dir, Split::Train).map_err(py_err)?;
        if dataset.scenes.is_empty() {
            return Err(PyIOError::new_err(format!(
                "no train scenes under {}",
                data_dir.display()
            )));
        }
        let cfg = TrainConfig {
            epochs,
            lr,
            batch_size,
            seed,
            epsilon,
            sign: SignConvention::Descent,
            weights: LossWeights::default(),
            eval_tau: 0.5,
        };
        let outcome =
            training::train_generator(&dataset, &surrogate.model, &cfg, &out_dir, false, None)
                .map_err(py_err)?;
        let best = load_generator(&outcome.best_path).map_err(py_err)?;
        Ok(PyGenerator { inner: best })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyGenerator { inner: load_generator(&path).map_err(py_err)? })
    }

    #[getter]
    fn epsilon(&self) -> f64 {
        self.inner.epsilon
    }

    fn checksum(&self) -> String {
        self.inner.checksum()
    }

    /// The perturbation δ for an image, flat `[H, W, 3]`.
    fn perturb(&self, image: Vec<f64>, height: usize, width: usize) -> PyResult<Vec<f64>> {
        let hwc = image_from_flat(image, height, width)?;
        let delta = self.inner.generate(&hwc_to_chw(&hwc)).map_err(py_err)?;
        Ok(flat(&chw_to_hwc(&delta)))
    }

    /// The adversarial image (clean + δ, clamped to [0, 1]), flat `[H, W, 3]`.
    fn apply(&self, image: Vec<f64>, height: usize, width: usize) -> PyResult<Vec<f64>> {
        let hwc = image_from_flat(image, height, width)?;
        let (adv, _) = self.inner.apply(&hwc_to_chw(&hwc)).map_err(py_err)?;
        Ok(flat(&chw_to_hwc(&adv)))
    }
}

// ---------------------------------------------------------------------------
// Module functions
// ---------------------------------------------------------------------------

/// One synthetic crowd scene: `(image, points)` with the image flat
/// `[H, W, 3]` and points as `(x, y)` pixel coordinates.
#[pyfunction]
#[pyo3(signature = (count, height=128, width=128, blob_sigma=3.0, seed=0))]
fn generate_scene(
    count: usize,
    height: usize,
    width: usize,
    blob_sigma: f64,
    seed: u64,
) -> PyResult<(Vec<f64>, Vec<(f64, f64)>)> {
    let scene = crowdveil_core::data::generate_scene(count, height, width, blob_sigma, seed)
        .map_err(py_err)?;
    Ok((flat(&scene.image), scene.annotation.points.clone()))
}

/// Generate and save both dataset splits under `out_dir`, mirroring the CLI
/// `gen-data` layout. Returns `(train_scenes, test_scenes)`.
#[pyfunction]
#[pyo3(signature = (out_dir, train_scenes=200, test_scenes=50, count_min=5, count_max=220, height=128, width=128, blob_sigma=3.0, seed=300))]
#[allow(clippy::too_many_arguments)]
fn generate_data(
    out_dir: PathBuf,
    train_scenes: usize,
    test_scenes: usize,
    count_min: usize,
    count_max: usize,
    height: usize,
    width: usize,
    blob_sigma: f64,
    seed: u64,
) -> PyResult<(usize, usize)> {
    for (n, split) in [(train_scenes, Split::Train), (test_scenes, Split::Test)] {
        let ds = generate_dataset(n, count_min, count_max, height, width, blob_sigma, split, seed)
            .map_err(py_err)?;
        save_dataset(&ds, &out_dir).map_err(py_err)?;
    }
    Ok((train_scenes, test_scenes))
}

/// Confidence threshold schedule τ(t) = max(τ_min, τ_max − ν·t/t_max).
#[pyfunction]
fn adaptive_threshold(t: usize, t_max: usize) -> f64 {
    losses::adaptive_threshold(t, t_max, &LossWeights::default())
}

/// Cross-model transfer ratio: cross-degradation over own-degradation.
#[pyfunction]
fn transfer_ratio(own_degradation: f64, cross_degradation: f64) -> PyResult<f64> {
    metrics::transfer_ratio(own_degradation, cross_degradation).map_err(py_err)
}

/// Structural similarity between two images on the 0–255 scale.
#[pyfunction]
fn ssim(a: Vec<f64>, b: Vec<f64>, height: usize, width: usize) -> PyResult<f64> {
    let a = image_from_flat(a, height, width)?;
    let b = image_from_flat(b, height, width)?;
    metrics::ssim(&a, &b).map_err(py_err)
}

/// PSNR in dB between the 8-bit quantized images, as `(db, capped)`.
#[pyfunction]
fn psnr(a: Vec<f64>, b: Vec<f64>, height: usize, width: usize) -> PyResult<(f64, bool)> {
    let a = image_from_flat(a, height, width)?;
    let b = image_from_flat(b, height, width)?;
    metrics::psnr(&a, &b).map_err(py_err)
}

/// Peak analysis of a density map: significant and near-threshold peaks,
/// the detection threshold, the top-k fallback flag, and the isolation ratio.
#[pyfunction]
fn detect_peaks(
    py: Python<'_>,
    density: Vec<f64>,
    height: usize,
    width: usize,
) -> PyResult<Py<PyDict>> {
    let d = map_from_flat(density, height, width)?;
    let w = LossWeights::default();
    let peaks = losses::detect_peaks(&d, &w).map_err(py_err)?;
    let ratio = losses::isolation_ratio(&peaks);
    let as_pairs =
        |v: &[losses::GridPos]| -> Vec<(usize, usize)> { v.iter().map(|p| (p.y, p.x)).collect() };
    let out = PyDict::new_bound(py);
    out.set_item("significant", as_pairs(&peaks.significant))?;
    out.set_item("near_threshold", as_pairs(&peaks.near_threshold))?;
    out.set_item("threshold", peaks.threshold)?;
    out.set_item("fallback_used", peaks.fallback_used)?;
    out.set_item("isolation_ratio", ratio)?;
    Ok(out.into())
}

/// Perceptual regularizer components for a perturbation δ under an attention
/// map ρ: energy, total variation, frequency mass, attention guidance, and
/// their weighted total.
#[pyfunction]
fn perturbation_loss(
    py: Python<'_>,
    delta: Vec<f64>,
    height: usize,
    width: usize,
    rho: Vec<f64>,
) -> PyResult<Py<PyDict>> {
    let delta = image_from_flat(delta, height, width)?;
    let rho = map_from_flat(rho, height, width)?;
    let w = LossWeights::default();
    let parts = losses::perturbation_loss(&delta, &rho, &w).map_err(py_err)?;
    let out = PyDict::new_bound(py);
    out.set_item("hinge", parts.hinge)?;
    out.set_item("tv", parts.tv)?;
    out.set_item("freq", parts.freq)?;
    out.set_item("cam", parts.cam)?;
    out.set_item("total", parts.total)?;
    Ok(out.into())
}

/// Attack a stored dataset split with `generator` and measure the damage on
/// `surrogate`. Returns the headline metrics as a dict.
#[pyfunction]
#[pyo3(signature = (generator, surrogate, data_dir, split="test", tau=0.5))]
fn evaluate(
    py: Python<'_>,
    generator: &PyGenerator,
    surrogate: &PySurrogate,
    data_dir: PathBuf,
    split: &str,
    tau: f64,
) -> PyResult<Py<PyDict>> {
    let dataset = load_dataset(&data_dir, parse_split(split)?).map_err(py_err)?;
    let rep = metrics::evaluate(&generator.inner, &surrogate.model, &dataset, tau).map_err(py_err)?;
    let out = PyDict::new_bound(py);
    out.set_item("scenes", rep.scenes)?;
    out.set_item("mae_degradation", rep.mae_degradation)?;
    out.set_item("mae_gt_clean", rep.mae_gt_clean)?;
    out.set_item("mae_gt_adv", rep.mae_gt_adv)?;
    out.set_item("miss_rate_percent", rep.miss_rate.percent)?;
    out.set_item("ssim_mean", rep.ssim_mean)?;
    out.set_item("psnr_mean_db", rep.psnr_mean_db)?;
    let regimes = PyDict::new_bound(py);
    for r in &rep.regimes {
        let row = PyDict::new_bound(py);
        row.set_item("scenes", r.scenes)?;
        row.set_item("mae_degradation", r.mae_degradation)?;
        row.set_item("mae_gt_adv", r.mae_gt_adv)?;
        row.set_item("miss_rate_percent", r.miss_rate_percent)?;
        regimes.set_item(&r.label, row)?;
    }
    out.set_item("regimes", regimes)?;
    Ok(out.into())
}

#[pymodule]
fn crowdveil_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DEFAULT_EPSILON", DEFAULT_EPSILON)?;
    m.add_class::<PySurrogate>()?;
    m.add_class::<PyGenerator>()?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(generate_data, m)?)?;
    m.add_function(wrap_pyfunction!(adaptive_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(transfer_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(detect_peaks, m)?)?;
    m.add_function(wrap_pyfunction!(perturbation_loss, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
