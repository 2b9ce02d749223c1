//! Python bindings: phantoms, augmentation, the model, metrics and the CLI.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use reachnet::augment::{compose_pipeline, AugmentConfig};
use reachnet::metrics::{self, EvalOptions, RoiSpec, Segmenter};
use reachnet::model::{Model as RsModel, ModelConfig};
use reachnet::phantom::{self, PhantomConfig, Sample as RsSample};
use reachnet::training::{self, stream, TrainConfig};

fn err(e: reachnet::Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn json<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_json<T: serde::de::DeserializeOwned + Default>(text: Option<&str>) -> PyResult<T> {
    match text {
        None => Ok(T::default()),
        Some(t) => serde_json::from_str(t).map_err(|e| PyValueError::new_err(e.to_string())),
    }
}

/// One B-scan with region / vessel masks and fovea label. Planes are flat row-major lists.
#[pyclass(module = "reachnet", from_py_object)]
#[derive(Clone)]
struct Sample {
    inner: RsSample,
}

#[pymethods]
impl Sample {
    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn image(&self) -> Vec<f32> {
        self.inner.image.clone()
    }

    #[getter]
    fn region(&self) -> Vec<u8> {
        self.inner.region.clone()
    }

    #[getter]
    fn vessel(&self) -> Vec<u8> {
        self.inner.vessel.clone()
    }

    #[getter]
    fn heatmap(&self) -> Vec<f32> {
        self.inner.heatmap().to_vec()
    }

    /// `(col, row)` or None.
    #[getter]
    fn fovea(&self) -> Option<(usize, usize)> {
        self.inner.fovea().map(|f| (f.col, f.row))
    }

    #[getter]
    fn pixel_scale_um(&self) -> (f64, f64) {
        self.inner.pixel_scale_um
    }

    fn write(&self, dir: PathBuf, id: &str) -> PyResult<()> {
        phantom::write_sample(&self.inner, &dir, id).map_err(err)
    }

    #[staticmethod]
    fn read(dir: PathBuf, id: &str) -> PyResult<Self> {
        phantom::read_sample(&dir, id).map(|inner| Sample { inner }).map_err(err)
    }

    fn __repr__(&self) -> String {
        let fovea = match self.fovea() {
            Some((c, r)) => format!("({c}, {r})"),
            None => "None".to_string(),
        };
        format!("Sample({}x{}, fovea={fovea})", self.inner.height, self.inner.width)
    }
}

/// Phantom for `seed`; `config_json` overrides PhantomConfig fields.
#[pyfunction]
#[pyo3(signature = (seed, height=None, width=None, config_json=None))]
fn generate_phantom(seed: u64, height: Option<usize>, width: Option<usize>, config_json: Option<&str>) -> PyResult<Sample> {
    let mut cfg: PhantomConfig = from_json(config_json)?;
    cfg.height = height.unwrap_or(cfg.height);
    cfg.width = width.unwrap_or(cfg.width);
    phantom::generate_phantom(&cfg, seed).map(|inner| Sample { inner }).map_err(err)
}

/// Full augmentation pipeline with a seeded generator.
#[pyfunction]
#[pyo3(signature = (sample, seed, domain_specific=true))]
fn augment(sample: &Sample, seed: u64, domain_specific: bool) -> PyResult<Sample> {
    let cfg = AugmentConfig { domain_specific, ..Default::default() };
    let mut rng = stream(seed, 0, 0, 0);
    compose_pipeline(&sample.inner, &cfg, &mut rng).map(|inner| Sample { inner }).map_err(err)
}

#[pyclass(module = "reachnet")]
struct Model {
    inner: RsModel<f32>,
}

#[pymethods]
impl Model {
    /// New model; `config_json` overrides ModelConfig fields.
    #[new]
    #[pyo3(signature = (seed=0, config_json=None))]
    fn new(seed: u64, config_json: Option<&str>) -> PyResult<Self> {
        let cfg: ModelConfig = from_json(config_json)?;
        RsModel::build(&cfg, seed).map(|inner| Model { inner }).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        RsModel::load(&path).map(|inner| Model { inner }).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json(py, self.inner.config())
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.param_names().to_vec()
    }

    /// Logits `[3 * H * W]` (region, vessel, fovea) for a sample.
    fn logits(&self, sample: &Sample) -> PyResult<Vec<f32>> {
        self.inner.logits(&sample.inner).map_err(err)
    }

    /// Binary region / vessel / fovea masks and the located fovea.
    fn segment<'py>(&self, py: Python<'py>, sample: &Sample) -> PyResult<Bound<'py, PyDict>> {
        let n = sample.inner.height * sample.inner.width;
        let z = self.inner.logits(&sample.inner).map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("region", metrics::binarize(&z[..n], 0.5))?;
        out.set_item("vessel", metrics::binarize(&z[n..2 * n], 0.5))?;
        out.set_item("fovea_mask", metrics::binarize(&z[2 * n..], 0.5))?;
        let prob: Vec<f64> = z[2 * n..].iter().map(|&v| 1.0 / (1.0 + (-v as f64).exp())).collect();
        out.set_item("fovea", metrics::fovea_locate(&prob, sample.inner.width).map(|f| (f.col, f.row)))?;
        Ok(out)
    }
}

#[pyfunction]
fn dice(pred: Vec<u8>, gt: Vec<u8>) -> PyResult<f64> {
    metrics::dice(&pred, &gt).map_err(err)
}

#[pyfunction]
fn pearson(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<Option<f64>> {
    metrics::pearson(&xs, &ys).map_err(err)
}

#[pyfunction]
fn mae(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<f64> {
    metrics::mae(&xs, &ys).map_err(err)
}

/// `(area_mm2, thickness_um, cvi)` in the fovea-centred window, or None without a fovea.
#[pyfunction]
#[pyo3(signature = (sample, roi_width_um=3000.0))]
fn region_metrics(sample: &Sample, roi_width_um: f64) -> PyResult<Option<(f64, f64, Option<f64>)>> {
    let s = &sample.inner;
    let m = metrics::region_metrics(
        &s.region,
        &s.vessel,
        s.height,
        s.width,
        s.fovea(),
        s.pixel_scale_um,
        &RoiSpec { roi_width_um },
    )
    .map_err(err)?;
    Ok(m.map(|m| (m.area_mm2, m.thickness_um, m.cvi)))
}

/// Scheduled learning rate (before the 1/8 scale) at epoch progress `t`.
#[pyfunction]
fn lr_at(t: f64) -> PyResult<f64> {
    training::lr_at(&TrainConfig::default(), t).map_err(err)
}

/// Evaluates a model on every sample in `data_dir`; returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (model, data_dir, roi_width_um=3000.0))]
fn evaluate<'py>(py: Python<'py>, model: &Model, data_dir: PathBuf, roi_width_um: f64) -> PyResult<Bound<'py, PyAny>> {
    let data = phantom::load_dataset(&data_dir).map_err(err)?;
    let opts = EvalOptions { roi: RoiSpec { roi_width_um }, ..Default::default() };
    let report = metrics::evaluate(&model.inner, &data, &opts).map_err(err)?;
    json(py, &report)
}

#[pyfunction]
#[pyo3(signature = (model, resolution=768, repeats=3, batch_size=1))]
#[pyo3(name = "bench")]
fn bench_throughput<'py>(py: Python<'py>, model: &Model, resolution: usize, repeats: usize, batch_size: usize) -> PyResult<Bound<'py, PyAny>> {
    let r = metrics::bench_throughput(&model.inner, resolution, batch_size, repeats, 0).map_err(err)?;
    json(py, &r)
}

/// Runs the command-line interface with `args` (without the program name); returns the exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    reachnet::cli::run(std::iter::once("reachnet".to_string()).chain(args))
}

#[pymodule]
#[pyo3(name = "reachnet")]
fn reachnet_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Sample>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(augment, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(mae, m)?)?;
    m.add_function(wrap_pyfunction!(region_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(bench_throughput, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
