//! Python bindings: model construction and inference, complexity reports,
//! the ablation ladder, metrics and synthetic data.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use volseg::complexity::{compare as compare_reports, ComplexityReport, Convention};
use volseg::config::{Preset, RunConfig};
use volseg::model::{ablation_ladder as ladder, analyze_at, Model as CoreModel, ModelConfig};
use volseg::tensor::Tensor;
use volseg::train;

fn err(e: volseg::Error) -> PyErr {
    match e {
        volseg::Error::Io { .. } | volseg::Error::Checkpoint(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn convention(name: &str) -> PyResult<Convention> {
    name.parse().map_err(|_| {
        PyValueError::new_err(format!(
            "unknown convention {name:?}; expected mac or flops2"
        ))
    })
}

fn preset_model(name: &str) -> PyResult<ModelConfig> {
    Ok(RunConfig::preset(Preset::parse(name).map_err(err)?).model)
}

/// Parameter and FLOP totals of one model at one input shape.
#[pyclass(frozen, name = "ComplexityReport")]
struct PyReport {
    inner: ComplexityReport,
}

#[pymethods]
impl PyReport {
    #[getter]
    fn model(&self) -> &str {
        &self.inner.model
    }

    #[getter]
    fn params(&self) -> u64 {
        self.inner.totals.params
    }

    #[getter]
    fn flops(&self) -> u64 {
        self.inner.totals.flops
    }

    #[getter]
    fn per_slice(&self) -> f64 {
        self.inner.per_slice
    }

    #[getter]
    fn input_shape(&self) -> [usize; 4] {
        self.inner.input_shape
    }

    /// `(layer, section, params, flops)` for every counted layer.
    fn rows(&self) -> Vec<(String, String, u64, u64)> {
        self.inner
            .rows
            .iter()
            .map(|r| {
                (
                    r.name.clone(),
                    r.section.as_str().to_string(),
                    r.params,
                    r.flops,
                )
            })
            .collect()
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }

    fn __repr__(&self) -> String {
        format!(
            "ComplexityReport({:?}, params={}, flops={})",
            self.inner.model,
            self.params(),
            self.flops()
        )
    }
}

/// Complexity of a preset (`transbtsv2`, `transbts-v1`, `ablation-b`, ...).
#[pyfunction]
#[pyo3(signature = (preset = "transbtsv2", convention = "mac", input_shape = None, include_aux = false))]
fn analyze(
    preset: &str,
    convention: &str,
    input_shape: Option<[usize; 4]>,
    include_aux: bool,
) -> PyResult<PyReport> {
    let cfg = preset_model(preset)?;
    let shape = input_shape.unwrap_or_else(|| cfg.input_shape());
    let inner = analyze_at(&cfg, shape, self::convention(convention)?, include_aux).map_err(err)?;
    Ok(PyReport { inner })
}

/// Percent reductions `(params, flops)` of `candidate` relative to `baseline`.
#[pyfunction]
fn compare(baseline: &PyReport, candidate: &PyReport) -> PyResult<(f64, f64)> {
    let r = compare_reports(&baseline.inner, &candidate.inner).map_err(err)?;
    Ok((r.params_pct, r.flops_pct))
}

/// `(variant, params, flops, delta_params, delta_flops)`.
type LadderRow = (String, u64, u64, i64, i64);

/// One row per ladder rung.
#[pyfunction]
#[pyo3(signature = (convention = "mac"))]
fn ablation_table(convention: &str) -> PyResult<Vec<LadderRow>> {
    let rows = ladder(self::convention(convention)?).map_err(err)?;
    Ok(rows
        .into_iter()
        .map(|r| (r.variant, r.params, r.flops, r.delta_params, r.delta_flops))
        .collect())
}

/// A network with f64 parameters.
#[pyclass(name = "Model")]
struct PyModel {
    inner: CoreModel<f64>,
}

#[pymethods]
impl PyModel {
    /// Builds a preset model; `seed` fixes the initial weights.
    #[new]
    #[pyo3(signature = (preset = "micro", seed = 0))]
    fn new(preset: &str, seed: u64) -> PyResult<Self> {
        let cfg = preset_model(preset)?;
        Ok(Self {
            inner: CoreModel::build(&cfg, seed).map_err(err)?,
        })
    }

    /// Builds from a TOML run config (only the model table is used).
    #[staticmethod]
    #[pyo3(signature = (text, seed = 0))]
    fn from_toml(text: &str, seed: u64) -> PyResult<Self> {
        let cfg = RunConfig::from_toml(text).map_err(err)?;
        Ok(Self {
            inner: CoreModel::build(&cfg.model, seed).map_err(err)?,
        })
    }

    #[getter]
    fn num_params(&self) -> u64 {
        self.inner.num_params()
    }

    #[getter]
    fn input_shape(&self) -> [usize; 4] {
        self.inner.config.input_shape()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.config.num_classes
    }

    /// Logits for a flat C·H·W·D input, returned flat as K·H·W·D.
    fn predict(&self, py: Python<'_>, image: Vec<f64>) -> PyResult<Vec<f64>> {
        let x = Tensor::new(self.inner.config.input_shape().to_vec(), image).map_err(err)?;
        let y = py.detach(|| self.inner.predict(&x)).map_err(err)?;
        Ok(y.data().to_vec())
    }

    /// Arg-max labels of [`predict`].
    fn segment(&self, py: Python<'_>, image: Vec<f64>) -> PyResult<Vec<u8>> {
        let logits = self.predict(py, image)?;
        Ok(train::argmax_labels(&logits, self.inner.config.num_classes))
    }

    fn save(&self, stem: &str) -> PyResult<String> {
        volseg::model::save_checkpoint(&self.inner.params, &self.inner.config.name, stem.as_ref())
            .map_err(err)
    }

    fn load(&mut self, stem: &str) -> PyResult<()> {
        volseg::model::load_checkpoint(&mut self.inner.params, stem.as_ref()).map_err(err)?;
        Ok(())
    }
}

/// `n` synthetic samples as `(flat image, flat label)` pairs.
#[pyfunction]
#[pyo3(signature = (n, size, num_classes = 4, seed = 0))]
fn synthetic_dataset(
    n: usize,
    size: [usize; 3],
    num_classes: usize,
    seed: u64,
) -> PyResult<Vec<(Vec<f64>, Vec<u8>)>> {
    let data = train::gen_synthetic_dataset(n, size, num_classes, seed).map_err(err)?;
    Ok(data
        .into_iter()
        .map(|s| (s.image.data().to_vec(), s.label))
        .collect())
}

fn same_len(a: &[u8], b: &[u8]) -> PyResult<()> {
    if a.len() != b.len() {
        return Err(PyValueError::new_err(format!(
            "label volumes differ in size ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

#[pyfunction]
fn dice_score(pred: Vec<u8>, truth: Vec<u8>, class_id: u8) -> PyResult<f64> {
    same_len(&pred, &truth)?;
    Ok(train::dice_score(&pred, &truth, class_id))
}

/// `None` when exactly one mask is empty; 0.0 when both are.
#[pyfunction]
fn hd95(pred: Vec<u8>, truth: Vec<u8>, dims: [usize; 3], class_id: u8) -> PyResult<Option<f64>> {
    same_len(&pred, &truth)?;
    if dims.iter().product::<usize>() != pred.len() {
        return Err(PyValueError::new_err(format!(
            "dims {dims:?} do not match {} voxels",
            pred.len()
        )));
    }
    Ok(train::hd95(&pred, &truth, dims, class_id))
}

/// TOML text of a preset run config.
#[pyfunction]
fn init_config(preset: &str) -> PyResult<String> {
    Ok(RunConfig::preset(Preset::parse(preset).map_err(err)?).to_toml())
}

#[pymodule]
fn volseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyReport>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(ablation_table, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(dice_score, m)?)?;
    m.add_function(wrap_pyfunction!(hd95, m)?)?;
    m.add_function(wrap_pyfunction!(init_config, m)?)?;
    Ok(())
}
