//! Python bindings: dense tensors, Tucker decomposition, SRNetC64 model
//! construction and evaluation, the cost formulas, and the distortion
//! search, exposed as the `stdnet_py` extension module.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use stdnet::convnet::{
    build_srnetc64_variant, forward_to_layer, FeatureBatch, ModelSpec, Node, SrnetVariant,
};
use stdnet::search::{self, Margin, SearchConfig, StopRule, ThresholdPolicy};
use stdnet::tensor::DenseTensor;
use stdnet::tucker;

fn err(e: stdnet::Error) -> PyErr {
    match &e {
        stdnet::Error::Numerical(_) | stdnet::Error::DegenerateInput(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Dense N-way tensor (row-major).
#[pyclass(name = "Tensor", skip_from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: DenseTensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: DenseTensor::new(shape, data).map_err(err)?,
        })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn frobenius_norm(&self) -> f64 {
        self.inner.frobenius_norm()
    }

    /// Mode-n unfolding (1-based mode) as (rows, cols, data).
    fn unfold(&self, mode: usize) -> PyResult<(usize, usize, Vec<f64>)> {
        let m = self.inner.unfold(mode).map_err(err)?;
        Ok((m.rows(), m.cols(), m.data().to_vec()))
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Core tensor plus channel-mode factors of a decomposed kernel.
#[pyclass(name = "TuckerFactors", skip_from_py_object)]
#[derive(Clone)]
struct PyTuckerFactors {
    inner: tucker::TuckerFactors,
}

#[pymethods]
impl PyTuckerFactors {
    #[getter]
    fn rank_in(&self) -> usize {
        self.inner.rank_in()
    }

    #[getter]
    fn rank_out(&self) -> usize {
        self.inner.rank_out()
    }

    #[getter]
    fn core(&self) -> PyTensor {
        PyTensor {
            inner: self.inner.core.clone(),
        }
    }

    fn reconstruct(&self) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: tucker::reconstruct(&self.inner).map_err(err)?,
        })
    }

    fn reconstruction_error(&self, kernel: &PyTensor) -> PyResult<f64> {
        tucker::reconstruction_error(&kernel.inner, &self.inner).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "TuckerFactors(rank_in={}, rank_out={})",
            self.inner.rank_in(),
            self.inner.rank_out()
        )
    }
}

/// HOSVD-initialized, HOOI-refined two-mode Tucker decomposition of a
/// J_in x J_out x D x D kernel tensor.
#[pyfunction]
#[pyo3(signature = (kernel, rank_in, rank_out, refine_iters = 3, tol = 1e-6))]
fn tucker_decompose(
    kernel: &PyTensor,
    rank_in: usize,
    rank_out: usize,
    refine_iters: usize,
    tol: f64,
) -> PyResult<PyTuckerFactors> {
    Ok(PyTuckerFactors {
        inner: tucker::tucker_decompose(&kernel.inner, rank_in, rank_out, refine_iters, tol)
            .map_err(err)?,
    })
}

/// Ordered layer graph with bound weights.
#[pyclass(name = "Model", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: ModelSpec,
}

#[pymethods]
impl PyModel {
    /// SRNetC64 with seeded weights; variant is "original", "cylinder",
    /// or "ladder".
    #[staticmethod]
    #[pyo3(signature = (seed = 0, variant = "original"))]
    fn srnetc64(seed: u64, variant: &str) -> PyResult<Self> {
        let variant = match variant {
            "original" => SrnetVariant::Original,
            "cylinder" => SrnetVariant::Cylinder,
            "ladder" => SrnetVariant::Ladder,
            other => {
                return Err(PyValueError::new_err(format!(
                    "variant must be original|cylinder|ladder, got '{other}'"
                )))
            }
        };
        Ok(Self {
            inner: build_srnetc64_variant(seed, variant).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: stdnet::io::load_model(std::path::Path::new(path)).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        stdnet::io::save_model(&self.inner, std::path::Path::new(path)).map_err(err)
    }

    fn node_names(&self) -> Vec<String> {
        self.inner
            .nodes
            .iter()
            .map(|n| n.name().to_string())
            .collect()
    }

    fn decomposable_layers(&self) -> Vec<String> {
        self.inner.decomposable_layers()
    }

    /// Kernel tensor of a conv layer.
    fn kernel(&self, layer: &str) -> PyResult<PyTensor> {
        match self.inner.node(layer).map_err(err)? {
            Node::Conv(c) => Ok(PyTensor {
                inner: c.kernel.clone(),
            }),
            _ => Err(PyValueError::new_err(format!(
                "'{layer}' is not a plain conv layer"
            ))),
        }
    }

    /// New model with the layer replaced by its rank-(I, O) group.
    fn replace_layer(&self, layer: &str, rank_in: usize, rank_out: usize) -> PyResult<Self> {
        let kernel = match self.inner.node(layer).map_err(err)? {
            Node::Conv(c) => c.kernel.clone(),
            _ => {
                return Err(PyValueError::new_err(format!(
                    "'{layer}' is not a plain conv layer"
                )))
            }
        };
        let factors = tucker::tucker_decompose_default(&kernel, rank_in, rank_out).map_err(err)?;
        Ok(Self {
            inner: self.inner.replace_layer(layer, factors).map_err(err)?,
        })
    }

    /// Batch-normalized output of the named layer for a B x C x H x W batch.
    fn forward_to_layer(&self, batch: &PyTensor, layer: &str) -> PyResult<PyTensor> {
        let fb = FeatureBatch::new(batch.inner.clone()).map_err(err)?;
        Ok(PyTensor {
            inner: forward_to_layer(&self.inner, &fb, layer)
                .map_err(err)?
                .into_tensor(),
        })
    }

    /// Per-layer and total parameter/FLOP counts; percentages against the
    /// baseline when one is given.
    #[pyo3(signature = (baseline = None))]
    fn cost_report(&self, py: Python<'_>, baseline: Option<&PyModel>) -> PyResult<Py<PyAny>> {
        let report =
            stdnet::cost::cost_report(&self.inner, baseline.map(|b| &b.inner)).map_err(err)?;
        let dict = pyo3::types::PyDict::new(py);
        let layers = pyo3::types::PyList::empty(py);
        for l in &report.layers {
            let row = pyo3::types::PyDict::new(py);
            row.set_item("name", &l.name)?;
            row.set_item("params_original", l.params_original)?;
            row.set_item("params_decomposed", l.params_decomposed)?;
            row.set_item("flops_original", l.flops_original)?;
            row.set_item("flops_decomposed", l.flops_decomposed)?;
            row.set_item("out_h", l.out_h)?;
            row.set_item("out_w", l.out_w)?;
            layers.append(row)?;
        }
        dict.set_item("layers", layers)?;
        dict.set_item("total_params_original", report.total_params_original)?;
        dict.set_item("total_params_decomposed", report.total_params_decomposed)?;
        dict.set_item("total_flops_original", report.total_flops_original)?;
        dict.set_item("total_flops_decomposed", report.total_flops_decomposed)?;
        if let Some(p) = report.params_percent() {
            dict.set_item("params_percent", p)?;
        }
        if let Some(f) = report.flops_percent() {
            dict.set_item("flops_percent", f)?;
        }
        Ok(dict.into_any().unbind())
    }

    fn __repr__(&self) -> String {
        format!("Model(nodes={})", self.inner.nodes.len())
    }
}

/// Normalized distortion of replacing `layer` with its rank-(I, O)
/// decomposition, measured on batch-normalized outputs.
#[pyfunction]
fn cal_norm_distortion(
    model: &PyModel,
    layer: &str,
    batch: &PyTensor,
    rank_in: usize,
    rank_out: usize,
) -> PyResult<f64> {
    let fb = FeatureBatch::new(batch.inner.clone()).map_err(err)?;
    search::cal_norm_distortion(&model.inner, layer, &fb, rank_in, rank_out).map_err(err)
}

fn config_from_kwargs(
    epsilon: f64,
    tau: f64,
    start_bottom: f64,
    start_middle: f64,
    margin_rel: f64,
    step_back: bool,
    thresholds: Option<BTreeMap<String, f64>>,
) -> SearchConfig {
    let mut start_gamma = BTreeMap::new();
    start_gamma.insert("bottom".to_string(), start_bottom);
    start_gamma.insert("middle".to_string(), start_middle);
    SearchConfig {
        epsilon,
        tau,
        start_gamma,
        start_default: start_bottom,
        margin: Margin::Relative(margin_rel),
        threshold_policy: match thresholds {
            Some(map) => ThresholdPolicy::Manual(map),
            None => ThresholdPolicy::Knee,
        },
        stop_rule: if step_back {
            StopRule::LastNotExceeding
        } else {
            StopRule::FirstExceeding
        },
        repeats: 1,
    }
}

/// Shrinking-rate sweep for one layer: list of (rate, distortion) pairs.
#[pyfunction]
#[pyo3(signature = (model, layer, batch, epsilon = 0.05, tau = 0.20,
                    start_bottom = 0.50, start_middle = 0.30))]
#[allow(clippy::too_many_arguments)]
fn traverse_distortion(
    model: &PyModel,
    layer: &str,
    batch: &PyTensor,
    epsilon: f64,
    tau: f64,
    start_bottom: f64,
    start_middle: f64,
) -> PyResult<Vec<(f64, f64)>> {
    let fb = FeatureBatch::new(batch.inner.clone()).map_err(err)?;
    let cfg = config_from_kwargs(epsilon, tau, start_bottom, start_middle, 0.05, false, None);
    let curve = search::traverse_distortion(&model.inner, layer, &fb, &cfg).map_err(err)?;
    Ok(curve.samples)
}

/// Whole-model search. `thresholds` maps layer names to manual values;
/// omit it to use the knee policy. Returns per-layer decisions plus the
/// two assembled variants.
#[pyfunction]
#[pyo3(signature = (model, batch, thresholds = None, epsilon = 0.05, tau = 0.20,
                    start_bottom = 0.50, start_middle = 0.30, margin_rel = 0.05,
                    step_back = false))]
#[allow(clippy::too_many_arguments)]
fn search_architecture(
    py: Python<'_>,
    model: &PyModel,
    batch: &PyTensor,
    thresholds: Option<BTreeMap<String, f64>>,
    epsilon: f64,
    tau: f64,
    start_bottom: f64,
    start_middle: f64,
    margin_rel: f64,
    step_back: bool,
) -> PyResult<Py<PyAny>> {
    let fb = FeatureBatch::new(batch.inner.clone()).map_err(err)?;
    let cfg = config_from_kwargs(
        epsilon,
        tau,
        start_bottom,
        start_middle,
        margin_rel,
        step_back,
        thresholds,
    );
    let result = search::search_architecture(&model.inner, &fb, &cfg).map_err(err)?;

    let dict = pyo3::types::PyDict::new(py);
    let decisions = pyo3::types::PyList::empty(py);
    for d in &result.decisions {
        let row = pyo3::types::PyDict::new(py);
        row.set_item("layer", &d.layer)?;
        row.set_item("threshold", d.threshold)?;
        row.set_item("cylinder", d.cylinder)?;
        row.set_item("ladder", d.ladder)?;
        row.set_item(
            "shape",
            match d.shape {
                search::ShapeKind::Cylinder => "cylinder",
                search::ShapeKind::InheritedLadder => "inherited-ladder",
            },
        )?;
        row.set_item("clamped", d.clamped)?;
        decisions.append(row)?;
    }
    dict.set_item("decisions", decisions)?;
    dict.set_item(
        "cylinder_model",
        PyModel {
            inner: result.cylinder_model,
        }
        .into_pyobject(py)?,
    )?;
    dict.set_item(
        "ladder_model",
        PyModel {
            inner: result.ladder_model,
        }
        .into_pyobject(py)?,
    )?;
    Ok(dict.into_any().unbind())
}

#[pyfunction]
fn layer_params(j_in: u64, j_out: u64, d: u64) -> u64 {
    stdnet::cost::layer_params(j_in, j_out, d)
}

#[pyfunction]
fn decomposed_params(j_in: u64, j_out: u64, d: u64, rank_in: u64, rank_out: u64) -> PyResult<u64> {
    stdnet::cost::decomposed_params(j_in, j_out, d, rank_in, rank_out).map_err(err)
}

#[pyfunction]
fn layer_flops(params: u64, h_out: u64, w_out: u64) -> u64 {
    stdnet::cost::layer_flops(params, h_out, w_out)
}

#[pyfunction]
fn shrink_threshold(n: u64) -> f64 {
    stdnet::cost::shrink_threshold(n)
}

#[pyfunction]
fn reduction_fraction(n: u64, gamma: f64) -> f64 {
    stdnet::cost::reduction_fraction(n, gamma)
}

#[pyfunction]
fn step3_fraction(n: u64, gamma: f64) -> PyResult<f64> {
    stdnet::cost::step3_fraction(n, gamma).map_err(err)
}

#[pyfunction]
fn ladder_vs_cylinder_ratio(j: u64, n: u64, rank_in: u64, rank_out: u64) -> PyResult<f64> {
    stdnet::cost::ladder_vs_cylinder_ratio(j, n, rank_in, rank_out).map_err(err)
}

#[pyfunction]
fn ds_shrink_threshold(n: u64, x: u64) -> f64 {
    stdnet::cost::ds_shrink_threshold(n, x)
}

#[pymodule]
fn stdnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyTuckerFactors>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(tucker_decompose, m)?)?;
    m.add_function(wrap_pyfunction!(cal_norm_distortion, m)?)?;
    m.add_function(wrap_pyfunction!(traverse_distortion, m)?)?;
    m.add_function(wrap_pyfunction!(search_architecture, m)?)?;
    m.add_function(wrap_pyfunction!(layer_params, m)?)?;
    m.add_function(wrap_pyfunction!(decomposed_params, m)?)?;
    m.add_function(wrap_pyfunction!(layer_flops, m)?)?;
    m.add_function(wrap_pyfunction!(shrink_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(reduction_fraction, m)?)?;
    m.add_function(wrap_pyfunction!(step3_fraction, m)?)?;
    m.add_function(wrap_pyfunction!(ladder_vs_cylinder_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(ds_shrink_threshold, m)?)?;
    Ok(())
}
