//! Python bindings: synthetic data, the model, training, metrics and the
//! point-selection primitives. Images are `float64` arrays shaped
//! `(3, H, W)`; masks are `uint8` arrays shaped `(H, W)`.

use numpy::{PyArray1, PyArrayDyn, PyArrayMethods, PyReadonlyArray2, PyReadonlyArrayDyn};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use latseg_core::capr;
use latseg_core::data::{self, SceneSpec};
use latseg_core::metrics;
use latseg_core::train;
use latseg_core::{Checkpoint, Components, LabelMask, RemapTable, RunConfig, Tensor};

fn err(e: latseg_core::Error) -> PyErr {
    match e {
        latseg_core::Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(format!("{}: {other}", other.kind())),
    }
}

fn to_tensor(a: &PyReadonlyArrayDyn<'_, f64>) -> PyResult<Tensor> {
    let view = a.as_array();
    Tensor::new(view.shape().to_vec(), view.iter().copied().collect()).map_err(err)
}

fn from_tensor<'py>(py: Python<'py>, t: &Tensor) -> PyResult<Bound<'py, PyArrayDyn<f64>>> {
    PyArray1::from_slice(py, t.data()).reshape(t.shape())
}

fn from_mask<'py>(py: Python<'py>, m: &LabelMask) -> PyResult<Bound<'py, PyArrayDyn<u8>>> {
    PyArray1::from_slice(py, m.labels()).reshape(vec![m.height(), m.width()])
}

fn to_mask(a: &PyReadonlyArray2<'_, u8>, classes: usize) -> PyResult<LabelMask> {
    let v = a.as_array();
    let (h, w) = v.dim();
    LabelMask::new(h, w, v.iter().copied().collect(), classes).map_err(err)
}

type SampleArrays<'py> = (Bound<'py, PyArrayDyn<f64>>, Bound<'py, PyArrayDyn<u8>>, Bound<'py, PyArrayDyn<u8>>);

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("value serializes")
}

/// Generates sample `index` of a synthetic scene spec given as JSON (any
/// omitted field takes its default). Returns `(image, gt_clean, gt_noisy)`.
#[pyfunction]
#[pyo3(signature = (index, spec_json = "{}"))]
fn generate<'py>(
    py: Python<'py>,
    index: usize,
    spec_json: &str,
) -> PyResult<SampleArrays<'py>> {
    let spec: SceneSpec = serde_json::from_str(spec_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let s = data::generate(&spec, index).map_err(err)?;
    Ok((from_tensor(py, &s.image)?, from_mask(py, &s.gt_clean)?, from_mask(py, &s.gt_noisy)?))
}

/// Metrics of one prediction as a JSON object: per-class IoU, mIoU, aAcc
/// and boundary IoU within `band` pixels.
#[pyfunction]
#[pyo3(signature = (pred, gt, classes = 6, band = 3))]
fn evaluate_masks(
    pred: PyReadonlyArray2<'_, u8>,
    gt: PyReadonlyArray2<'_, u8>,
    classes: usize,
    band: usize,
) -> PyResult<String> {
    let r = metrics::evaluate_masks(&to_mask(&pred, classes)?, &to_mask(&gt, classes)?, band).map_err(err)?;
    Ok(json(&r))
}

/// Top-2 softmax margin per pixel of `(C, H, W)` logits.
#[pyfunction]
fn margin_map<'py>(py: Python<'py>, logits: PyReadonlyArrayDyn<'_, f64>) -> PyResult<Bound<'py, PyArrayDyn<f64>>> {
    let m = capr::margin_map(&to_tensor(&logits)?).map_err(err)?;
    from_tensor(py, &m)
}

/// Raster indices of the `k` smallest margins, ties to the lower index.
#[pyfunction]
fn select_topk(margins: PyReadonlyArrayDyn<'_, f64>, k: usize) -> PyResult<Vec<usize>> {
    Ok(capr::select_topk(&to_tensor(&margins)?, k).indices)
}

/// Maps a fine-label mask to the six groups. `table` is `rugd`,
/// `rellis3d`, `identity` or the text of a remap file.
#[pyfunction]
#[pyo3(signature = (mask, table = "rugd"))]
fn remap<'py>(py: Python<'py>, mask: PyReadonlyArray2<'_, u8>, table: &str) -> PyResult<Bound<'py, PyArrayDyn<u8>>> {
    let t = match table {
        "rugd" => RemapTable::rugd(),
        "rellis3d" => RemapTable::rellis3d(),
        "identity" => RemapTable::six_class_identity(),
        text => RemapTable::parse(text).map_err(err)?,
    };
    let v = mask.as_array();
    let (h, w) = v.dim();
    let fine = LabelMask::raw(h, w, v.iter().copied().collect()).map_err(err)?;
    from_mask(py, &t.remap(&fine).map_err(err)?)
}

#[pyclass(name = "Model", module = "latseg")]
struct PyModel {
    inner: latseg_core::Model,
    config: RunConfig,
}

#[pymethods]
impl PyModel {
    /// Fresh model from a run config JSON document.
    #[new]
    #[pyo3(signature = (config_json = "{}", seed = None))]
    fn new(config_json: &str, seed: Option<u64>) -> PyResult<Self> {
        let mut config = RunConfig::from_json(config_json).map_err(err)?;
        if let Some(s) = seed {
            config.seed = s;
        }
        let inner = latseg_core::Model::new(&config.model(), config.ablation, config.seed).map_err(err)?;
        Ok(Self { inner, config })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = Checkpoint::load(std::path::Path::new(path)).map_err(err)?;
        Ok(Self {
            inner: ck.model().map_err(err)?,
            config: ck.config,
        })
    }

    /// Trains a fresh model from `config_json`; returns the model and the
    /// per-epoch log as JSON lines.
    #[staticmethod]
    fn train(config_json: &str) -> PyResult<(Self, Vec<String>)> {
        let config = RunConfig::from_json(config_json).map_err(err)?;
        let out = train::train(&config, |_| {}).map_err(err)?;
        let log = out.log.iter().map(json).collect();
        Ok((Self { inner: out.model, config }, log))
    }

    /// Returns `(labels, logits, gate_weights, mlp_evals)`.
    #[allow(clippy::type_complexity)]
    fn predict<'py>(
        &self,
        py: Python<'py>,
        image: PyReadonlyArrayDyn<'_, f64>,
    ) -> PyResult<(Bound<'py, PyArrayDyn<u8>>, Bound<'py, PyArrayDyn<f64>>, [f64; 3], usize)> {
        let p = self.inner.predict(&to_tensor(&image)?).map_err(err)?;
        Ok((from_mask(py, &p.labels)?, from_tensor(py, &p.logits)?, p.gate.w, p.mlp_evals))
    }

    /// Enables or disables components; omitted toggles keep their value.
    #[pyo3(signature = (gltr = None, rad = None, capr = None, bbl = None))]
    fn set_components(&mut self, gltr: Option<bool>, rad: Option<bool>, capr: Option<bool>, bbl: Option<bool>) {
        let c = self.inner.components();
        self.inner.set_components(Components {
            gltr: gltr.unwrap_or(c.gltr),
            rad: rad.unwrap_or(c.rad),
            capr: capr.unwrap_or(c.capr),
            bbl: bbl.unwrap_or(c.bbl),
        });
    }

    #[getter]
    fn components(&self) -> String {
        json(&self.inner.components())
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.params().numel()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    /// Aggregate metrics over synthetic samples `0..count` of a spec.
    #[pyo3(signature = (count, spec_json = "{}"))]
    fn evaluate(&self, count: usize, spec_json: &str) -> PyResult<String> {
        let spec: SceneSpec = serde_json::from_str(spec_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let samples = data::generate_set(&spec, count).map_err(err)?;
        let r = train::evaluate(&self.inner, &samples, self.config.metrics.biou_band).map_err(err)?;
        Ok(json(&r.aggregate))
    }

    /// Writes a checkpoint with fresh optimizer state.
    fn save(&self, path: &str) -> PyResult<()> {
        let opt = train::AdamW::new(&self.config.optimizer, self.inner.params());
        Checkpoint::capture(&self.config, &self.inner, &opt, 0)
            .save(std::path::Path::new(path))
            .map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(params={}, components={})",
            self.inner.params().numel(),
            json(&self.inner.components())
        )
    }
}

#[pymodule]
fn latseg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_masks, m)?)?;
    m.add_function(wrap_pyfunction!(margin_map, m)?)?;
    m.add_function(wrap_pyfunction!(select_topk, m)?)?;
    m.add_function(wrap_pyfunction!(remap, m)?)?;
    Ok(())
}
