//! Python bindings: scans, datasets, the encoder, classifiers and the CLI.

use std::path::PathBuf;

use ndarray::{Array1, Array2, Array4, Axis};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use neurofatigue as nf;
use nf::config::{parse_config, RunConfig};
use nf::encoder::{stack_batch, EncoderParams, Mode};
use nf::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Training(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse(text: Option<&str>, overrides: Option<Vec<String>>) -> PyResult<RunConfig> {
    parse_config(text.unwrap_or(""), &overrides.unwrap_or_default()).map_err(to_py)
}

/// A 4D scan indexed (t, z, y, x).
#[pyclass(name = "VolumeSeries", module = "neurofatigue_py", skip_from_py_object)]
#[derive(Clone)]
struct PyVolumeSeries {
    inner: nf::data::VolumeSeries,
}

#[pymethods]
impl PyVolumeSeries {
    /// Builds a scan from row-major values and a (t, z, y, x) shape.
    #[new]
    #[pyo3(signature = (values, shape, voxel_dims_mm = (1.0, 1.0, 1.0), tr_seconds = 2.0))]
    fn new(
        values: Vec<f32>,
        shape: (usize, usize, usize, usize),
        voxel_dims_mm: (f64, f64, f64),
        tr_seconds: f64,
    ) -> PyResult<Self> {
        let data = Array4::from_shape_vec(shape, values).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let dims = [voxel_dims_mm.0, voxel_dims_mm.1, voxel_dims_mm.2];
        let inner = nf::data::VolumeSeries::new(data, dims, tr_seconds).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize) {
        let [t, z, y, x] = self.inner.shape();
        (t, z, y, x)
    }

    #[getter]
    fn tr_seconds(&self) -> f64 {
        self.inner.tr_seconds()
    }

    #[getter]
    fn voxel_dims_mm(&self) -> (f64, f64, f64) {
        let [a, b, c] = self.inner.voxel_dims_mm();
        (a, b, c)
    }

    /// Row-major values.
    fn values(&self) -> Vec<f32> {
        self.inner.data().iter().copied().collect()
    }

    fn __repr__(&self) -> String {
        format!("VolumeSeries(shape={:?}, tr_seconds={})", self.inner.shape(), self.inner.tr_seconds())
    }
}

/// A list of scan records with a content checksum.
#[pyclass(name = "DatasetIndex", module = "neurofatigue_py", skip_from_py_object)]
#[derive(Clone)]
struct PyDatasetIndex {
    inner: nf::data::DatasetIndex,
}

#[pymethods]
impl PyDatasetIndex {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: nf::data::DatasetIndex::load(path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    #[getter]
    fn checksum(&self) -> String {
        self.inner.checksum().to_string()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Records as dictionaries; absent fields are `None`.
    fn records<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner
            .records()
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("path", r.path.to_string_lossy().into_owned())?;
                d.set_item("subject_id", &r.subject_id)?;
                d.set_item("group", r.group.map(|g| g.to_string()))?;
                d.set_item("task", r.task.map(|t| t.to_string()))?;
                d.set_item("session_index", r.session_index)?;
                d.set_item("sr_score", r.sr_score())?;
                d.set_item("label", r.label().map(|l| l.index()))?;
                Ok(d)
            })
            .collect()
    }

    /// Sub-index of the given record positions.
    fn subset(&self, ids: Vec<usize>) -> PyResult<Self> {
        Ok(Self { inner: self.inner.subset(&ids).map_err(to_py)? })
    }
}

/// CNN + LSTM + attention encoder.
#[pyclass(name = "Encoder", module = "neurofatigue_py", skip_from_py_object)]
#[derive(Clone)]
struct PyEncoder {
    inner: EncoderParams<f32>,
}

fn batch_of(scans: &[PyRef<'_, PyVolumeSeries>]) -> PyResult<ndarray::Array5<f32>> {
    let refs: Vec<&nf::data::VolumeSeries> = scans.iter().map(|s| &s.inner).collect();
    stack_batch(&refs).map_err(to_py)
}

fn rows(a: Array2<f32>) -> Vec<Vec<f32>> {
    a.axis_iter(Axis(0)).map(|r| r.to_vec()).collect()
}

#[pymethods]
impl PyEncoder {
    /// Fresh encoder from the `[encoder]` section of a TOML config.
    #[new]
    #[pyo3(signature = (config = None, seed = 0, overrides = None))]
    fn new(config: Option<&str>, seed: u64, overrides: Option<Vec<String>>) -> PyResult<Self> {
        let cfg = parse(config, overrides)?;
        let inner = nf::encoder::init_encoder(&cfg.encoder, seed).map_err(to_py)?.with_mode(Mode::Eval);
        Ok(Self { inner })
    }

    /// Encoder weights from any checkpoint directory.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = nf::checkpoint::load_encoder(&path).map_err(to_py)?.with_mode(Mode::Eval);
        Ok(Self { inner })
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Tensor names and shapes.
    fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.inner.tensors.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect()
    }

    /// Unit-norm embeddings, one row per scan.
    fn encode(&self, scans: Vec<PyRef<'_, PyVolumeSeries>>) -> PyResult<Vec<Vec<f32>>> {
        let x = batch_of(&scans)?;
        Ok(rows(nf::encoder::encode(&self.inner, x.view()).map_err(to_py)?))
    }

    fn pooled_features(&self, scans: Vec<PyRef<'_, PyVolumeSeries>>) -> PyResult<Vec<Vec<f32>>> {
        let x = batch_of(&scans)?;
        Ok(rows(nf::encoder::pooled_features(&self.inner, x.view()).map_err(to_py)?))
    }

    fn attention_weights(&self, scans: Vec<PyRef<'_, PyVolumeSeries>>) -> PyResult<Vec<Vec<f32>>> {
        let x = batch_of(&scans)?;
        Ok(rows(nf::encoder::attention_weights(&self.inner, x.view()).map_err(to_py)?))
    }
}

/// Encoder plus linear head over six fatigue classes.
#[pyclass(name = "Classifier", module = "neurofatigue_py", skip_from_py_object)]
#[derive(Clone)]
struct PyClassifier {
    inner: nf::finetune::ClassifierModel,
}

#[pymethods]
impl PyClassifier {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: nf::finetune::ClassifierModel::load(&path).map_err(to_py)? })
    }

    #[getter]
    fn crop_len(&self) -> usize {
        self.inner.crop_len
    }

    /// `(class, probabilities)` for one scan.
    fn predict(&self, scan: PyRef<'_, PyVolumeSeries>) -> PyResult<(usize, Vec<f64>)> {
        let (c, p) = nf::finetune::predict(&self.inner, &scan.inner).map_err(to_py)?;
        Ok((c.index(), p.to_vec()))
    }

    /// Metrics over the labeled records of `index`.
    fn evaluate<'py>(&self, py: Python<'py>, index: PyRef<'_, PyDatasetIndex>) -> PyResult<Bound<'py, PyDict>> {
        let m = nf::finetune::evaluate(&self.inner, index.inner.records()).map_err(to_py)?;
        metrics_dict(py, &m)
    }
}

fn metrics_dict<'py>(py: Python<'py>, m: &nf::finetune::Metrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("overall_acc", m.overall_acc)?;
    d.set_item("hc_acc", m.hc_acc)?;
    d.set_item("tbi_acc", m.tbi_acc)?;
    d.set_item("n", m.n)?;
    d.set_item("confusion", m.confusion.iter().map(|r| r.to_vec()).collect::<Vec<_>>())?;
    Ok(d)
}

#[pyfunction]
fn load_nifti(path: PathBuf) -> PyResult<PyVolumeSeries> {
    Ok(PyVolumeSeries { inner: nf::data::load_nifti(path).map_err(to_py)? })
}

#[pyfunction]
fn save_nifti(scan: PyRef<'_, PyVolumeSeries>, path: PathBuf) -> PyResult<()> {
    nf::data::save_nifti(&scan.inner, path).map_err(to_py)
}

/// Fatigue class 0..5 of a score in [0, 100].
#[pyfunction]
fn score_to_class(score: f64) -> PyResult<usize> {
    Ok(nf::data::score_to_class(score).map_err(to_py)?.index())
}

#[pyfunction]
fn cosine_sim(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    nf::moco::cosine_sim(&a, &b).map_err(to_py)
}

/// Contrastive loss of `q` against `k_pos` and the rows of `queue`.
#[pyfunction]
fn info_nce(q: Vec<f64>, k_pos: Vec<f64>, queue: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    let d = q.len();
    let flat: Vec<f64> = queue.iter().flatten().copied().collect();
    if queue.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("queue rows must match the query length"));
    }
    let queue = Array2::from_shape_vec((queue.len(), d), flat).expect("lengths checked");
    nf::moco::info_nce(Array1::from(q).view(), Array1::from(k_pos).view(), queue.view(), tau).map_err(to_py)
}

/// Pretraining learning rate at a zero-based epoch.
#[pyfunction]
#[pyo3(signature = (epoch, config = None, overrides = None))]
fn lr_at(epoch: u64, config: Option<&str>, overrides: Option<Vec<String>>) -> PyResult<f64> {
    Ok(nf::moco::lr_at(epoch, &parse(config, overrides)?.pretrain))
}

/// Writes a synthetic dataset using the `[synth]` section.
#[pyfunction]
#[pyo3(signature = (out_dir, config = None, overrides = None))]
fn generate_dataset(out_dir: PathBuf, config: Option<&str>, overrides: Option<Vec<String>>) -> PyResult<PyDatasetIndex> {
    let cfg = parse(config, overrides)?;
    Ok(PyDatasetIndex { inner: nf::synth::generate_dataset(&cfg.synth, &out_dir).map_err(to_py)? })
}

#[pyfunction]
#[pyo3(signature = (index, seed = 0))]
fn baseline_oracle(index: PyRef<'_, PyDatasetIndex>, seed: u64) -> PyResult<f64> {
    nf::synth::baseline_oracle(&index.inner, seed).map_err(to_py)
}

/// `(train, val, test)` record positions.
#[pyfunction]
#[pyo3(signature = (index, ratios = (0.7, 0.15, 0.15), seed = 0))]
fn make_splits(
    index: PyRef<'_, PyDatasetIndex>,
    ratios: (f64, f64, f64),
    seed: u64,
) -> PyResult<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let s = nf::data::make_splits(&index.inner, ratios, seed).map_err(to_py)?;
    Ok((s.train, s.val, s.test))
}

/// Runs the command line with `argv` (without the program name); returns the exit code.
#[pyfunction]
fn run_cli(argv: Vec<String>) -> i32 {
    nf::cli::run(std::iter::once("neurofatigue".to_string()).chain(argv))
}

#[pymodule]
fn neurofatigue_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVolumeSeries>()?;
    m.add_class::<PyDatasetIndex>()?;
    m.add_class::<PyEncoder>()?;
    m.add_class::<PyClassifier>()?;
    m.add_function(wrap_pyfunction!(load_nifti, m)?)?;
    m.add_function(wrap_pyfunction!(save_nifti, m)?)?;
    m.add_function(wrap_pyfunction!(score_to_class, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_sim, m)?)?;
    m.add_function(wrap_pyfunction!(info_nce, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(baseline_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(make_splits, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
