//! Python bindings: device, dataset, filter kernels, clustering, metrics and
//! the end-to-end pipeline.

// The pyo3 0.22 method macros expand to `PyErr::from(PyErr)` conversions.
#![allow(clippy::useless_conversion)]

use num_complex::Complex64;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use qutrit_readout::cluster::{spectral_cluster as cluster_points, ClusterParams};
use qutrit_readout::dataset::{self, Split, TraceDataset};
use qutrit_readout::dataset_file::{read_dataset, write_dataset};
use qutrit_readout::dsp::{self, BasebandTrace};
use qutrit_readout::eval::{self, ConfusionMatrix};
use qutrit_readout::pipeline::{self, ModelBundle, RunConfig};
use qutrit_readout::sim::{DeviceConfig, Level};
use qutrit_readout::{dsp::MatchedFilterBank, Error};

create_exception!(qutrit_readout, ReadoutError, PyException, "Base class of toolkit errors.");
create_exception!(qutrit_readout, ConfigError, ReadoutError, "Invalid configuration or argument.");
create_exception!(qutrit_readout, DataError, ReadoutError, "Unreadable or incompatible data.");
create_exception!(qutrit_readout, NumericError, ReadoutError, "Non-finite values during fitting.");

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.exit_code() {
        2 => ConfigError::new_err(msg),
        4 => NumericError::new_err(msg),
        _ => DataError::new_err(msg),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for qutrit_readout::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Simulated multi-qubit readout device.
#[pyclass(name = "Device", module = "qutrit_readout")]
#[derive(Clone)]
struct PyDevice {
    inner: DeviceConfig,
}

#[pymethods]
impl PyDevice {
    /// Default `n_qubits` device; `seed` fixes its T1 values and every shot.
    #[new]
    fn new(n_qubits: usize, seed: u64) -> PyResult<Self> {
        let inner = DeviceConfig::default_for(n_qubits, seed);
        inner.validate().py()?;
        Ok(PyDevice { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: DeviceConfig = serde_json::from_str(text).map_err(|e| ConfigError::new_err(e.to_string()))?;
        inner.validate().py()?;
        Ok(PyDevice { inner })
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("device serializes")
    }

    /// Copy with every qubit's T1 set to `t1` seconds (level 2 at `t1/2`).
    fn with_t1(&self, t1: f64) -> PyResult<Self> {
        let inner = self.inner.clone().with_t1(t1);
        inner.validate().py()?;
        Ok(PyDevice { inner })
    }

    #[getter]
    fn n_qubits(&self) -> usize {
        self.inner.n_qubits()
    }

    #[getter]
    fn n_samples(&self) -> usize {
        self.inner.n_samples()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn noise_std(&self) -> f64 {
        self.inner.noise_std
    }

    #[setter]
    fn set_noise_std(&mut self, v: f64) -> PyResult<()> {
        let mut d = self.inner.clone();
        d.noise_std = v;
        d.validate().py()?;
        self.inner = d;
        Ok(())
    }

    /// Steady-state responses of levels 0, 1, 2 for one qubit.
    fn level_response(&self, qubit: usize) -> PyResult<Vec<Complex64>> {
        self.inner.qubits.get(qubit).map(|q| q.level_response.to_vec()).ok_or_else(|| ConfigError::new_err(format!("no qubit {qubit}")))
    }

    fn __repr__(&self) -> String {
        format!("Device(n_qubits={}, seed={}, noise_std={})", self.inner.n_qubits(), self.inner.seed, self.inner.noise_std)
    }
}

/// Labelled collection of raw shots with train/val/test tags.
#[pyclass(name = "Dataset", module = "qutrit_readout")]
struct PyDataset {
    inner: TraceDataset,
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

#[pymethods]
impl PyDataset {
    /// Simulate `shots_per_state` shots of every prepared state.
    #[staticmethod]
    fn simulate(py: Python<'_>, device: &PyDevice, states: Vec<Vec<Level>>, shots_per_state: usize) -> PyResult<Self> {
        let inner = py.allow_threads(|| dataset::generate_dataset(&device.inner, &states, shots_per_state)).py()?;
        Ok(PyDataset { inner })
    }

    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        Ok(PyDataset { inner: read_dataset(path).py()? })
    }

    fn write(&self, path: &str) -> PyResult<()> {
        write_dataset(&self.inner, path).py()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id()
    }

    #[getter]
    fn n_qubits(&self) -> usize {
        self.inner.n_qubits()
    }

    #[getter]
    fn device(&self) -> PyDevice {
        PyDevice { inner: self.inner.device.clone() }
    }

    #[getter]
    fn states(&self) -> Vec<Vec<Level>> {
        self.inner.states.clone()
    }

    /// Raw `(I, Q)` samples of one shot.
    fn iq(&self, shot: usize) -> PyResult<(Vec<f32>, Vec<f32>)> {
        let s = self.inner.shots.get(shot).ok_or_else(|| DataError::new_err(format!("no shot {shot}")))?;
        Ok((s.i_samples.clone(), s.q_samples.clone()))
    }

    fn splits(&self) -> Vec<&'static str> {
        self.inner.split.iter().map(|&s| split_name(s)).collect()
    }

    fn prep_levels(&self, qubit: usize) -> PyResult<Vec<Level>> {
        self.check_qubit(qubit)?;
        Ok(self.inner.prep_levels(qubit))
    }

    /// Initial level after preparation leakage, per shot.
    fn truth_levels(&self, qubit: usize) -> PyResult<Vec<Level>> {
        self.check_qubit(qubit)?;
        Ok(self.inner.truth_levels(qubit))
    }

    /// Demodulated baseband trace of one shot for one qubit.
    #[pyo3(signature = (shot, qubit, n_keep=None))]
    fn baseband(&self, shot: usize, qubit: usize, n_keep: Option<usize>) -> PyResult<Vec<Complex64>> {
        self.check_qubit(qubit)?;
        let s = self.inner.shots.get(shot).ok_or_else(|| DataError::new_err(format!("no shot {shot}")))?;
        let d = &self.inner.device;
        let trace = dsp::demodulate(s, &d.qubits[qubit], d.sample_rate, n_keep.unwrap_or(d.n_samples())).py()?;
        Ok(trace.samples)
    }

    /// Mean trace value of every shot, `[qubit][shot]`.
    fn mtvs(&self, py: Python<'_>) -> PyResult<Vec<Vec<Complex64>>> {
        py.allow_threads(|| pipeline::dataset_mtvs(&self.inner)).py()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(id={}, n_qubits={}, shots={})", self.inner.id(), self.inner.n_qubits(), self.inner.len())
    }
}

impl PyDataset {
    fn check_qubit(&self, q: usize) -> PyResult<()> {
        if q >= self.inner.n_qubits() {
            return Err(DataError::new_err(format!("qubit {q} out of range for {} qubits", self.inner.n_qubits())));
        }
        Ok(())
    }
}

/// Trained per-qubit discriminators with their filter bank.
#[pyclass(name = "Model", module = "qutrit_readout")]
struct PyModel {
    bundle: ModelBundle,
    bank: MatchedFilterBank,
}

#[pymethods]
impl PyModel {
    /// Load `model.json` (the bank is found next to it and hash-checked).
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (bundle, bank) = pipeline::load_bundle(std::path::Path::new(path)).py()?;
        Ok(PyModel { bundle, bank })
    }

    #[getter]
    fn n_qubits(&self) -> usize {
        self.bundle.n_qubits
    }

    #[getter]
    fn kernel_length(&self) -> usize {
        self.bank.kernel_length
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.bank.feature_dim()
    }

    #[getter]
    fn label_source(&self) -> &'static str {
        self.bundle.label_source.name()
    }

    /// Reference labels the models were trained against, `[qubit][shot]`.
    fn reference_labels(&self) -> PyResult<Vec<Vec<Level>>> {
        self.bundle.reference_labels().py()
    }

    /// Filter-bank features of every shot, `[shot][feature]`.
    #[pyo3(signature = (dataset, n_keep=None))]
    fn features(&self, py: Python<'_>, dataset: &PyDataset, n_keep: Option<usize>) -> PyResult<Vec<Vec<f64>>> {
        let n_keep = n_keep.unwrap_or(self.bank.kernel_length);
        pipeline::check_compatible(&self.bundle, &self.bank, &dataset.inner, n_keep).py()?;
        let fx = dsp::FeatureExtractor::new(&self.bank, n_keep).py()?;
        let all: Vec<usize> = (0..dataset.inner.len()).collect();
        py.allow_threads(|| fx.features_for(&dataset.inner, &all)).py()
    }

    /// MLP labels and probabilities: `(levels[shot][qubit], probs[shot][qubit][level])`.
    #[pyo3(signature = (dataset, n_keep=None))]
    #[allow(clippy::type_complexity)]
    fn classify(&self, py: Python<'_>, dataset: &PyDataset, n_keep: Option<usize>) -> PyResult<(Vec<Vec<Level>>, Vec<Vec<[f64; 3]>>)> {
        let n_keep = n_keep.unwrap_or(self.bank.kernel_length);
        let preds = py.allow_threads(|| pipeline::classify(&self.bundle, &self.bank, &dataset.inner, n_keep)).py()?;
        Ok(preds.into_iter().map(|p| (p.levels, p.probs)).unzip())
    }
}

/// Run simulate → cluster → bank → train → evaluate for a JSON config and
/// return the evaluation report as a JSON string. Outputs go to `out_dir`.
#[pyfunction]
#[pyo3(signature = (config_json, out_dir=None))]
fn run_pipeline(py: Python<'_>, config_json: &str, out_dir: Option<&str>) -> PyResult<String> {
    let mut cfg = RunConfig::from_json(config_json).py()?;
    if let Some(d) = out_dir {
        cfg.out_dir = d.into();
    }
    let out = py.allow_threads(|| pipeline::run_pipeline(&cfg)).py()?;
    Ok(serde_json::to_string(&out.report).expect("report serializes"))
}

#[pyfunction]
fn computational_states(n_qubits: usize) -> Vec<Vec<Level>> {
    dataset::computational_states(n_qubits)
}

#[pyfunction]
fn all_states(n_qubits: usize) -> Vec<Vec<Level>> {
    dataset::all_states(n_qubits)
}

/// Mean of a baseband trace.
#[pyfunction]
fn mtv(samples: Vec<Complex64>) -> PyResult<Complex64> {
    dsp::mtv(&BasebandTrace { qubit_index: 0, samples }).py()
}

/// Matched-filter taps separating trace class `a` from class `b`.
#[pyfunction]
fn build_kernel(a: Vec<Vec<Complex64>>, b: Vec<Vec<Complex64>>) -> PyResult<Vec<Complex64>> {
    let wrap = |v: Vec<Vec<Complex64>>| -> Vec<BasebandTrace> { v.into_iter().map(|samples| BasebandTrace { qubit_index: 0, samples }).collect() };
    let (a, b) = (wrap(a), wrap(b));
    dsp::build_kernel(&a.iter().collect::<Vec<_>>(), &b.iter().collect::<Vec<_>>()).py()
}

/// Three-way spectral clustering of complex points; returns a dict with
/// `assignments`, `centroids`, `sigma` and `eigenvalues`.
#[pyfunction]
#[pyo3(signature = (points, seed, subsample=None, stream=0))]
fn spectral_cluster<'py>(py: Python<'py>, points: Vec<Complex64>, seed: u64, subsample: Option<usize>, stream: u64) -> PyResult<Bound<'py, PyDict>> {
    let mut params = ClusterParams::new(seed);
    params.subsample = subsample.unwrap_or(params.subsample).min(points.len());
    let sc = py.allow_threads(|| cluster_points(&points, &params, stream)).py()?;
    let d = PyDict::new_bound(py);
    d.set_item("assignments", sc.assignments)?;
    d.set_item("centroids", sc.centroids.to_vec())?;
    d.set_item("sigma", sc.sigma)?;
    d.set_item("eigenvalues", sc.eigenvalues.to_vec())?;
    Ok(d)
}

/// Fraction of matching labels, via the 3×3 confusion matrix.
#[pyfunction]
fn fidelity(predicted: Vec<Level>, reference: Vec<Level>) -> PyResult<f64> {
    eval::fidelity(&ConfusionMatrix::from_pairs(&predicted, &reference).py()?).py()
}

/// Rows are the reference level, columns the predicted level.
#[pyfunction]
fn confusion_matrix(predicted: Vec<Level>, reference: Vec<Level>) -> PyResult<[[u64; 3]; 3]> {
    Ok(ConfusionMatrix::from_pairs(&predicted, &reference).py()?.0)
}

#[pyfunction]
fn geomean_fidelity(fidelities: Vec<f64>) -> PyResult<f64> {
    eval::geomean_fidelity(&fidelities).py()
}

/// Level-2 precision and recall.
#[pyfunction]
fn leakage_metrics(predicted: Vec<Level>, reference: Vec<Level>) -> PyResult<(f64, f64)> {
    eval::leakage_metrics(&predicted, &reference).py()
}

/// One row of the parameter-scaling table as a dict.
#[pyfunction]
fn scaling_row<'py>(py: Python<'py>, n: usize, k: usize) -> PyResult<Bound<'py, PyDict>> {
    let r = eval::scaling_row(n, k).py()?;
    let d = PyDict::new_bound(py);
    d.set_item("n", r.n)?;
    d.set_item("k", r.k)?;
    d.set_item("p", r.p)?;
    d.set_item("params_per_qubit", r.params_per_qubit)?;
    d.set_item("params_total", r.params_total)?;
    d.set_item("output_states", r.output_states)?;
    d.set_item("reference_params", r.reference_params)?;
    d.set_item("reference_ratio", r.reference_ratio)?;
    Ok(d)
}

#[pymodule]
#[pyo3(name = "qutrit_readout")]
fn qutrit_readout_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add_class::<PyDevice>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(computational_states, m)?)?;
    m.add_function(wrap_pyfunction!(all_states, m)?)?;
    m.add_function(wrap_pyfunction!(mtv, m)?)?;
    m.add_function(wrap_pyfunction!(build_kernel, m)?)?;
    m.add_function(wrap_pyfunction!(spectral_cluster, m)?)?;
    m.add_function(wrap_pyfunction!(fidelity, m)?)?;
    m.add_function(wrap_pyfunction!(confusion_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(geomean_fidelity, m)?)?;
    m.add_function(wrap_pyfunction!(leakage_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(scaling_row, m)?)?;
    m.add("ReadoutError", py.get_type_bound::<ReadoutError>())?;
    m.add("ConfigError", py.get_type_bound::<ConfigError>())?;
    m.add("DataError", py.get_type_bound::<DataError>())?;
    m.add("NumericError", py.get_type_bound::<NumericError>())?;
    Ok(())
}
