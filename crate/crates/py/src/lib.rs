//! Python bindings: systems, Langevin runs, pair datasets, CV training,
//! flow generation, steered MD, OPES and free-energy analysis.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use tlc_core::analysis::{self, FesCurve};
use tlc_core::cvmodels::{self, CollectiveVariable, CvEncoder, GroundTruthCv, NetConfig};
use tlc_core::dynamics::{self, LangevinParams, PairDataset, RunOptions};
use tlc_core::enhanced::{self, OpesConfig, SmdConfig};
use tlc_core::flowgen::{self, FlowModel, TlcConfig};
use tlc_core::nn::Checkpoint;
use tlc_core::{stats, BasinLabel, Configuration, SystemKind, SystemSpec};

fn err(e: tlc_core::Error) -> PyErr {
    use tlc_core::Error as E;
    let msg = e.to_string();
    match e {
        E::InvalidParameter(_) | E::DimensionMismatch { .. } | E::Format(_) | E::Json(_) => PyValueError::new_err(msg),
        E::Io(_) => PyIOError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn io_err(e: std::io::Error) -> PyErr {
    PyIOError::new_err(e.to_string())
}

fn parse_basin(basin: &str) -> PyResult<BasinLabel> {
    match basin {
        "A" | "a" => Ok(BasinLabel::A),
        "B" | "b" => Ok(BasinLabel::B),
        other => Err(PyValueError::new_err(format!(
            "basin must be 'A' or 'B', got {other:?}"
        ))),
    }
}

fn basin_name(b: BasinLabel) -> &'static str {
    match b {
        BasinLabel::A => "A",
        BasinLabel::B => "B",
    }
}

/// Settings struct from an optional JSON object; missing keys keep defaults.
fn from_json<T: serde::de::DeserializeOwned + Default>(config: Option<&str>) -> PyResult<T> {
    match config {
        None => Ok(T::default()),
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(format!("bad config: {e}"))),
    }
}

fn langevin(dt: f64, gamma: f64, temperature: f64, seed: u64) -> PyResult<LangevinParams> {
    let p = LangevinParams {
        dt,
        gamma,
        temperature,
        seed,
    };
    p.validate().map_err(err)?;
    Ok(p)
}

/// An analytic toy system: `doublewell1d`, `mullerbrown2d` or `butane4`.
#[pyclass(name = "System", module = "tlc", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySystem {
    inner: SystemSpec,
}

#[pymethods]
impl PySystem {
    #[new]
    #[pyo3(signature = (kind, params=None, mass=1.0))]
    fn new(kind: &str, params: Option<BTreeMap<String, f64>>, mass: f64) -> PyResult<Self> {
        let kind: SystemKind = serde_json::from_value(serde_json::Value::String(kind.to_string()))
            .map_err(|_| PyValueError::new_err(format!("unknown system kind {kind:?}")))?;
        let inner = SystemSpec::with_params(kind, &params.unwrap_or_default(), mass).map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind().name()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn params(&self) -> BTreeMap<String, f64> {
        self.inner.params().clone()
    }

    fn potential_energy(&self, x: Vec<f64>) -> PyResult<f64> {
        self.inner.potential_energy(&x).map_err(err)
    }

    fn force(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.force(&x).map_err(err)
    }

    fn ground_truth_cv(&self, x: Vec<f64>) -> PyResult<f64> {
        self.inner.ground_truth_cv(&x).map_err(err)
    }

    fn basin_of(&self, x: Vec<f64>) -> PyResult<&'static str> {
        Ok(basin_name(self.inner.basin_of(&x).map_err(err)?))
    }

    fn minimum(&self, basin: &str) -> PyResult<Vec<f64>> {
        Ok(self.inner.minimum(parse_basin(basin)?).0)
    }

    /// Configuration from the landscape parameterization (`[x]`, `[x, y]` or `[phi]`).
    fn configuration_at(&self, coords: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.configuration_at(&coords).map_err(err)?.0)
    }

    /// Exact basin free-energy difference by quadrature.
    fn reference_delta_f(&self, beta: f64) -> f64 {
        self.inner.reference_delta_f(beta)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }

    fn __repr__(&self) -> String {
        format!("System({:?}, dim={})", self.inner.kind().name(), self.inner.dim())
    }
}

#[pyclass(name = "Trajectory", module = "tlc", frozen)]
struct PyTrajectory {
    inner: dynamics::Trajectory,
}

#[pymethods]
impl PyTrajectory {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn frames(&self) -> Vec<Vec<f64>> {
        self.inner.frames.iter().map(|f| f.0.clone()).collect()
    }

    #[getter]
    fn record_stride(&self) -> u64 {
        self.inner.record_stride
    }

    #[getter]
    fn potential(&self) -> Option<Vec<f64>> {
        self.inner.annotations.potential.clone()
    }

    #[getter]
    fn bias(&self) -> Option<Vec<f64>> {
        self.inner.annotations.bias.clone()
    }

    #[getter]
    fn cv(&self) -> Option<Vec<f64>> {
        self.inner.annotations.cv.clone()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        dynamics::write_trajectory(&mut w, &self.inner).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let mut r = BufReader::new(File::open(path).map_err(io_err)?);
        Ok(Self {
            inner: dynamics::read_trajectory(&mut r).map_err(err)?,
        })
    }
}

#[pyclass(name = "PairDataset", module = "tlc", frozen)]
struct PyPairs {
    inner: PairDataset,
}

#[pymethods]
impl PyPairs {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn tau_steps(&self) -> u64 {
        self.inner.tau_steps
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        dynamics::write_pairs(&mut w, &self.inner).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let mut r = BufReader::new(File::open(path).map_err(io_err)?);
        Ok(Self {
            inner: dynamics::read_pairs(&mut r).map_err(err)?,
        })
    }
}

/// A calibrated scalar CV network.
#[pyclass(name = "Encoder", module = "tlc", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyEncoder {
    inner: CvEncoder,
}

#[pymethods]
impl PyEncoder {
    fn encode(&self, x: Vec<f64>) -> PyResult<f64> {
        self.inner.encode(&x).map_err(err)
    }

    /// `(s, ds/dx)`.
    fn gradient(&self, x: Vec<f64>) -> PyResult<(f64, Vec<f64>)> {
        self.inner.cv_input_gradient(&x).map_err(err)
    }

    /// `(raw_min, raw_max, sign)`.
    #[getter]
    fn calibration(&self) -> (f64, f64, f64) {
        let c = self.inner.calibration;
        (c.raw_min, c.raw_max, c.sign)
    }

    /// Refit the calibration on `frames`, with basin A decided by `system`.
    fn recalibrate(&self, frames: Vec<Vec<f64>>, system: &PySystem) -> PyResult<Self> {
        let frames: Vec<Configuration> = frames.into_iter().map(Configuration).collect();
        let mut basin_a = Vec::new();
        for f in &frames {
            if system.inner.basin_of(f).map_err(err)? == BasinLabel::A {
                basin_a.push(f.clone());
            }
        }
        let mut inner = self.inner.clone();
        inner.calibration = cvmodels::calibrate(&inner, &frames, &basin_a).map_err(err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_checkpoint().and_then(|c| c.to_json()).map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let ckpt = Checkpoint::from_json(text).map_err(err)?;
        Ok(Self {
            inner: CvEncoder::from_checkpoint(&ckpt).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        std::fs::write(path, self.to_json()?).map_err(io_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(io_err)?)
    }
}

/// Conditional velocity field over features.
#[pyclass(name = "Flow", module = "tlc", frozen)]
struct PyFlow {
    inner: FlowModel,
}

#[pymethods]
impl PyFlow {
    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.feature_dim()
    }

    /// `n` feature vectors transported from Gaussian noise under condition `s`.
    #[pyo3(signature = (s, n, seed=0, ode_steps=100))]
    fn generate(&self, py: Python<'_>, s: f64, n: usize, seed: u64, ode_steps: usize) -> PyResult<Vec<Vec<f64>>> {
        py.detach(|| {
            let mut rng = dynamics::stream_rng(seed, 0);
            (0..n)
                .map(|_| flowgen::generate(&self.inner, s, ode_steps, &mut rng))
                .collect::<tlc_core::Result<Vec<_>>>()
        })
        .map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_checkpoint().and_then(|c| c.to_json()).map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let ckpt = Checkpoint::from_json(text).map_err(err)?;
        Ok(Self {
            inner: FlowModel::from_checkpoint(&ckpt).map_err(err)?,
        })
    }
}

#[pyclass(name = "Fes", module = "tlc", frozen)]
struct PyFes {
    inner: FesCurve,
}

#[pymethods]
impl PyFes {
    #[getter]
    fn centers(&self) -> Vec<f64> {
        self.inner.centers.clone()
    }

    #[getter]
    fn free_energy(&self) -> Vec<f64> {
        self.inner.free_energy.clone()
    }

    #[getter]
    fn counts(&self) -> Vec<usize> {
        self.inner.counts.clone()
    }

    #[getter]
    fn ess(&self) -> Vec<f64> {
        self.inner.ess.clone()
    }

    /// `(1/beta) ln(Z_A / Z_B)` with A at or above `split`.
    #[pyo3(signature = (split=0.0))]
    fn delta_f(&self, split: f64) -> PyResult<f64> {
        analysis::delta_f(&self.inner, split).map_err(err)
    }
}

enum Cv {
    Truth(GroundTruthCv),
    Model(CvEncoder),
}

impl Cv {
    fn new(system: &PySystem, encoder: Option<&PyEncoder>) -> Self {
        match encoder {
            Some(e) => Cv::Model(e.inner.clone()),
            None => Cv::Truth(GroundTruthCv(system.inner.clone())),
        }
    }

    fn as_dyn(&self) -> &dyn CollectiveVariable {
        match self {
            Cv::Truth(t) => t,
            Cv::Model(m) => m,
        }
    }
}

/// Langevin run from the minimum of `basin`.
#[pyfunction]
#[pyo3(signature = (system, basin, n_steps, record_stride=10, dt=0.005, gamma=1.0, temperature=1.0, seed=0, stream=0))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    py: Python<'_>,
    system: &PySystem,
    basin: &str,
    n_steps: u64,
    record_stride: u64,
    dt: f64,
    gamma: f64,
    temperature: f64,
    seed: u64,
    stream: u64,
) -> PyResult<PyTrajectory> {
    let lp = langevin(dt, gamma, temperature, seed)?;
    let init = system.inner.minimum(parse_basin(basin)?);
    let opts = RunOptions {
        n_steps,
        record_stride,
        annotate: true,
        stream,
    };
    let inner = py
        .detach(|| dynamics::run(&system.inner, &lp, &init, opts, None))
        .map_err(err)?;
    Ok(PyTrajectory { inner })
}

#[pyfunction]
#[pyo3(signature = (trajectories, system, tau_steps, exclude_transitions=true, max_pairs=50_000, seed=0))]
fn make_pairs(
    trajectories: Vec<PyRef<'_, PyTrajectory>>,
    system: &PySystem,
    tau_steps: u64,
    exclude_transitions: bool,
    max_pairs: usize,
    seed: u64,
) -> PyResult<PyPairs> {
    let trajs: Vec<dynamics::Trajectory> = trajectories.iter().map(|t| t.inner.clone()).collect();
    let mut rng = dynamics::stream_rng(seed, 1);
    let inner = dynamics::extract_pairs(
        &trajs,
        &system.inner,
        tau_steps,
        exclude_transitions,
        max_pairs,
        &mut rng,
    )
    .map_err(err)?;
    Ok(PyPairs { inner })
}

/// Joint flow/encoder training. `config` is a JSON object of training
/// settings; returns `(encoder, flow, [(iter, l_cfm, l_ac, l_total)])`.
#[pyfunction]
#[pyo3(signature = (pairs, system, config=None))]
fn train_tlc(
    py: Python<'_>,
    pairs: &PyPairs,
    system: &PySystem,
    config: Option<&str>,
) -> PyResult<(PyEncoder, PyFlow, Vec<(usize, f64, f64, f64)>)> {
    let cfg: TlcConfig = from_json(config)?;
    let m = py
        .detach(|| flowgen::train_tlc(&pairs.inner, &system.inner, &cfg))
        .map_err(err)?;
    let history = m.history.iter().map(|r| (r.iter, r.l_cfm, r.l_ac, r.l_total)).collect();
    Ok((PyEncoder { inner: m.encoder }, PyFlow { inner: m.flow }, history))
}

/// Time-lagged autoencoder baseline; returns `(encoder, losses)`.
#[pyfunction]
#[pyo3(signature = (pairs, system, config=None))]
fn train_tae(
    py: Python<'_>,
    pairs: &PyPairs,
    system: &PySystem,
    config: Option<&str>,
) -> PyResult<(PyEncoder, Vec<f64>)> {
    let cfg: NetConfig = from_json(config)?;
    let m = py
        .detach(|| cvmodels::train_tae(&pairs.inner, &system.inner, &cfg))
        .map_err(err)?;
    Ok((PyEncoder { inner: m.encoder }, m.loss_history))
}

/// Linear TICA on the configured features; returns `(encoder, eigenvalues)`.
#[pyfunction]
#[pyo3(signature = (pairs, system, reg=1e-6))]
fn fit_tica(pairs: &PyPairs, system: &PySystem, reg: f64) -> PyResult<(PyEncoder, Option<Vec<f64>>)> {
    let f = NetConfig::default().featurizer(&system.inner).map_err(err)?;
    let lin = cvmodels::fit_linear_tica(&pairs.inner, &f, reg).map_err(err)?;
    let eig = lin.eigenvalues.clone();
    let mut enc = lin.into_encoder(f).map_err(err)?;
    enc.calibration = cvmodels::calibrate_on_pairs(&enc, &pairs.inner, &system.inner).map_err(err)?;
    Ok((PyEncoder { inner: enc }, eig))
}

/// Steered MD from basin A to B along the encoder (or the ground-truth
/// coordinate when `encoder` is None). Failed replicas come back as None.
#[pyfunction]
#[pyo3(signature = (system, encoder=None, config=None, dt=0.005, gamma=1.0, temperature=1.0))]
fn run_smd(
    py: Python<'_>,
    system: &PySystem,
    encoder: Option<&PyEncoder>,
    config: Option<&str>,
    dt: f64,
    gamma: f64,
    temperature: f64,
) -> PyResult<Vec<Option<PyTrajectory>>> {
    let cfg: SmdConfig = from_json(config)?;
    let lp = langevin(dt, gamma, temperature, cfg.seed)?;
    let cv = Cv::new(system, encoder);
    let out = py
        .detach(|| enhanced::run_smd(&system.inner, cv.as_dyn(), &lp, &cfg))
        .map_err(err)?;
    Ok(out
        .into_iter()
        .map(|t| t.ok().map(|inner| PyTrajectory { inner }))
        .collect())
}

/// `{rmsd_mean, thp_percent, ets_mean, ets_std}` against the basin-B minimum.
#[pyfunction]
#[pyo3(signature = (trajectories, system, hit_threshold=0.2))]
fn path_metrics(
    trajectories: Vec<PyRef<'_, PyTrajectory>>,
    system: &PySystem,
    hit_threshold: f64,
) -> PyResult<BTreeMap<&'static str, Option<f64>>> {
    let trajs: Vec<dynamics::Trajectory> = trajectories.iter().map(|t| t.inner.clone()).collect();
    let target = system.inner.minimum(BasinLabel::B);
    let m = analysis::path_metrics(&trajs, &system.inner, &target, hit_threshold).map_err(err)?;
    Ok(BTreeMap::from([
        ("rmsd_mean", Some(m.rmsd_mean)),
        ("thp_percent", Some(m.thp_percent)),
        ("ets_mean", m.ets_mean),
        ("ets_std", m.ets_std),
    ]))
}

/// OPES from the basin-A minimum; returns `(trajectory, [(center, weight)])`.
#[pyfunction]
#[pyo3(signature = (system, encoder=None, config=None, dt=0.005, gamma=1.0, temperature=1.0))]
fn run_opes(
    py: Python<'_>,
    system: &PySystem,
    encoder: Option<&PyEncoder>,
    config: Option<&str>,
    dt: f64,
    gamma: f64,
    temperature: f64,
) -> PyResult<(PyTrajectory, Vec<(f64, f64)>)> {
    let mut cfg: OpesConfig = from_json(config)?;
    cfg.beta = 1.0 / temperature;
    let lp = langevin(dt, gamma, temperature, cfg.seed)?;
    let cv = Cv::new(system, encoder);
    let init = system.inner.minimum(BasinLabel::A);
    let (traj, state) = py
        .detach(|| enhanced::run_opes(&system.inner, cv.as_dyn(), &lp, &cfg, &init))
        .map_err(err)?;
    Ok((PyTrajectory { inner: traj }, state.kernels))
}

/// Reweighted free energy along the ground-truth coordinate.
#[pyfunction]
#[pyo3(signature = (trajectory, system, beta=1.0, n_bins=64, burn_in_fraction=0.15, range=None))]
fn reweighted_fes(
    trajectory: &PyTrajectory,
    system: &PySystem,
    beta: f64,
    n_bins: usize,
    burn_in_fraction: f64,
    range: Option<(f64, f64)>,
) -> PyResult<PyFes> {
    let sys = &system.inner;
    let coord = |c: &Configuration| sys.ground_truth_cv(c);
    let inner =
        analysis::reweighted_fes(&trajectory.inner, &coord, beta, n_bins, burn_in_fraction, range).map_err(err)?;
    Ok(PyFes { inner })
}

#[pyfunction]
fn pearson(x: Vec<f64>, y: Vec<f64>) -> Option<f64> {
    stats::pearson(&x, &y)
}

#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> Option<f64> {
    stats::spearman(&x, &y)
}

#[pymodule]
fn tlc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySystem>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_class::<PyPairs>()?;
    m.add_class::<PyEncoder>()?;
    m.add_class::<PyFlow>()?;
    m.add_class::<PyFes>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(make_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(train_tlc, m)?)?;
    m.add_function(wrap_pyfunction!(train_tae, m)?)?;
    m.add_function(wrap_pyfunction!(fit_tica, m)?)?;
    m.add_function(wrap_pyfunction!(run_smd, m)?)?;
    m.add_function(wrap_pyfunction!(path_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(run_opes, m)?)?;
    m.add_function(wrap_pyfunction!(reweighted_fes, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
