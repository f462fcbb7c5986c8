//! Python bindings: the toy model, perturbation, transport, losses, metrics and
//! the file-level commands. Structured results come back as plain dicts.

use std::path::{Path, PathBuf};

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use serde::Serialize;

use s2r2_core::alignment::{self, CostMatrix, SinkhornParams};
use s2r2_core::commands;
use s2r2_core::gradcheck::GradcheckConfig;
use s2r2_core::losses;
use s2r2_core::metrics;
use s2r2_core::numerics::{self, Distribution, Matrix};
use s2r2_core::perturb::{self, PerturbConfig, PerturbKind, SynonymLexicon};
use s2r2_core::toymodel::{self, ModelConfig};
use s2r2_core::Error;

create_exception!(s2r2, S2r2Error, PyException);

fn err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::InvalidParameter(_) | Error::Shape(_) => PyValueError::new_err(e.to_string()),
        _ => S2r2Error::new_err(e.to_string()),
    }
}

fn to_py<T: Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let s = serde_json::to_string(v).map_err(|e| S2r2Error::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (s,))?.unbind())
}

fn from_json<T: DeserializeOwned + Default>(config: Option<&str>) -> PyResult<T> {
    match config {
        None => Ok(T::default()),
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(format!("config: {e}"))),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Matrix::from_vec(r, c, rows.into_iter().flatten().collect()).map_err(err)
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn plan_dict<'py>(py: Python<'py>, plan: &alignment::TransportPlan, c: &CostMatrix) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("plan", to_rows(&plan.t))?;
    d.set_item("objective", plan.objective)?;
    d.set_item("converged", plan.converged)?;
    d.set_item("residual", plan.residual)?;
    d.set_item("drift", alignment::segment_drift(plan, c).map_err(err)?.0)?;
    Ok(d)
}

/// Tiny decoder-only transformer with LoRA adapters.
#[pyclass(name = "Model")]
struct PyModel {
    inner: toymodel::Model,
}

#[pymethods]
impl PyModel {
    /// Fresh seeded model from a JSON model config (defaults when omitted).
    #[new]
    #[pyo3(signature = (config=None))]
    fn new(config: Option<&str>) -> PyResult<Self> {
        let cfg: ModelConfig = from_json(config)?;
        Ok(Self { inner: toymodel::init_model(cfg).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: toymodel::load_checkpoint(path).map_err(err)? })
    }

    #[pyo3(signature = (path, step=0))]
    fn save(&self, path: PathBuf, step: u64) -> PyResult<()> {
        toymodel::checkpoint::save_checkpoint_at(&self.inner, path, step).map_err(err)
    }

    #[pyo3(signature = (src, max_new=96))]
    fn generate(&self, src: &str, max_new: usize) -> PyResult<String> {
        self.inner.generate_text(src, max_new).map_err(err)
    }

    fn encode(&self, text: &str) -> Vec<u32> {
        self.inner.encode(text)
    }

    fn decode(&self, ids: Vec<u32>) -> String {
        self.inner.tokenizer.decode(&ids)
    }

    /// Teacher-forced cross-entropy of `tgt` given `src`.
    fn ce(&self, src: &str, tgt: &str) -> PyResult<f64> {
        let tgt = s2r2_core::trainer::target_tokens(&self.inner, tgt);
        Ok(self.inner.forward_teacher_forced(&self.inner.encode(src), &tgt).map_err(err)?.ce)
    }

    fn lora_norms(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.lora_delta_norms())
    }

    fn kl_complexity(&self, tau: f64) -> PyResult<f64> {
        losses::kl_complexity(&self.inner.adapters, tau).map_err(err)
    }

    #[getter]
    fn config(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.config)
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!("Model(d_model={}, n_layers={}, n_heads={}, lora_rank={})", c.d_model, c.n_layers, c.n_heads, c.lora_rank)
    }
}

#[pyfunction]
#[pyo3(signature = (text, kind, seed, typo_rate=0.1, delete_rate=0.1, synonym_rate=0.1, lexicon=None, preserve_segments=false))]
#[allow(clippy::too_many_arguments)]
fn perturb_text(
    text: &str,
    kind: &str,
    seed: u64,
    typo_rate: f64,
    delete_rate: f64,
    synonym_rate: f64,
    lexicon: Option<Vec<(String, Vec<String>)>>,
    preserve_segments: bool,
) -> PyResult<String> {
    let kind: PerturbKind = kind.parse().map_err(err)?;
    let cfg = PerturbConfig { typo_rate, delete_rate, synonym_rate, seed, kinds: vec![kind], preserve_segments };
    cfg.validate().map_err(err)?;
    let lex = lexicon.map(SynonymLexicon::new).unwrap_or_default();
    Ok(perturb::perturb_text(text, kind, &cfg, &lex, seed))
}

#[pyfunction]
fn record_seed(seed: u64, id: &str) -> u64 {
    perturb::record_seed(seed, id)
}

#[pyfunction]
fn solve_exact<'py>(py: Python<'py>, cost: Vec<Vec<f64>>, mu: Vec<f64>, nu: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let c = CostMatrix(matrix(cost)?);
    let plan = alignment::solve_exact(&c, &Distribution::new(mu).map_err(err)?, &Distribution::new(nu).map_err(err)?).map_err(err)?;
    plan_dict(py, &plan, &c)
}

#[pyfunction]
#[pyo3(signature = (cost, mu, nu, epsilon=1e-2, max_iters=100_000, tol=1e-9))]
fn solve_sinkhorn<'py>(
    py: Python<'py>,
    cost: Vec<Vec<f64>>,
    mu: Vec<f64>,
    nu: Vec<f64>,
    epsilon: f64,
    max_iters: usize,
    tol: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let c = CostMatrix(matrix(cost)?);
    let (mu, nu) = (Distribution::new(mu).map_err(err)?, Distribution::new(nu).map_err(err)?);
    let plan = alignment::solve_sinkhorn(&c, &mu, &nu, SinkhornParams { epsilon, max_iters, tol }).map_err(err)?;
    plan_dict(py, &plan, &c)
}

#[pyfunction]
fn sem_loss(drift: Vec<f64>, beta: f64) -> PyResult<f64> {
    losses::sem_loss(&alignment::DriftVector(drift), beta).map_err(err)
}

#[pyfunction]
fn js_divergence(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    numerics::js_divergence(&p, &q).map_err(err)
}

#[pyfunction]
fn rouge_l(candidate: &str, reference: &str) -> f64 {
    metrics::rouge_l(candidate, reference)
}

#[pyfunction]
fn edit_rate(out_clean: &str, out_pert: &str) -> f64 {
    metrics::edit_rate(out_clean, out_pert)
}

/// `None` when the clean score is zero.
#[pyfunction]
fn pdr(r_clean: f64, r_pert: f64) -> Option<f64> {
    metrics::pdr(r_clean, r_pert).ok()
}

#[pyfunction]
fn e_risk(one_minus_sb: f64, pdr_abs: f64, edit: f64) -> f64 {
    metrics::e_risk(one_minus_sb, pdr_abs, edit)
}

#[pyfunction]
#[pyo3(signature = (e_risk, d_kl, n, delta=0.05))]
fn pac_b(e_risk: f64, d_kl: f64, n: usize, delta: f64) -> PyResult<f64> {
    metrics::pac_b(e_risk, d_kl, n, delta).map_err(err)
}

fn create_out(out: &Path) -> PyResult<()> {
    std::fs::create_dir_all(out).map_err(|e| err(e.into()))
}

#[pyfunction]
#[pyo3(signature = (input, out, config=None))]
fn perturb_file(py: Python<'_>, input: PathBuf, out: PathBuf, config: Option<&str>) -> PyResult<Py<PyAny>> {
    let job: commands::PerturbJob = from_json(config)?;
    create_out(&out)?;
    let man = py.detach(|| commands::cmd_perturb(&input, &job, &out)).map_err(err)?;
    to_py(py, &man)
}

#[pyfunction]
#[pyo3(signature = (data, out, config=None, resume=None))]
fn train(py: Python<'_>, data: PathBuf, out: PathBuf, config: Option<&str>, resume: Option<PathBuf>) -> PyResult<Py<PyAny>> {
    let job: commands::TrainJob = from_json(config)?;
    create_out(&out)?;
    let man = py.detach(|| commands::cmd_train(&data, &job, &out, resume.as_deref())).map_err(err)?;
    to_py(py, &man)
}

#[pyfunction]
#[pyo3(signature = (checkpoint, data, out, config=None))]
fn evaluate(py: Python<'_>, checkpoint: PathBuf, data: PathBuf, out: PathBuf, config: Option<&str>) -> PyResult<Py<PyAny>> {
    let job: commands::EvalJob = from_json(config)?;
    create_out(&out)?;
    let man = py.detach(|| commands::cmd_eval(&checkpoint, &data, &job, &out)).map_err(err)?;
    to_py(py, &man)
}

/// `logs` entries are `label=path` or bare paths.
#[pyfunction]
#[pyo3(signature = (logs, out, ratio_threshold=None))]
fn report(py: Python<'_>, logs: Vec<String>, out: PathBuf, ratio_threshold: Option<f64>) -> PyResult<Py<PyAny>> {
    let logs: Vec<_> = logs.iter().map(|s| commands::parse_log_arg(s)).collect();
    create_out(&out)?;
    let rep = py.detach(|| commands::cmd_report(&logs, &out, ratio_threshold)).map_err(err)?;
    to_py(py, &rep)
}

#[pyfunction]
#[pyo3(signature = (config=None))]
fn gradcheck(py: Python<'_>, config: Option<&str>) -> PyResult<Py<PyAny>> {
    let cfg: GradcheckConfig = from_json(config)?;
    let rep = py.detach(|| commands::cmd_gradcheck(&cfg, None)).map_err(err)?;
    to_py(py, &rep)
}

#[pymodule]
fn s2r2(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("S2r2Error", m.py().get_type::<S2r2Error>())?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(perturb_text, m)?)?;
    m.add_function(wrap_pyfunction!(record_seed, m)?)?;
    m.add_function(wrap_pyfunction!(solve_exact, m)?)?;
    m.add_function(wrap_pyfunction!(solve_sinkhorn, m)?)?;
    m.add_function(wrap_pyfunction!(sem_loss, m)?)?;
    m.add_function(wrap_pyfunction!(js_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(edit_rate, m)?)?;
    m.add_function(wrap_pyfunction!(pdr, m)?)?;
    m.add_function(wrap_pyfunction!(e_risk, m)?)?;
    m.add_function(wrap_pyfunction!(pac_b, m)?)?;
    m.add_function(wrap_pyfunction!(perturb_file, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
