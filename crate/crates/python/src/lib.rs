//! Python bindings for the `miselbo` crate.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use miselbo::approximations::{EnsembleSpec, GaussianApprox, HierarchicalApprox, Trainable};
use miselbo::config::parse_target_id;
use miselbo::estimators::{self as est, estimate_replicates, Estimator};
use miselbo::experiments::{
    self, run_511, run_512_hier, run_512_shift, Budget, EnergyVariant, Reproduce511Config,
    SweepSpec, VerifyConfig,
};
use miselbo::targets::{GaussianMixture, SettingId};
use miselbo::training::{fit_ensemble, FitConfig, MemberInit};
use miselbo::{Approx, Ensemble, Member, SampleBatch, SeedSpec, Target};

fn py_err(e: miselbo::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// An unnormalized target log-density.
#[pyclass(name = "Target", module = "pymiselbo", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTarget {
    inner: Target,
}

#[pymethods]
impl PyTarget {
    /// Built-in setting: `i`, `ii`, `iii`, `hierarchical`, `p1`, `p2`, or `p1:reference` etc.
    #[staticmethod]
    fn setting(id: &str) -> PyResult<Self> {
        Ok(Self {
            inner: parse_target_id(id).map_err(py_err)?,
        })
    }

    /// Normalized isotropic Gaussian mixture; uniform weights when omitted.
    #[staticmethod]
    #[pyo3(signature = (means, sigmas, weights = None, name = "mixture"))]
    fn mixture(
        means: Vec<Vec<f64>>,
        sigmas: Vec<f64>,
        weights: Option<Vec<f64>>,
        name: &str,
    ) -> PyResult<Self> {
        let k = means.len();
        let weights = weights.unwrap_or_else(|| vec![1.0 / k.max(1) as f64; k]);
        let mix = GaussianMixture::new(weights, means, sigmas).map_err(py_err)?;
        Ok(Self {
            inner: Target::mixture(name, mix),
        })
    }

    /// The same target with `c` added to its log-density.
    fn with_offset(&self, c: f64) -> Self {
        Self {
            inner: self.inner.clone().with_offset(c),
        }
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name().to_owned()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    /// `log Z` when known, else `None`.
    #[getter]
    fn log_normalizer(&self) -> Option<f64> {
        self.inner.log_normalizer()
    }

    fn log_density(&self, z: Vec<f64>) -> PyResult<f64> {
        self.inner.log_density(&z).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Target(name={:?}, dim={})", self.inner.name(), self.inner.dim())
    }
}

/// An equally weighted ensemble of variational approximations.
#[pyclass(name = "Ensemble", module = "pymiselbo", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyEnsemble {
    inner: Ensemble,
}

#[pymethods]
impl PyEnsemble {
    /// Gaussian members given as `(label, mean, sigma)`; `sigma` is a float
    /// (isotropic) or a list (diagonal).
    #[new]
    fn new(members: Vec<(String, Vec<f64>, Bound<'_, PyAny>)>) -> PyResult<Self> {
        let built = members
            .into_iter()
            .map(|(label, mean, sigma)| {
                let g = if let Ok(s) = sigma.extract::<f64>() {
                    GaussianApprox::isotropic(mean, s)
                } else {
                    GaussianApprox::diagonal(mean, sigma.extract::<Vec<f64>>()?)
                }
                .map_err(py_err)?;
                Ok(Member::new(label, g))
            })
            .collect::<PyResult<Vec<_>>>()?;
        Ok(Self {
            inner: Ensemble::new(built).map_err(py_err)?,
        })
    }

    /// Hierarchical members `(label, mu_mean, mu_variance, cond_variance)` over `(z, μ)`.
    #[staticmethod]
    fn hierarchical(members: Vec<(String, f64, f64, f64)>) -> PyResult<Self> {
        let built = members
            .into_iter()
            .map(|(label, m, v, c)| Ok(Member::new(label, HierarchicalApprox::new(m, v, c).map_err(py_err)?)))
            .collect::<PyResult<Vec<_>>>()?;
        Ok(Self {
            inner: Ensemble::new(built).map_err(py_err)?,
        })
    }

    /// Parses the JSON written by `to_json` or the `fit` command.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let spec: EnsembleSpec =
            serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self {
            inner: spec.build().map_err(py_err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&EnsembleSpec::from_ensemble(&self.inner))
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.inner.members().iter().map(|m| m.label.clone()).collect()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// `log((1/S) Σ_s q_s(z))`.
    fn mixture_log_density(&self, z: Vec<f64>) -> PyResult<f64> {
        self.inner.mixture_log_density(&z).map_err(py_err)
    }

    /// Member means, keyed by label (Gaussian members only).
    fn means<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        for m in self.inner.members() {
            if let Approx::Gaussian(g) = &m.approx {
                d.set_item(&m.label, g.mean().to_vec())?;
            }
        }
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!("Ensemble(labels={:?}, dim={})", self.labels(), self.inner.dim())
    }
}

/// Draws shared by every estimator: `L` per member plus all density tables.
#[pyclass(name = "SampleBatch", module = "pymiselbo", frozen, skip_from_py_object)]
struct PyBatch {
    inner: SampleBatch,
}

impl PyBatch {
    fn index(&self, label: &str) -> PyResult<usize> {
        self.inner
            .member_index(label)
            .ok_or_else(|| PyValueError::new_err(format!("no member labelled '{label}'")))
    }
}

#[pymethods]
impl PyBatch {
    #[getter]
    fn labels(&self) -> Vec<String> {
        self.inner.labels().to_vec()
    }

    #[getter]
    #[allow(non_snake_case)]
    fn L(&self) -> usize {
        self.inner.samples_per_member()
    }

    fn elbo(&self, label: &str) -> PyResult<f64> {
        est::elbo(&self.inner, self.index(label)?).map_err(py_err)
    }

    fn iwelbo(&self, label: &str, l: usize) -> PyResult<f64> {
        est::iwelbo(&self.inner, self.index(label)?, l).map_err(py_err)
    }

    fn miselbo(&self, l: usize) -> PyResult<f64> {
        est::miselbo(&self.inner, l).map_err(py_err)
    }

    fn avg_elbo(&self) -> PyResult<f64> {
        est::avg_elbo(&self.inner).map_err(py_err)
    }

    fn avg_iwelbo(&self, l: usize) -> PyResult<f64> {
        est::avg_iwelbo(&self.inner, l).map_err(py_err)
    }

    fn jsd(&self) -> PyResult<f64> {
        est::jsd(&self.inner).map_err(py_err)
    }

    fn delta(&self, l: usize) -> PyResult<f64> {
        est::delta(&self.inner, l).map_err(py_err)
    }

    fn kl_bar(&self) -> PyResult<f64> {
        est::kl_bar(&self.inner).map_err(py_err)
    }

    fn kl_mis(&self) -> PyResult<f64> {
        est::kl_mis(&self.inner).map_err(py_err)
    }

    /// Any estimator by name (`miselbo`, `jsd`, `elbo:<label>`, ...).
    fn evaluate(&self, name: &str, l: usize) -> PyResult<f64> {
        let e: Estimator = name.parse().map_err(py_err)?;
        e.evaluate(&self.inner, l).map_err(py_err)
    }
}

/// Samples every member `L` times from streams derived from `(seed, stream_id/label)`.
#[pyfunction]
#[pyo3(signature = (target, ensemble, L, seed = 0, stream_id = "batch"))]
#[allow(non_snake_case)]
fn draw_batch(
    py: Python<'_>,
    target: &PyTarget,
    ensemble: &PyEnsemble,
    L: usize,
    seed: u64,
    stream_id: &str,
) -> PyResult<PyBatch> {
    let spec = SeedSpec::new(seed, stream_id);
    let inner = py
        .detach(|| est::draw_batch(&target.inner, &ensemble.inner, L, &spec))
        .map_err(py_err)?;
    Ok(PyBatch { inner })
}

/// Replicate estimates: `{name: (mean, std_error, values)}`.
#[pyfunction]
#[pyo3(signature = (target, ensemble, estimators, L, replicates = 5, seed = 0))]
#[allow(non_snake_case)]
fn estimate<'py>(
    py: Python<'py>,
    target: &PyTarget,
    ensemble: &PyEnsemble,
    estimators: Vec<String>,
    L: usize,
    replicates: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let parsed = estimators
        .iter()
        .map(|n| n.parse::<Estimator>())
        .collect::<miselbo::Result<Vec<_>>>()
        .map_err(py_err)?;
    let spec = SeedSpec::new(seed, "estimate");
    let results = py
        .detach(|| estimate_replicates(&target.inner, &ensemble.inner, &parsed, L, replicates, &spec))
        .map_err(py_err)?;
    let d = PyDict::new(py);
    for r in results {
        d.set_item(
            r.estimator.to_string(),
            (r.summary.value, r.summary.std_error, r.values),
        )?;
    }
    Ok(d)
}

/// Fits each Gaussian member by ELBO ascent; returns `(fitted, {label: trace})`.
#[pyfunction]
#[pyo3(signature = (target, ensemble, iterations = 10_000, samples_per_iter = 1_000, lr = 1e-3, seed = 0, train_scale = false))]
#[allow(clippy::too_many_arguments)]
fn fit<'py>(
    py: Python<'py>,
    target: &PyTarget,
    ensemble: &PyEnsemble,
    iterations: usize,
    samples_per_iter: usize,
    lr: f64,
    seed: u64,
    train_scale: bool,
) -> PyResult<(PyEnsemble, Bound<'py, PyDict>)> {
    let inits = ensemble
        .inner
        .members()
        .iter()
        .map(|m| match &m.approx {
            Approx::Gaussian(g) => Ok(MemberInit::new(m.label.clone(), g.clone())),
            Approx::Hierarchical(_) => Err(PyValueError::new_err(format!(
                "member '{}' is hierarchical; only Gaussian members can be fitted",
                m.label
            ))),
        })
        .collect::<PyResult<Vec<_>>>()?;
    let cfg = FitConfig {
        iterations,
        samples_per_iter,
        lr,
        seed: SeedSpec::new(seed, "train"),
        trainable: train_scale.then_some(Trainable::ALL),
        ..FitConfig::reference_preset()
    };
    let fitted = py
        .detach(|| fit_ensemble(&target.inner, &inits, &cfg, true))
        .map_err(py_err)?;
    let traces = PyDict::new(py);
    let mut members = Vec::new();
    for m in fitted.members {
        let r = m.result.map_err(py_err)?;
        traces.set_item(&m.label, r.trace)?;
        members.push(Member::new(m.label, r.approx));
    }
    Ok((
        PyEnsemble {
            inner: Ensemble::new(members).map_err(py_err)?,
        },
        traces,
    ))
}

fn sweep_spec(
    base: SweepSpec,
    grid: Option<Vec<f64>>,
    l_list: Option<Vec<usize>>,
    replicates: usize,
    samples: usize,
    seed: u64,
) -> SweepSpec {
    SweepSpec {
        grid: grid.unwrap_or(base.grid),
        l_list: l_list.unwrap_or(base.l_list),
        replicates,
        samples_per_point: samples,
        seed,
        ..base
    }
}

/// Shift sweep on a 1-D setting; returns the report CSV text.
#[pyfunction]
#[pyo3(signature = (setting = "i", grid = None, L = None, replicates = 5, samples = 1_000, seed = 0))]
#[allow(non_snake_case)]
fn sweep_shift(
    py: Python<'_>,
    setting: &str,
    grid: Option<Vec<f64>>,
    L: Option<Vec<usize>>,
    replicates: usize,
    samples: usize,
    seed: u64,
) -> PyResult<String> {
    let id: SettingId = setting.parse().map_err(py_err)?;
    let spec = sweep_spec(SweepSpec::shift_default(), grid, L, replicates, samples, seed);
    py.detach(|| run_512_shift(id, &spec)?.to_csv_string())
        .map_err(py_err)
}

/// Hierarchical variance sweep; returns the report CSV text.
#[pyfunction]
#[pyo3(signature = (grid = None, L = None, replicates = 5, samples = 1_000, seed = 0))]
#[allow(non_snake_case)]
fn sweep_hier(
    py: Python<'_>,
    grid: Option<Vec<f64>>,
    L: Option<Vec<usize>>,
    replicates: usize,
    samples: usize,
    seed: u64,
) -> PyResult<String> {
    let spec = sweep_spec(SweepSpec::hier_default(), grid, L, replicates, samples, seed);
    py.detach(|| run_512_hier(&spec)?.to_csv_string())
        .map_err(py_err)
}

/// Fits and evaluates the 2-D energy ensemble: `{kl_mis, kl_bar, jsd}`.
#[pyfunction]
#[pyo3(signature = (variant = "p1", budget = "full"))]
fn reproduce_511<'py>(py: Python<'py>, variant: &str, budget: &str) -> PyResult<Bound<'py, PyDict>> {
    let v: EnergyVariant = variant.parse().map_err(py_err)?;
    let b = match budget {
        "full" => Budget::Full,
        "smoke" => Budget::Smoke,
        _ => return Err(PyValueError::new_err(format!("unknown budget '{budget}' (full|smoke)"))),
    };
    let cfg = Reproduce511Config::preset(v, b);
    let run = py.detach(|| run_511(&cfg)).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("kl_mis", run.kl_mis)?;
    d.set_item("kl_bar", run.kl_bar)?;
    d.set_item("jsd", run.jsd)?;
    Ok(d)
}

/// Runs the identity/bound suite; returns `(all_exact_passed, csv)`.
#[pyfunction]
#[pyo3(signature = (n_configs = 50, replicates = 200, seed = 0))]
fn verify(py: Python<'_>, n_configs: usize, replicates: usize, seed: u64) -> PyResult<(bool, String)> {
    let cfg = VerifyConfig {
        n_configs,
        replicates,
        seed,
        ..VerifyConfig::default()
    };
    let report = py.detach(|| experiments::verify(&cfg)).map_err(py_err)?;
    Ok((report.all_exact_passed(), report.to_csv_string().map_err(py_err)?))
}

/// Module initializer, public so the bindings can be exercised from an embedded interpreter.
#[pymodule]
pub fn pymiselbo(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTarget>()?;
    m.add_class::<PyEnsemble>()?;
    m.add_class::<PyBatch>()?;
    m.add_function(wrap_pyfunction!(draw_batch, m)?)?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(sweep_shift, m)?)?;
    m.add_function(wrap_pyfunction!(sweep_hier, m)?)?;
    m.add_function(wrap_pyfunction!(reproduce_511, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
