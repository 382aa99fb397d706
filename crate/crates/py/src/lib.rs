//! Python bindings for the llap core crate. The surface mirrors the Rust
//! API: build an architecture, train or load parameters, fit a Laplace
//! approximation under one of the evidence objectives, then query the
//! predictive posterior. Invariance certificates and the experiment
//! pipeline are exposed as free functions.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use llap_core::config::{parse_tying, Objective, RunConfig};
use llap_core::data::{augment_constant, gen_toy_regression};
use llap_core::invariance;
use llap_core::laplace::{
    effective_dimensions, em_alternate, evidence, ggn, maximise_evidence, posterior_factor,
    predictive_nll, predictive_with, EvidenceMethod, Linearisation, PosteriorFactor,
    PrecisionSpec,
};
use llap_core::model::{forward, scale_group, Activation, Architecture as CoreArch, GroupedParams};
use llap_core::objectives::{
    train_map, Dataset as CoreDataset, Likelihood, Optimiser, Target, TrainConfig,
};

fn err(e: llap_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_activation(s: &str) -> PyResult<Activation> {
    match s {
        "tanh" => Ok(Activation::Tanh),
        "leaky-relu" => Ok(Activation::LeakyRelu(0.01)),
        _ => Err(PyValueError::new_err(format!("unknown activation {s:?}"))),
    }
}

fn parse_likelihood(kind: &str, sigma2: Option<f64>) -> PyResult<Likelihood> {
    match kind {
        "gaussian" => {
            let s2 = sigma2
                .ok_or_else(|| PyValueError::new_err("gaussian likelihood needs sigma2"))?;
            Ok(Likelihood::Gaussian { sigma2: s2 })
        }
        "categorical" => Ok(Likelihood::Categorical),
        _ => Err(PyValueError::new_err(format!("unknown likelihood {kind:?}"))),
    }
}

/// Network architecture: layer widths, activation, and which blocks are
/// weight-normalised.
#[pyclass(name = "Architecture")]
#[derive(Clone)]
struct PyArchitecture {
    inner: CoreArch,
}

#[pymethods]
impl PyArchitecture {
    /// Layer-normalised MLP whose hidden weight blocks are scale-free.
    #[staticmethod]
    #[pyo3(signature = (input_dim, hidden, output_dim, activation="tanh", final_bias=true))]
    fn fully_normalised(
        input_dim: usize,
        hidden: Vec<usize>,
        output_dim: usize,
        activation: &str,
        final_bias: bool,
    ) -> PyResult<PyArchitecture> {
        let act = parse_activation(activation)?;
        Ok(PyArchitecture {
            inner: CoreArch::fully_normalised_mlp(input_dim, &hidden, output_dim, act, final_bias),
        })
    }

    /// Plain dense MLP with biases and no normalisation.
    #[staticmethod]
    #[pyo3(signature = (input_dim, hidden, output_dim, activation="tanh", final_bias=true))]
    fn plain(
        input_dim: usize,
        hidden: Vec<usize>,
        output_dim: usize,
        activation: &str,
        final_bias: bool,
    ) -> PyResult<PyArchitecture> {
        let act = parse_activation(activation)?;
        Ok(PyArchitecture {
            inner: CoreArch::plain_mlp(input_dim, &hidden, output_dim, act, final_bias),
        })
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.inner.output_dim
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn __repr__(&self) -> String {
        format!(
            "Architecture({}-{:?}-{}, {} params)",
            self.inner.input_dim,
            self.inner.hidden.iter().map(|h| h.width).collect::<Vec<_>>(),
            self.inner.output_dim,
            self.inner.num_params()
        )
    }
}

/// Flat parameter vector with named groups.
#[pyclass(name = "Params")]
#[derive(Clone)]
struct PyParams {
    inner: GroupedParams,
}

#[pymethods]
impl PyParams {
    /// Seeded random initialisation for an architecture.
    #[staticmethod]
    fn init(arch: &PyArchitecture, seed: u64) -> PyParams {
        PyParams { inner: GroupedParams::init(&arch.inner, seed) }
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.inner.values.clone()
    }

    #[getter]
    fn group_names(&self) -> Vec<String> {
        self.inner.groups.iter().map(|g| g.name.clone()).collect()
    }

    fn with_values(&self, values: Vec<f64>) -> PyResult<PyParams> {
        if values.len() != self.inner.values.len() {
            return Err(PyValueError::new_err(format!(
                "expected {} values, got {}",
                self.inner.values.len(),
                values.len()
            )));
        }
        Ok(PyParams { inner: self.inner.with_values(values) })
    }

    /// Multiply every normalised weight group by k and divide the final
    /// layer by k; the network function is unchanged.
    fn scale(&self, k: f64) -> PyResult<PyParams> {
        Ok(PyParams { inner: scale_group(&self.inner, k).map_err(err)? })
    }

    fn __len__(&self) -> usize {
        self.inner.values.len()
    }

    fn __repr__(&self) -> String {
        format!("Params({} values, {} groups)", self.inner.values.len(), self.inner.groups.len())
    }
}

/// Inputs plus regression or class targets.
#[pyclass(name = "Dataset")]
#[derive(Clone)]
struct PyDataset {
    inner: CoreDataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn regression(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> PyResult<PyDataset> {
        if inputs.len() != targets.len() {
            return Err(PyValueError::new_err("inputs and targets differ in length"));
        }
        Ok(PyDataset {
            inner: CoreDataset {
                inputs,
                targets: targets.into_iter().map(Target::Regression).collect(),
            },
        })
    }

    #[staticmethod]
    fn classification(inputs: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<PyDataset> {
        if inputs.len() != labels.len() {
            return Err(PyValueError::new_err("inputs and labels differ in length"));
        }
        Ok(PyDataset {
            inner: CoreDataset {
                inputs,
                targets: labels.into_iter().map(Target::Class).collect(),
            },
        })
    }

    #[getter]
    fn inputs(&self) -> Vec<Vec<f64>> {
        self.inner.inputs.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Dataset({} points)", self.inner.len())
    }
}

/// Sinusoid regression problem with a gap in the training inputs. Returns
/// (train, test); inputs carry an appended constant feature.
#[pyfunction]
#[pyo3(signature = (seed, n_train, n_test, augment=true))]
fn toy_regression(seed: u64, n_train: usize, n_test: usize, augment: bool) -> (PyDataset, PyDataset) {
    let gen = gen_toy_regression(seed, n_train, n_test);
    let (train, test) = if augment {
        (augment_constant(&gen.train), augment_constant(&gen.test))
    } else {
        (gen.train, gen.test)
    };
    (PyDataset { inner: train }, PyDataset { inner: test })
}

/// Evaluate the network at a single input.
#[pyfunction]
fn predict(arch: &PyArchitecture, params: &PyParams, x: Vec<f64>) -> PyResult<Vec<f64>> {
    forward(&arch.inner, &params.inner, &x).map_err(err)
}

/// Minimise the penalised data fit by minibatch gradient descent.
#[pyfunction]
#[pyo3(signature = (arch, init, data, likelihood, sigma2=None, prior_precision=1e-4,
                    epochs=400, learning_rate=0.005, optimiser="adam", momentum=0.9,
                    batch_size=100, seed=0, tying="per-group"))]
#[allow(clippy::too_many_arguments)]
fn fit_map(
    arch: &PyArchitecture,
    init: &PyParams,
    data: &PyDataset,
    likelihood: &str,
    sigma2: Option<f64>,
    prior_precision: f64,
    epochs: usize,
    learning_rate: f64,
    optimiser: &str,
    momentum: f64,
    batch_size: usize,
    seed: u64,
    tying: &str,
) -> PyResult<(PyParams, f64)> {
    let lik = parse_likelihood(likelihood, sigma2)?;
    let opt = match optimiser {
        "adam" => Optimiser::Adam,
        "sgd" => Optimiser::SgdMomentum,
        _ => return Err(PyValueError::new_err(format!("unknown optimiser {optimiser:?}"))),
    };
    let prec = PrecisionSpec::isotropic(
        &init.inner.groups,
        prior_precision,
        parse_tying(tying).map_err(err)?,
    );
    let tc = TrainConfig {
        optimiser: opt,
        learning_rate,
        momentum,
        epochs,
        batch_size,
        seed,
        lr_decay_epochs: vec![],
        lr_decay: 0.1,
        checkpoint_epochs: vec![],
    };
    let res = train_map(&arch.inner, &init.inner, &lik, &data.inner, &prec, &tc).map_err(err)?;
    Ok((PyParams { inner: res.final_params }, res.final_loss))
}

/// Linearised-Laplace posterior around fixed network weights. `fit` selects
/// prior precisions under one of the evidence objectives; prediction then
/// uses the network mean and the linear-model covariance.
#[pyclass(name = "Laplace")]
struct PyLaplace {
    arch: CoreArch,
    params: GroupedParams,
    data: CoreDataset,
    lik: Likelihood,
    include_biases: bool,
    fitted: Option<Fitted>,
}

struct Fitted {
    lin: Linearisation,
    factor: PosteriorFactor,
    prec: PrecisionSpec,
    theta: Vec<f64>,
    evidence: f64,
    converged: bool,
}

#[pymethods]
impl PyLaplace {
    #[new]
    #[pyo3(signature = (arch, params, data, likelihood, sigma2=None, include_biases=false))]
    fn new(
        arch: &PyArchitecture,
        params: &PyParams,
        data: &PyDataset,
        likelihood: &str,
        sigma2: Option<f64>,
        include_biases: bool,
    ) -> PyResult<PyLaplace> {
        let lik = parse_likelihood(likelihood, sigma2)?;
        Ok(PyLaplace {
            arch: arch.inner.clone(),
            params: params.inner.clone(),
            data: data.inner.clone(),
            lik,
            include_biases,
            fitted: None,
        })
    }

    /// Select prior precisions. Objectives: "naive" evaluates the evidence
    /// at the trained weights; "star-full" and "star-simple" alternate a
    /// convex weight solve with precision updates.
    #[pyo3(signature = (objective="star-simple", tying="per-group", init_lambda=1e-4))]
    fn fit<'py>(
        &mut self,
        py: Python<'py>,
        objective: &str,
        tying: &str,
        init_lambda: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let obj = Objective::parse(objective).map_err(err)?;
        let tying = parse_tying(tying).map_err(err)?;
        let lin = Linearisation::new(
            &self.arch,
            &self.params,
            obj.variant(),
            self.include_biases,
            &self.data,
        )
        .map_err(err)?;
        let curv = ggn(&lin, &self.lik, &self.data).map_err(err)?;
        let init = PrecisionSpec::isotropic(&lin.active_groups, init_lambda, tying);
        let (theta, prec, report) = match obj {
            Objective::Naive => {
                let theta = lin.theta_tilde_active();
                let (prec, mut report) =
                    maximise_evidence(&theta, &curv, &init, EvidenceMethod::MackayFixedPoint)
                        .map_err(err)?;
                report.evidence = evidence(&theta, &prec, &curv).map_err(err)?;
                (theta, prec, report)
            }
            _ => em_alternate(&lin, &self.lik, &self.data, &curv, &init).map_err(err)?,
        };
        let gammas = effective_dimensions(&prec, &curv).map_err(err)?;
        let factor = posterior_factor(&curv, &prec).map_err(err)?;
        let out = PyDict::new_bound(py);
        let lambdas = PyDict::new_bound(py);
        for (g, l) in prec.groups.iter().zip(prec.lambdas.iter()) {
            lambdas.set_item(&g.name, l)?;
        }
        out.set_item("lambda", lambdas)?;
        out.set_item("evidence", report.evidence)?;
        out.set_item("converged", report.converged)?;
        out.set_item("outer_rounds", report.outer_rounds)?;
        out.set_item("effective_dims", gammas)?;
        out.set_item("jitter", factor.jitter())?;
        self.fitted = Some(Fitted {
            lin,
            factor,
            prec,
            theta,
            evidence: report.evidence,
            converged: report.converged,
        });
        Ok(out)
    }

    /// Predictive mean and covariance at one input. The mean is the exact
    /// network output; only the covariance comes from the linear model.
    fn predict(&self, x: Vec<f64>) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
        let f = self.require_fit()?;
        let post = predictive_with(&f.lin, &f.factor, &x).map_err(err)?;
        let c = &post.covariance;
        let cov = (0..c.rows)
            .map(|i| (0..c.cols).map(|j| c.get(i, j)).collect())
            .collect();
        Ok((post.mean, cov))
    }

    /// Predictive standard deviations at one input.
    fn predict_std(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let f = self.require_fit()?;
        let post = predictive_with(&f.lin, &f.factor, &x).map_err(err)?;
        Ok(post.std_devs())
    }

    /// Average predictive negative log likelihood over a dataset.
    #[pyo3(signature = (data, mc_samples=100, seed=0))]
    fn nll(&self, data: &PyDataset, mc_samples: usize, seed: u64) -> PyResult<f64> {
        let f = self.require_fit()?;
        let mut acc = 0.0;
        for (i, (x, y)) in data.inner.inputs.iter().zip(data.inner.targets.iter()).enumerate() {
            let post = predictive_with(&f.lin, &f.factor, x).map_err(err)?;
            acc += predictive_nll(&post, &self.lik, y, mc_samples, seed.wrapping_add(i as u64))
                .map_err(err)?;
        }
        Ok(acc / data.inner.len() as f64)
    }

    #[getter]
    fn evidence(&self) -> PyResult<f64> {
        Ok(self.require_fit()?.evidence)
    }

    #[getter]
    fn converged(&self) -> PyResult<bool> {
        Ok(self.require_fit()?.converged)
    }

    /// Optimised weights of the linear surrogate, embedded in the full
    /// parameter vector.
    #[getter]
    fn theta_star(&self) -> PyResult<Vec<f64>> {
        let f = self.require_fit()?;
        Ok(f.lin.embed(&f.theta))
    }

    #[getter]
    fn lambdas(&self) -> PyResult<Vec<(String, f64)>> {
        let f = self.require_fit()?;
        Ok(f.prec
            .groups
            .iter()
            .zip(f.prec.lambdas.iter())
            .map(|(g, &l)| (g.name.clone(), l))
            .collect())
    }
}

impl PyLaplace {
    fn require_fit(&self) -> PyResult<&Fitted> {
        self.fitted
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("call fit() before querying the posterior"))
    }
}

/// Jacobian and curvature block identities under normalised-weight
/// rescaling. Returns (pass, max_deviation).
#[pyfunction]
#[pyo3(signature = (arch, params, data, sigma2, k_values=vec![0.5, 2.0, 4.0], tolerance=1e-7))]
fn check_scaling_identities(
    arch: &PyArchitecture,
    params: &PyParams,
    data: &PyDataset,
    sigma2: f64,
    k_values: Vec<f64>,
    tolerance: f64,
) -> PyResult<(bool, f64)> {
    let lik = Likelihood::Gaussian { sigma2 };
    let rep = invariance::check_scaling_identities(
        &arch.inner,
        &params.inner,
        &data.inner,
        &lik,
        &k_values,
        tolerance,
    )
    .map_err(err)?;
    Ok((rep.pass(), rep.max_deviation()))
}

/// Optimised precisions from a rescaled starting point must map onto the
/// originals as lambda/k^2 on normalised groups. Returns (pass, max_deviation).
#[pyfunction]
#[pyo3(signature = (arch, params, data, sigma2, k=2.0, tying="per-group", tolerance=1e-4))]
fn check_stationary_scaling(
    arch: &PyArchitecture,
    params: &PyParams,
    data: &PyDataset,
    sigma2: f64,
    k: f64,
    tying: &str,
    tolerance: f64,
) -> PyResult<(bool, f64)> {
    let lik = Likelihood::Gaussian { sigma2 };
    let rep = invariance::check_stationary_scaling(
        &arch.inner,
        &params.inner,
        &data.inner,
        &lik,
        k,
        parse_tying(tying).map_err(err)?,
        tolerance,
    )
    .map_err(err)?;
    Ok((rep.pass(), rep.max_deviation()))
}

/// Normalised-direction derivative of the features; exactly zero for
/// weight-normalised blocks. Returns the largest normalised magnitude.
#[pyfunction]
fn check_directional_zero(
    arch: &PyArchitecture,
    params: &PyParams,
    inputs: Vec<Vec<f64>>,
) -> PyResult<f64> {
    invariance::check_directional_zero(&arch.inner, &params.inner, &inputs).map_err(err)
}

/// Mean marginal 2-Wasserstein distance between two predictive posteriors
/// given as (means, stds) arrays.
#[pyfunction]
fn posterior_distance(
    means_a: Vec<f64>,
    stds_a: Vec<f64>,
    means_b: Vec<f64>,
    stds_b: Vec<f64>,
) -> PyResult<f64> {
    if means_a.len() != means_b.len()
        || means_a.len() != stds_a.len()
        || means_a.len() != stds_b.len()
        || means_a.is_empty()
    {
        return Err(PyValueError::new_err("arrays must share one nonzero length"));
    }
    let mut acc = 0.0;
    for i in 0..means_a.len() {
        acc += invariance::wasserstein2_1d(means_a[i], stds_a[i], means_b[i], stds_b[i])
            .map_err(err)?;
    }
    Ok(acc / means_a.len() as f64)
}

/// Run a full experiment from a TOML config string and return the metrics
/// records as JSON strings, one per record.
#[pyfunction]
fn run_experiment(config_toml: &str) -> PyResult<Vec<String>> {
    let cfg = RunConfig::from_str(config_toml).map_err(err)?;
    let records = llap_core::pipeline::run_pipeline(&cfg).map_err(err)?;
    records
        .iter()
        .map(|r| {
            serde_json::to_string(r).map_err(|e| PyValueError::new_err(e.to_string()))
        })
        .collect()
}

#[pymodule]
fn llap(m: &Bound<PyModule>) -> PyResult<()> {
    m.add_class::<PyArchitecture>()?;
    m.add_class::<PyParams>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyLaplace>()?;
    m.add_function(wrap_pyfunction!(toy_regression, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(fit_map, m)?)?;
    m.add_function(wrap_pyfunction!(check_scaling_identities, m)?)?;
    m.add_function(wrap_pyfunction!(check_stationary_scaling, m)?)?;
    m.add_function(wrap_pyfunction!(check_directional_zero, m)?)?;
    m.add_function(wrap_pyfunction!(posterior_distance, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
