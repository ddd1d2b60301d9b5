//! Python bindings for the moving-boundary order book model.
//!
//! Exposes the model and grid as classes, the simulator and the
//! noise-free solver as functions returning a result object with plain
//! lists, and the estimation / decision pipelines returning their
//! reports as JSON strings.
//!
//! Usage from Python:
//!
//!     import stefan_lob as sl
//!     model = sl.Model(alpha_ask=0.5, alpha_bid=0.5,
//!                      sigma_ask=[0.0, 1.0], sigma_bid=[0.0, 1.0],
//!                      q_ask=[8.0], gamma_ask=0.6,
//!                      q_bid=[8.0], gamma_bid=0.6, rho=100.0)
//!     grid = sl.Grid(dt=0.01, dx=0.1, n_time=100, n_price=30)
//!     result = sl.simulate(model, grid, seed=42)
//!     report = json.loads(sl.estimate(result.ask, result.bid, result.mid,
//!                                     dt=0.01, dx=0.1))

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use stefan_lob_core::estimate::{fit_stage2, select_stage1_aic, EstimationConfig, Side};
use stefan_lob_core::invest::{static_optimal, InvestorProblem, TimingSignal, UtilityModel};
use stefan_lob_core::model::{
    GridSpec, InitialConditionSpec, ModelParams, OrderBookDataset, ScalingSpec,
};
use stefan_lob_core::sim::{
    reference_halfline_heat, simulate as run_simulation, solve_deterministic as run_deterministic,
    BookState, SimulationConfig, SimulationResult,
};
use stefan_lob_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::InvalidParameter(_) | Error::MissingField(_) | Error::VectorTooShort { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Sampling grid: time step, log-price step, and matrix dimensions.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct Grid {
    inner: GridSpec,
}

#[pymethods]
impl Grid {
    #[new]
    fn new(dt: f64, dx: f64, n_time: usize, n_price: usize) -> PyResult<Self> {
        Ok(Self {
            inner: GridSpec::new(dt, dx, n_time, n_price).map_err(py_err)?,
        })
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.inner.dt
    }

    #[getter]
    fn dx(&self) -> f64 {
        self.inner.dx
    }

    #[getter]
    fn n_time(&self) -> usize {
        self.inner.n_time
    }

    #[getter]
    fn n_price(&self) -> usize {
        self.inner.n_price
    }

    fn __repr__(&self) -> String {
        format!(
            "Grid(dt={}, dx={}, n_time={}, n_price={})",
            self.inner.dt, self.inner.dx, self.inner.n_time, self.inner.n_price
        )
    }
}

/// The full model parameter set: diffusivities, noise scaling
/// polynomials, initial profiles, and the Stefan constant.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct Model {
    inner: ModelParams,
}

#[pymethods]
impl Model {
    #[new]
    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (alpha_ask, alpha_bid, sigma_ask, sigma_bid, q_ask, gamma_ask, q_bid, gamma_bid, rho))]
    fn new(
        alpha_ask: f64,
        alpha_bid: f64,
        sigma_ask: Vec<f64>,
        sigma_bid: Vec<f64>,
        q_ask: Vec<f64>,
        gamma_ask: f64,
        q_bid: Vec<f64>,
        gamma_bid: f64,
        rho: f64,
    ) -> PyResult<Self> {
        let inner = ModelParams::new(
            alpha_ask,
            alpha_bid,
            ScalingSpec::new(sigma_ask).map_err(py_err)?,
            ScalingSpec::new(sigma_bid).map_err(py_err)?,
            InitialConditionSpec::new(q_ask, gamma_ask).map_err(py_err)?,
            InitialConditionSpec::new(q_bid, gamma_bid).map_err(py_err)?,
            rho,
        )
        .map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Noise amplitude sigma(x) on the ask side.
    fn sigma_ask_at(&self, x: f64) -> PyResult<f64> {
        self.inner.sigma_ask.eval(x).map_err(py_err)
    }

    /// Initial ask density u0(x).
    fn u0_ask_at(&self, x: f64) -> f64 {
        self.inner.u0_ask.eval(x)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(alpha_ask={}, alpha_bid={}, rho={})",
            self.inner.alpha_ask, self.inner.alpha_bid, self.inner.rho
        )
    }
}

/// A simulated (or deterministically solved) dataset: volume matrices,
/// the mid-price path, and the truncation flag.
#[pyclass]
struct SimResult {
    ask: Vec<Vec<f64>>,
    bid: Vec<Vec<f64>>,
    mid: Vec<f64>,
    truncated: bool,
    truncation_step: Option<usize>,
}

impl SimResult {
    fn from_core(result: SimulationResult) -> Self {
        let ask = result
            .dataset
            .ask
            .rows()
            .into_iter()
            .map(|r| r.to_vec())
            .collect();
        let bid = result
            .dataset
            .bid
            .rows()
            .into_iter()
            .map(|r| r.to_vec())
            .collect();
        Self {
            ask,
            bid,
            mid: result.dataset.mid.to_vec(),
            truncated: result.truncated,
            truncation_step: result.truncation_step,
        }
    }
}

#[pymethods]
impl SimResult {
    #[getter]
    fn ask(&self) -> Vec<Vec<f64>> {
        self.ask.clone()
    }

    #[getter]
    fn bid(&self) -> Vec<Vec<f64>> {
        self.bid.clone()
    }

    #[getter]
    fn mid(&self) -> Vec<f64> {
        self.mid.clone()
    }

    #[getter]
    fn truncated(&self) -> bool {
        self.truncated
    }

    #[getter]
    fn truncation_step(&self) -> Option<usize> {
        self.truncation_step
    }

    fn __repr__(&self) -> String {
        format!(
            "SimResult(rows={}, cols={}, truncated={})",
            self.ask.len(),
            self.ask.first().map_or(0, Vec::len),
            self.truncated
        )
    }
}

/// Integrate the stochastic model forward from the sampled initial
/// profiles. Deterministic for a fixed seed.
#[pyfunction]
#[pyo3(signature = (model, grid, seed = 0, blowup_threshold = 1e6, initial_mid = 0.0))]
fn simulate(
    model: &Model,
    grid: &Grid,
    seed: u64,
    blowup_threshold: f64,
    initial_mid: f64,
) -> PyResult<SimResult> {
    let config = SimulationConfig::new(grid.inner, seed, blowup_threshold).map_err(py_err)?;
    let result = run_simulation(&model.inner, &config, initial_mid).map_err(py_err)?;
    Ok(SimResult::from_core(result))
}

/// The noise-free solve of the same system; consumes no randomness.
#[pyfunction]
#[pyo3(signature = (model, grid, initial_mid = 0.0))]
fn solve_deterministic(model: &Model, grid: &Grid, initial_mid: f64) -> PyResult<SimResult> {
    let result = run_deterministic(&model.inner, &grid.inner, initial_mid).map_err(py_err)?;
    Ok(SimResult::from_core(result))
}

fn dataset_from_lists(
    ask: Vec<Vec<f64>>,
    bid: Vec<Vec<f64>>,
    mid: Vec<f64>,
    dt: f64,
    dx: f64,
) -> PyResult<OrderBookDataset> {
    let t = ask.len();
    let n = ask.first().map_or(0, Vec::len);
    if ask.iter().any(|r| r.len() != n) || bid.len() != t || bid.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err(
            "ask and bid must be rectangular matrices of the same shape",
        ));
    }
    let grid = GridSpec::new(dt, dx, t, n).map_err(py_err)?;
    let flat_ask: Vec<f64> = ask.into_iter().flatten().collect();
    let flat_bid: Vec<f64> = bid.into_iter().flatten().collect();
    OrderBookDataset::new(
        ndarray::Array2::from_shape_vec((t, n), flat_ask)
            .map_err(|e| PyValueError::new_err(e.to_string()))?,
        ndarray::Array2::from_shape_vec((t, n), flat_bid)
            .map_err(|e| PyValueError::new_err(e.to_string()))?,
        ndarray::Array1::from_vec(mid),
        grid,
    )
    .map_err(py_err)
}

/// Run both estimation stages on in-memory matrices and return the fit
/// report as a JSON string.
#[pyfunction]
#[pyo3(signature = (ask, bid, mid, dt, dx, theta0 = 1.0, stage1_degrees = (1, 10), stage2_degrees = (0, 4), restarts = 5, restart_seed = 0))]
#[allow(clippy::too_many_arguments)]
fn estimate(
    ask: Vec<Vec<f64>>,
    bid: Vec<Vec<f64>>,
    mid: Vec<f64>,
    dt: f64,
    dx: f64,
    theta0: f64,
    stage1_degrees: (usize, usize),
    stage2_degrees: (usize, usize),
    restarts: usize,
    restart_seed: u64,
) -> PyResult<String> {
    let dataset = dataset_from_lists(ask, bid, mid, dt, dx)?;
    let config = EstimationConfig {
        degree_range_stage1: stage1_degrees,
        degree_range_stage2: stage2_degrees,
        theta0,
        restarts,
        restart_seed,
        ..Default::default()
    };
    config.validate().map_err(py_err)?;
    let stage1_ask =
        select_stage1_aic(&dataset.ask, Side::Ask, &dataset.grid, &config).map_err(py_err)?;
    let stage1_bid =
        select_stage1_aic(&dataset.bid, Side::Bid, &dataset.grid, &config).map_err(py_err)?;
    let stage2 = fit_stage2(&dataset, &stage1_ask, &stage1_bid, &config).map_err(py_err)?;
    let report = serde_json::json!({
        "stage1_ask": stage1_ask,
        "stage1_bid": stage1_bid,
        "stage2": stage2,
    });
    serde_json::to_string(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Solve the static limit-buy problem on a book snapshot (one ask row in
/// volume units) and return the decision as a JSON string.
#[pyfunction]
#[pyo3(signature = (ask_row, mid, dx, model, wealth, utility = "log", delta = 0.0, a = 1.0, b = 1.0, time = 0.0, foc_tol = 1e-9))]
#[allow(clippy::too_many_arguments)]
fn optimize(
    ask_row: Vec<f64>,
    mid: f64,
    dx: f64,
    model: &Model,
    wealth: f64,
    utility: &str,
    delta: f64,
    a: f64,
    b: f64,
    time: f64,
    foc_tol: f64,
) -> PyResult<String> {
    let n = ask_row.len();
    let grid = GridSpec::new(1e-3, dx, 2, n).map_err(py_err)?;
    let book = BookState {
        ask_rel: ask_row.iter().map(|v| v / dx).collect(),
        bid_rel: vec![0.0; n],
        mid,
        time,
    };
    let utility = match utility {
        "log" => UtilityModel::new_log(delta, a, b).map_err(py_err)?,
        "linear" => UtilityModel::new_linear(delta, a, b).map_err(py_err)?,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown utility family {other:?}; expected \"log\" or \"linear\""
            )))
        }
    };
    let problem =
        InvestorProblem::new(wealth, time, book, model.inner.clone(), grid).map_err(py_err)?;
    let decision = static_optimal(&problem, &utility, foc_tol).map_err(py_err)?;
    let signal = match decision.signal {
        TimingSignal::BuyNow => "BuyNow",
        TimingSignal::EvaluateFurther => "EvaluateFurther",
    };
    let value = serde_json::json!({
        "b_star": decision.b_star,
        "asset": decision.asset,
        "consumption": decision.consumption,
        "du_drift": decision.du_drift,
        "signal": signal,
        "foc_residual": decision.foc_residual,
    });
    serde_json::to_string(&value).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Noise amplitude `x^1.6 / (1 + x p(x))` for coefficients lowest
/// degree first.
#[pyfunction]
fn sigma_eval(coeffs: Vec<f64>, x: f64) -> PyResult<f64> {
    ScalingSpec::new(coeffs)
        .and_then(|s| s.eval(x))
        .map_err(py_err)
}

/// Initial profile `x q(x) exp(-gamma x)`.
#[pyfunction]
fn u0_eval(coeffs: Vec<f64>, gamma: f64, x: f64) -> PyResult<f64> {
    Ok(InitialConditionSpec::new(coeffs, gamma)
        .map_err(py_err)?
        .eval(x))
}

/// Image-method reference solution of the absorbed half-line heat
/// equation, the verification oracle for the deterministic solver.
#[pyfunction]
fn halfline_heat(coeffs: Vec<f64>, gamma: f64, alpha: f64, t: f64, x: f64) -> PyResult<f64> {
    let u0 = InitialConditionSpec::new(coeffs, gamma).map_err(py_err)?;
    reference_halfline_heat(&u0, alpha, t, x).map_err(py_err)
}

#[pymodule]
fn stefan_lob(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Grid>()?;
    m.add_class::<Model>()?;
    m.add_class::<SimResult>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(solve_deterministic, m)?)?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(optimize, m)?)?;
    m.add_function(wrap_pyfunction!(sigma_eval, m)?)?;
    m.add_function(wrap_pyfunction!(u0_eval, m)?)?;
    m.add_function(wrap_pyfunction!(halfline_heat, m)?)?;
    Ok(())
}
