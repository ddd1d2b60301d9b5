//! Moving-boundary limit order book toolkit.
//!
//! The book is modelled as two volume-density fields, ask and bid, that
//! diffuse on either side of the mid-price and receive spatially scaled
//! noise; the mid-price itself moves according to a Stefan-type condition
//! driven by the one-sided volume slopes at the boundary. This crate
//! provides:
//!
//! - [`sim`]: an explicit finite-difference integrator for the coupled
//!   system, in stochastic and noise-free modes, plus an independent
//!   half-line heat-kernel reference solution for verification;
//! - [`estimate`]: two-stage parameter estimation from order book
//!   matrices (AIC/MLE for the diffusivities and noise scalings, then
//!   AIC/weighted least squares for the initial profiles and the Stefan
//!   constant);
//! - [`invest`]: the statically optimal limit-buy price, the expected
//!   instantaneous utility drift, and the buy-now/wait slope criterion;
//! - [`io`] and [`cli`]: CSV/JSON interchange and the `simulate`,
//!   `estimate`, `optimize` command-line entry points.

// Validation deliberately writes `!(x > 0.0)` so NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod estimate;
pub mod invest;
pub mod io;
pub mod model;
pub mod num;
pub mod sim;

pub use estimate::{EstimationConfig, Stage1Fit, Stage2Fit};
pub use invest::{Decision, InvestorProblem, TimingSignal, UtilityModel};
pub use model::{GridSpec, InitialConditionSpec, ModelParams, OrderBookDataset, ScalingSpec};
pub use sim::{BookState, SimulationConfig, SimulationResult};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("scaling function undefined at x = {x}: 1 + x*p(x) = {denom}")]
    SigmaDomain { x: f64, denom: f64 },

    #[error("vector too short: need at least {need} entries, got {got}")]
    VectorTooShort { need: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("CFL condition violated: alpha*dt/dx^2 = {ratio} > 1/2")]
    CflViolation { ratio: f64 },

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("quadrature did not converge on [{a}, {b}]")]
    QuadratureDidNotConverge { a: f64, b: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("boundary velocity blow-up: |dS*/dt| = {drift}")]
    Blowup { drift: f64 },

    #[error("infeasible budget: cost {cost} leaves no positive consumption out of wealth {wealth}")]
    InfeasibleBudget { wealth: f64, cost: f64 },

    #[error("limit price offset {b} outside the stored book span {span}")]
    OutOfBook { b: f64, span: f64 },

    #[error("utility invariant violated: {0}")]
    UtilityInvariant(String),

    #[error("negative volume at row {row}, column {col}: {value}")]
    NegativeVolume { row: usize, col: usize, value: f64 },

    #[error("parse error in {path} at line {line}, field {col}: {msg}")]
    Parse {
        path: String,
        line: usize,
        col: usize,
        msg: String,
    },

    #[error("missing configuration field: {0}")]
    MissingField(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
