//! Domain types shared by the solver, the estimators, and the investor
//! tools, plus the discrete difference operators.
//!
//! Conventions used throughout the crate:
//!
//! - Book fields are stored boundary-relative. A stored vector of length
//!   `N` holds volume *densities* at the nodes `x = dx, 2 dx, ..., N dx`
//!   measured from the mid-price; the Dirichlet value at `x = 0` is an
//!   implied ghost of `0` and is never stored.
//! - Dataset matrices hold cell *volumes* (density times `dx`); column
//!   `k` of a row corresponds to the node at `x = (k + 1) dx`.
//! - Polynomial coefficients are stored lowest degree first and are
//!   evaluated in nested (Horner) form.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::num::horner;
use crate::{Error, Result};

/// Exponent of the noise scaling family. A fixed model constant, not an
/// estimated parameter.
pub const SIGMA_EXPONENT: f64 = 1.6;

fn require_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(format!("{what} must be finite")));
    }
    Ok(())
}

/// Spatial noise amplitude `sigma(x) = x^1.6 / (1 + x p(x))` where `p`
/// is a polynomial of degree at least 1.
///
/// `sigma` vanishes at the boundary and, because `deg p >= 1`, decays to
/// zero far from it: order placement gets quieter away from the mid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingSpec {
    coeffs: Vec<f64>,
}

impl ScalingSpec {
    /// Coefficients of `p`, lowest degree first. Requires degree >= 1,
    /// i.e. at least two coefficients.
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "scaling polynomial must have degree >= 1, got {} coefficients",
                coeffs.len()
            )));
        }
        require_finite(&coeffs, "scaling coefficients")?;
        Ok(Self { coeffs })
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Evaluate `sigma(x)` for `x >= 0`. Fails where `1 + x p(x) <= 0`
    /// (the family is undefined there).
    pub fn eval(&self, x: f64) -> Result<f64> {
        if !(x >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma evaluated at negative x = {x}"
            )));
        }
        let denom = 1.0 + x * horner(&self.coeffs, x);
        if denom <= 0.0 {
            return Err(Error::SigmaDomain { x, denom });
        }
        Ok(x.powf(SIGMA_EXPONENT) / denom)
    }

    /// Reject specs that are singular or negative anywhere on the working
    /// grid `x = 0, dx, ..., n_price * dx`.
    pub fn validate_on_grid(&self, grid: &GridSpec) -> Result<()> {
        for k in 0..=grid.n_price {
            self.eval(k as f64 * grid.dx)?;
        }
        Ok(())
    }
}

/// Initial volume density `u0(x) = x q(x) exp(-gamma x)` with `q` a
/// polynomial and `gamma > 0`, so the profile vanishes at the boundary
/// and decays exponentially at infinity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialConditionSpec {
    coeffs: Vec<f64>,
    gamma: f64,
}

impl InitialConditionSpec {
    pub fn new(coeffs: Vec<f64>, gamma: f64) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::InvalidParameter(
                "initial condition polynomial needs at least one coefficient".into(),
            ));
        }
        require_finite(&coeffs, "initial condition coefficients")?;
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "decay rate gamma must be positive and finite, got {gamma}"
            )));
        }
        Ok(Self { coeffs, gamma })
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Evaluate `u0(x)`. `u0(0) = 0` by construction (leading factor x).
    pub fn eval(&self, x: f64) -> f64 {
        x * horner(&self.coeffs, x) * (-self.gamma * x).exp()
    }
}

/// The full exogenous parameter set of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub alpha_ask: f64,
    pub alpha_bid: f64,
    pub sigma_ask: ScalingSpec,
    pub sigma_bid: ScalingSpec,
    pub u0_ask: InitialConditionSpec,
    pub u0_bid: InitialConditionSpec,
    pub rho: f64,
}

impl ModelParams {
    /// Diffusivities must be non-negative (zero is the degenerate
    /// noise-only case used for calibration runs); the Stefan constant
    /// `rho` must be strictly positive.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        alpha_ask: f64,
        alpha_bid: f64,
        sigma_ask: ScalingSpec,
        sigma_bid: ScalingSpec,
        u0_ask: InitialConditionSpec,
        u0_bid: InitialConditionSpec,
        rho: f64,
    ) -> Result<Self> {
        for (name, a) in [("alpha_ask", alpha_ask), ("alpha_bid", alpha_bid)] {
            if !(a >= 0.0) || !a.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be non-negative and finite, got {a}"
                )));
            }
        }
        if !(rho > 0.0) || !rho.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "rho must be strictly positive and finite, got {rho}"
            )));
        }
        Ok(Self {
            alpha_ask,
            alpha_bid,
            sigma_ask,
            sigma_bid,
            u0_ask,
            u0_bid,
            rho,
        })
    }
}

/// Sampling grid: time step `dt`, log-price step `dx`, and the matrix
/// dimensions `n_time x n_price`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dt: f64,
    pub dx: f64,
    pub n_time: usize,
    pub n_price: usize,
}

impl GridSpec {
    pub fn new(dt: f64, dx: f64, n_time: usize, n_price: usize) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() || !(dx > 0.0) || !dx.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "grid steps must be positive and finite, got dt = {dt}, dx = {dx}"
            )));
        }
        if n_time < 1 {
            return Err(Error::InvalidParameter(
                "n_time must be at least 1".into(),
            ));
        }
        if n_price < 3 {
            return Err(Error::InvalidParameter(
                "n_price must be at least 3".into(),
            ));
        }
        Ok(Self {
            dt,
            dx,
            n_time,
            n_price,
        })
    }

    /// `alpha * dt / dx^2`, the explicit-scheme stability ratio.
    pub fn cfl_ratio(&self, alpha: f64) -> f64 {
        alpha * self.dt / (self.dx * self.dx)
    }

    /// Explicit diffusion is stable only for `alpha * dt / dx^2 <= 1/2`;
    /// checked at every solver entry.
    pub fn check_cfl(&self, alpha: f64) -> Result<()> {
        let ratio = self.cfl_ratio(alpha);
        if ratio > 0.5 + 1e-12 {
            return Err(Error::CflViolation { ratio });
        }
        Ok(())
    }
}

/// An order book dataset: ask and bid volume matrices in the
/// boundary-relative layout plus the log mid-price path.
///
/// Row `t` of `ask` covers prices `[mid[t], mid[t] + dx * n_price]`; row
/// `t` of `bid` covers `[mid[t] - dx * n_price, mid[t]]`, both stored
/// nearest-the-boundary first.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderBookDataset {
    pub ask: Array2<f64>,
    pub bid: Array2<f64>,
    pub mid: Array1<f64>,
    pub grid: GridSpec,
}

impl OrderBookDataset {
    pub fn new(
        ask: Array2<f64>,
        bid: Array2<f64>,
        mid: Array1<f64>,
        grid: GridSpec,
    ) -> Result<Self> {
        let (t, n) = ask.dim();
        if bid.dim() != (t, n) {
            return Err(Error::ShapeMismatch(format!(
                "ask is {}x{} but bid is {}x{}",
                t,
                n,
                bid.nrows(),
                bid.ncols()
            )));
        }
        if mid.len() != t {
            return Err(Error::ShapeMismatch(format!(
                "ask has {t} rows but mid has {} entries",
                mid.len()
            )));
        }
        if (t, n) != (grid.n_time, grid.n_price) {
            return Err(Error::ShapeMismatch(format!(
                "matrices are {}x{} but the grid declares {}x{}",
                t, n, grid.n_time, grid.n_price
            )));
        }
        for (name, m) in [("ask", &ask), ("bid", &bid)] {
            for ((row, col), &v) in m.indexed_iter() {
                if !v.is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "non-finite {name} volume at row {row}, column {col}"
                    )));
                }
                if v < 0.0 {
                    return Err(Error::NegativeVolume { row, col, value: v });
                }
            }
        }
        if mid.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite mid-price".into()));
        }
        Ok(Self {
            ask,
            bid,
            mid,
            grid,
        })
    }

    pub fn n_time(&self) -> usize {
        self.ask.nrows()
    }

    pub fn n_price(&self) -> usize {
        self.ask.ncols()
    }
}

/// Forward difference operator: `(a_1, ..., a_n) -> (a_2 - a_1, ..., a_n - a_{n-1})`.
pub fn nabla(v: &[f64]) -> Result<Vec<f64>> {
    if v.len() < 2 {
        return Err(Error::VectorTooShort {
            need: 2,
            got: v.len(),
        });
    }
    Ok(v.windows(2).map(|w| w[1] - w[0]).collect())
}

/// Second difference `out[i] = v[i+2] - 2 v[i+1] + v[i]`, computed as
/// the literal composition of [`nabla`] with itself so the two agree
/// bit for bit.
pub fn nabla2(v: &[f64]) -> Result<Vec<f64>> {
    if v.len() < 3 {
        return Err(Error::VectorTooShort {
            need: 3,
            got: v.len(),
        });
    }
    nabla(&nabla(v)?)
}
