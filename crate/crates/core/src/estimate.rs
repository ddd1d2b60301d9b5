//! Two-stage parameter estimation from order book matrices.
//!
//! Stage 1 fits, per book side, the diffusivity `alpha` and the noise
//! scaling polynomial `p` by minimizing the whitened sum of squared
//! scheme residuals (the -2 log likelihood of the Euler discretization),
//! selecting the polynomial degree by AIC = 2d + (-2 log likelihood).
//! With `alpha` pinned the problem is exactly quadratic in `p` and is
//! solved in closed form from the normal equations; the joint problem is
//! handled by a gradient-based minimizer with random restarts.
//!
//! Stage 2 fixes the stage-1 estimates and fits the initial profiles
//! `u0` (polynomial coefficients and decay rates) together with the
//! Stefan constant `rho` by minimizing `MSE1 + theta0 * MSE2`, where
//! MSE1 is the mean squared book error against the noise-free solve and
//! MSE2 is the mean squared residual of the discrete Stefan condition
//! (mid-price increments against the one-sided boundary slopes). Degrees
//! are chosen by minimizing `c_ask + c_bid + MSE`.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{
    GridSpec, InitialConditionSpec, ModelParams, OrderBookDataset, ScalingSpec, SIGMA_EXPONENT,
};
use crate::num::{bfgs, golden_max, horner, nelder_mead, BfgsOptions, NmOptions};
use crate::sim::{solve_deterministic, SimulationResult};
use crate::{Error, Result};

/// Penalty objective for stage-2 candidates whose solve fails or blows up.
const INFEASIBLE: f64 = 1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Ask,
    Bid,
}

/// One stage-1 fit at a fixed polynomial degree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegreeFit {
    pub degree: usize,
    pub alpha: f64,
    pub coeffs: Vec<f64>,
    pub neg2ll: f64,
    pub aic: f64,
}

/// Stage-1 output for one book side: the AIC-optimal fit plus the full
/// per-degree table it was selected from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Fit {
    pub side: Side,
    pub alpha_hat: f64,
    pub degree_hat: usize,
    pub p_hat: Vec<f64>,
    pub aic: f64,
    pub per_degree_table: Vec<DegreeFit>,
}

/// Stage-2 output: fitted initial profiles, the Stefan constant (absent
/// when `theta0 = 0` leaves it unidentified), the MSE breakdown, and the
/// selection objective `c_ask + c_bid + MSE1 + theta0 * MSE2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Fit {
    pub q_ask_hat: InitialConditionSpec,
    pub q_bid_hat: InitialConditionSpec,
    pub rho_hat: Option<f64>,
    pub mse1: f64,
    pub mse2: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimationConfig {
    /// Inclusive degree range searched in stage 1.
    pub degree_range_stage1: (usize, usize),
    /// Inclusive degree range searched in stage 2.
    pub degree_range_stage2: (usize, usize),
    /// Weight of the mid-price fit against the book fit. Zero disables
    /// the boundary term and leaves `rho` unidentified.
    pub theta0: f64,
    /// Relative tolerance of the continuous minimizers.
    pub optimizer_tol: f64,
    /// Random restarts per continuous fit, on top of the data-driven start.
    pub restarts: usize,
    /// Seed for the restart perturbations; fits are deterministic given
    /// the dataset, the config, and this seed.
    pub restart_seed: u64,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            degree_range_stage1: (1, 10),
            degree_range_stage2: (0, 4),
            theta0: 1.0,
            optimizer_tol: 1e-8,
            restarts: 5,
            restart_seed: 0,
        }
    }
}

impl EstimationConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo1, hi1) = self.degree_range_stage1;
        if lo1 < 1 || lo1 > hi1 {
            return Err(Error::InvalidParameter(format!(
                "stage-1 degree range must satisfy 1 <= lo <= hi, got {lo1}..={hi1}"
            )));
        }
        let (lo2, hi2) = self.degree_range_stage2;
        if lo2 > hi2 {
            return Err(Error::InvalidParameter(format!(
                "stage-2 degree range is empty: {lo2}..={hi2}"
            )));
        }
        if !(self.theta0 >= 0.0) || !self.theta0.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "theta0 must be non-negative and finite, got {}",
                self.theta0
            )));
        }
        if !(self.optimizer_tol > 0.0) {
            return Err(Error::InvalidParameter(
                "optimizer tolerance must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Scheme residuals `R[t, S] = nabla_t D[t, S] - alpha (dt/dx^2) nabla2_S D[t, S]`.
///
/// The output is `(T-1) x (N-2)`; entry `(t, j)` is centered on column
/// `j + 1` of `D` (it reads columns `j, j+1, j+2` of row `t` and column
/// `j + 1` of rows `t` and `t + 1`).
pub fn residual_field(d: &Array2<f64>, alpha: f64, grid: &GridSpec) -> Result<Array2<f64>> {
    let (t, n) = d.dim();
    if t < 2 {
        return Err(Error::ShapeMismatch(format!(
            "residual field needs at least 2 rows, got {t}"
        )));
    }
    if n < 3 {
        return Err(Error::ShapeMismatch(format!(
            "residual field needs at least 3 columns, got {n}"
        )));
    }
    let lam = grid.dt / (grid.dx * grid.dx);
    let mut out = Array2::zeros((t - 1, n - 2));
    for i in 0..t - 1 {
        for j in 0..n - 2 {
            let time_diff = d[[i + 1, j + 1]] - d[[i, j + 1]];
            let space_diff2 = d[[i, j + 2]] - 2.0 * d[[i, j + 1]] + d[[i, j]];
            out[[i, j]] = time_diff - alpha * lam * space_diff2;
        }
    }
    Ok(out)
}

/// Whitening weight for residual column `j`: the residual position is
/// `x = (j + 1) dx` and the weight is `(1 + x p(x)) / x^1.6`, i.e. one
/// over the scaling function there.
fn whitening_weight(p: &[f64], x: f64) -> f64 {
    (1.0 + x * horner(p, x)) / x.powf(SIGMA_EXPONENT)
}

/// The -2 log likelihood of the Euler scheme: the sum over all residual
/// cells of the squared whitened residual. Non-negative, and zero
/// exactly when every residual vanishes.
pub fn neg2_loglik(d: &Array2<f64>, alpha: f64, p: &[f64], grid: &GridSpec) -> Result<f64> {
    if p.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "scaling polynomial must have degree >= 1, got {} coefficients",
            p.len()
        )));
    }
    let residuals = residual_field(d, alpha, grid)?;
    let n_cols = residuals.ncols();
    let weights: Vec<f64> = (0..n_cols)
        .map(|j| whitening_weight(p, (j as f64 + 1.0) * grid.dx))
        .collect();
    let mut total = 0.0;
    for i in 0..residuals.nrows() {
        for (j, w) in weights.iter().enumerate() {
            let z = residuals[[i, j]] * w;
            total += z * z;
        }
    }
    Ok(total)
}

/// Per-column sufficient statistics of the residual decomposition
/// `R = u - alpha v` with `u` the time differences and `v` the scaled
/// second space differences. The likelihood and its gradient only need
/// `sum u^2`, `sum u v`, `sum v^2` per column, which makes every
/// optimizer evaluation independent of the number of time rows.
struct ColumnStats {
    x: Vec<f64>,
    suu: Vec<f64>,
    suv: Vec<f64>,
    svv: Vec<f64>,
    /// residual rows per column, T - 1
    rows: f64,
    /// increment variance unit, dt * dx
    dtdx: f64,
}

impl ColumnStats {
    fn build(d: &Array2<f64>, grid: &GridSpec) -> Result<Self> {
        let (t, n) = d.dim();
        if t < 2 || n < 3 {
            return Err(Error::ShapeMismatch(format!(
                "need at least 2x3 data, got {t}x{n}"
            )));
        }
        let lam = grid.dt / (grid.dx * grid.dx);
        let cols = n - 2;
        let mut suu = vec![0.0; cols];
        let mut suv = vec![0.0; cols];
        let mut svv = vec![0.0; cols];
        for i in 0..t - 1 {
            for j in 0..cols {
                let u = d[[i + 1, j + 1]] - d[[i, j + 1]];
                let v = lam * (d[[i, j + 2]] - 2.0 * d[[i, j + 1]] + d[[i, j]]);
                suu[j] += u * u;
                suv[j] += u * v;
                svv[j] += v * v;
            }
        }
        let x = (0..cols).map(|j| (j as f64 + 1.0) * grid.dx).collect();
        Ok(Self {
            x,
            suu,
            suv,
            svv,
            rows: (t - 1) as f64,
            dtdx: grid.dt * grid.dx,
        })
    }

    /// Unweighted least-squares diffusivity, the natural starting point.
    fn alpha_least_squares(&self) -> f64 {
        let num: f64 = self.suv.iter().sum();
        let den: f64 = self.svv.iter().sum();
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    }

    fn nll_and_grad(&self, z: &[f64]) -> (f64, Vec<f64>) {
        let alpha = z[0];
        let p = &z[1..];
        let mut f = 0.0;
        let mut grad = vec![0.0; z.len()];
        for j in 0..self.x.len() {
            let x = self.x[j];
            let s = self.suu[j] - 2.0 * alpha * self.suv[j] + alpha * alpha * self.svv[j];
            let ds = -2.0 * self.suv[j] + 2.0 * alpha * self.svv[j];
            let inv16 = x.powf(-SIGMA_EXPONENT);
            let poly = 1.0 + x * horner(p, x);
            let w = poly * inv16;
            f += s * w * w;
            grad[0] += ds * w * w;
            let mut basis = x; // x^(m+1)
            for m in 0..p.len() {
                grad[1 + m] += s * 2.0 * w * inv16 * basis;
                basis *= x;
            }
        }
        (f, grad)
    }

    /// The normalized Gaussian -2 log likelihood and its gradient. The
    /// residual in cell `(t, j)` is modelled as `N(0, sigma(x_j)^2 dt dx)`,
    /// so on top of the whitened quadratic there is a log-variance term;
    /// its barrier at `1 + x p(x) -> 0+` is what rules out the
    /// whitening-collapse solutions the plain sum of squares admits.
    /// Returns +infinity outside the `sigma > 0` domain.
    fn gaussian_nll_and_grad(&self, z: &[f64]) -> (f64, Vec<f64>) {
        let alpha = z[0];
        let p = &z[1..];
        let mut f = 0.0;
        let mut grad = vec![0.0; z.len()];
        let log_norm = (2.0 * std::f64::consts::PI * self.dtdx).ln();
        for j in 0..self.x.len() {
            let x = self.x[j];
            let inv16 = x.powf(-SIGMA_EXPONENT);
            let poly = 1.0 + x * horner(p, x);
            if poly <= 0.0 {
                return (f64::INFINITY, vec![0.0; z.len()]);
            }
            let w = poly * inv16;
            let s = self.suu[j] - 2.0 * alpha * self.suv[j] + alpha * alpha * self.svv[j];
            let ds = -2.0 * self.suv[j] + 2.0 * alpha * self.svv[j];
            f += s * w * w / self.dtdx - 2.0 * self.rows * w.ln() + self.rows * log_norm;
            grad[0] += ds * w * w / self.dtdx;
            let coeff = 2.0 * s * w / self.dtdx - 2.0 * self.rows / w;
            let mut basis = x; // x^(m+1)
            for m in 0..p.len() {
                grad[1 + m] += coeff * inv16 * basis;
                basis *= x;
            }
        }
        (f, grad)
    }

    /// Starting coefficients for the Gaussian fit: match the whitening
    /// factor to the per-column sample standard deviations by linear
    /// least squares.
    fn gaussian_start_coeffs(&self, alpha: f64, degree: usize) -> Vec<f64> {
        let cols = self.x.len();
        let mut target = Vec::with_capacity(cols);
        for j in 0..cols {
            let s = (self.suu[j] - 2.0 * alpha * self.suv[j] + alpha * alpha * self.svv[j])
                .max(0.0);
            let sample_var = s / (self.rows * self.dtdx);
            let w = if sample_var > 1e-300 {
                1.0 / sample_var.sqrt()
            } else {
                1.0
            };
            // want 1 + x p(x) = w x^1.6, i.e. x p(x) = w x^1.6 - 1
            target.push(w * self.x[j].powf(SIGMA_EXPONENT) - 1.0);
        }
        let design = DMatrix::from_fn(cols, degree + 1, |j, m| self.x[j].powi(m as i32 + 1));
        let rhs = DVector::from_vec(target);
        match design.svd(true, true).solve(&rhs, 1e-12) {
            Ok(sol) if sol.iter().all(|v| v.is_finite()) => sol.as_slice().to_vec(),
            _ => vec![0.0; degree + 1],
        }
    }

    /// Pull a start back inside the `sigma > 0` domain by shrinking the
    /// polynomial toward zero, which is always feasible.
    fn make_feasible(&self, z: &mut [f64]) {
        for _ in 0..60 {
            if self.gaussian_nll_and_grad(z).0.is_finite() {
                return;
            }
            for c in z[1..].iter_mut() {
                *c *= 0.5;
            }
        }
        for c in z[1..].iter_mut() {
            *c = 0.0;
        }
    }

    /// Exact minimizer of the likelihood over `p` at fixed `alpha`, from
    /// the normal equations of the quadratic objective.
    fn degenerate_coeffs(&self, alpha: f64, degree: usize) -> Result<Vec<f64>> {
        let dim = degree + 1;
        // per-column squared whitened residual mass at p = 0
        let w2: Vec<f64> = (0..self.x.len())
            .map(|j| {
                let s = self.suu[j] - 2.0 * alpha * self.suv[j] + alpha * alpha * self.svv[j];
                s.max(0.0) * self.x[j].powf(-2.0 * SIGMA_EXPONENT)
            })
            .collect();
        let mut a = DMatrix::<f64>::zeros(dim, dim);
        let mut b = DVector::<f64>::zeros(dim);
        for (j, &wj) in w2.iter().enumerate() {
            let x = self.x[j];
            let mut phi = Vec::with_capacity(dim);
            let mut basis = x;
            for _ in 0..dim {
                phi.push(basis);
                basis *= x;
            }
            for m in 0..dim {
                b[m] += wj * phi[m];
                for n in 0..dim {
                    a[(m, n)] += wj * phi[m] * phi[n];
                }
            }
        }
        if a.iter().any(|v| !v.is_finite()) || b.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularSystem(
                "non-finite normal equations (degenerate data)".into(),
            ));
        }
        let rhs = -b;
        if let Some(sol) = a.clone().lu().solve(&rhs) {
            if sol.iter().all(|v| v.is_finite()) {
                return Ok(sol.as_slice().to_vec());
            }
        }
        // Rank-deficient data (for instance a single informative cell):
        // fall back to the minimum-norm solution, which still satisfies
        // the first order condition.
        let svd = a.svd(true, true);
        let sol = svd
            .solve(&rhs, 1e-12)
            .map_err(|e| Error::SingularSystem(e.to_string()))?;
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularSystem(
                "normal equations unsolvable (degenerate data)".into(),
            ));
        }
        Ok(sol.as_slice().to_vec())
    }
}

/// Closed-form stage-1 coefficients when the diffusivity is a known
/// constant `alpha0`: the likelihood is exactly quadratic in `p`, so the
/// minimizer solves the normal equations `A p = -b`.
pub fn fit_stage1_degenerate(
    d: &Array2<f64>,
    alpha0: f64,
    degree: usize,
    grid: &GridSpec,
) -> Result<Vec<f64>> {
    if degree < 1 {
        return Err(Error::InvalidParameter(format!(
            "degree must be at least 1, got {degree}"
        )));
    }
    ColumnStats::build(d, grid)?.degenerate_coeffs(alpha0, degree)
}

/// Analytic gradient of [`neg2_loglik`] in `(alpha, p)`.
pub fn neg2_loglik_grad(
    d: &Array2<f64>,
    alpha: f64,
    p: &[f64],
    grid: &GridSpec,
) -> Result<(f64, Vec<f64>)> {
    if p.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "scaling polynomial must have degree >= 1, got {} coefficients",
            p.len()
        )));
    }
    let stats = ColumnStats::build(d, grid)?;
    let mut z = Vec::with_capacity(p.len() + 1);
    z.push(alpha);
    z.extend_from_slice(p);
    let (_, grad) = stats.nll_and_grad(&z);
    Ok((grad[0], grad[1..].to_vec()))
}

/// The normalized Gaussian -2 log likelihood of the scheme residuals,
/// `sum [ (R w)^2 / (dt dx) - 2 ln w + ln(2 pi dt dx) ]` with
/// `w = (1 + x p(x)) / x^1.6`. This is what the joint fitter minimizes:
/// unlike the plain whitened sum of squares, the log-variance term
/// penalizes blowing the modelled noise scale up, so the minimum sits at
/// the actual maximum-likelihood scaling instead of the degenerate
/// `1 + x p(x) -> 0` collapse. Returns +infinity where any grid column
/// has `1 + x p(x) <= 0`.
pub fn gaussian_neg2_loglik(
    d: &Array2<f64>,
    alpha: f64,
    p: &[f64],
    grid: &GridSpec,
) -> Result<f64> {
    if p.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "scaling polynomial must have degree >= 1, got {} coefficients",
            p.len()
        )));
    }
    let stats = ColumnStats::build(d, grid)?;
    let mut z = Vec::with_capacity(p.len() + 1);
    z.push(alpha);
    z.extend_from_slice(p);
    Ok(stats.gaussian_nll_and_grad(&z).0)
}

/// Joint maximum-likelihood fit of `(alpha, p)` at a fixed degree: BFGS
/// on [`gaussian_neg2_loglik`] with its analytic gradient, started from
/// the least-squares diffusivity and a whitening profile matched to the
/// per-column sample variances, plus random restarts. The reported value
/// is never above any start's value.
pub fn fit_stage1_fixed_degree(
    d: &Array2<f64>,
    degree: usize,
    grid: &GridSpec,
    config: &EstimationConfig,
) -> Result<DegreeFit> {
    if degree < 1 {
        return Err(Error::InvalidParameter(format!(
            "degree must be at least 1, got {degree}"
        )));
    }
    config.validate()?;
    let stats = ColumnStats::build(d, grid)?;
    let alpha_ls = stats.alpha_least_squares();

    // Noise-free data leaves the scaling unidentified and the Gaussian
    // likelihood unbounded (zero residual variance). Keep the exact
    // least-squares diffusivity and the minimum-norm whitening fit. The
    // threshold sits well above the cancellation floor of the compressed
    // sums but far below any genuine noise level.
    let data_scale: f64 = stats.suu.iter().sum();
    let resid_scale: f64 = stats
        .x
        .iter()
        .enumerate()
        .map(|(j, _)| {
            stats.suu[j] - 2.0 * alpha_ls * stats.suv[j] + alpha_ls * alpha_ls * stats.svv[j]
        })
        .sum();
    if resid_scale <= 1e-12 * (1.0 + data_scale) {
        let coeffs = stats
            .degenerate_coeffs(alpha_ls, degree)
            .unwrap_or_else(|_| vec![0.0; degree + 1]);
        let mut z = vec![alpha_ls];
        z.extend_from_slice(&coeffs);
        stats.make_feasible(&mut z);
        let neg2ll = stats.gaussian_nll_and_grad(&z).0;
        return Ok(DegreeFit {
            degree,
            alpha: alpha_ls,
            coeffs: z[1..].to_vec(),
            neg2ll,
            aic: 2.0 * degree as f64 + neg2ll,
        });
    }

    let seed = config
        .restart_seed
        .wrapping_add((degree as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, 0.7).expect("valid std dev");

    let opts = BfgsOptions {
        max_iter: 400,
        gtol: config.optimizer_tol,
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    for restart in 0..=config.restarts {
        let alpha0 = if restart == 0 {
            alpha_ls
        } else if alpha_ls.abs() > 1e-12 {
            alpha_ls * rng.sample::<f64, _>(jitter).exp()
        } else {
            rng.sample::<f64, _>(jitter)
        };
        let mut p0 = stats.gaussian_start_coeffs(alpha0, degree);
        if restart > 0 {
            for c in &mut p0 {
                *c += rng.sample::<f64, _>(jitter) * 0.3 * (1.0 + c.abs());
            }
        }
        let mut start = Vec::with_capacity(degree + 2);
        start.push(alpha0);
        start.extend_from_slice(&p0);
        stats.make_feasible(&mut start);
        let (z, f) = bfgs(&mut |z: &[f64]| stats.gaussian_nll_and_grad(z), &start, &opts);
        if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
            best = Some((f, z));
        }
    }
    let (neg2ll, z) = best.expect("at least one start");
    let alpha = z[0];
    let coeffs = z[1..].to_vec();
    Ok(DegreeFit {
        degree,
        alpha,
        coeffs,
        neg2ll,
        aic: 2.0 * degree as f64 + neg2ll,
    })
}

/// Run the fixed-degree fit over the configured degree range and select
/// the AIC minimizer, ties resolved toward the smaller degree. Fails
/// only if every degree fails.
pub fn select_stage1_aic(
    d: &Array2<f64>,
    side: Side,
    grid: &GridSpec,
    config: &EstimationConfig,
) -> Result<Stage1Fit> {
    config.validate()?;
    let (lo, hi) = config.degree_range_stage1;
    let attempts: Vec<(usize, Result<DegreeFit>)> = (lo..=hi)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|deg| (deg, fit_stage1_fixed_degree(d, deg, grid, config)))
        .collect();

    let mut table = Vec::new();
    let mut first_err = None;
    for (_, attempt) in attempts {
        match attempt {
            Ok(fit) => table.push(fit),
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    if table.is_empty() {
        return Err(
            first_err.unwrap_or_else(|| Error::Numerical("no degree could be fitted".into()))
        );
    }
    let best = table
        .iter()
        .min_by(|a, b| {
            a.aic
                .total_cmp(&b.aic)
                .then_with(|| a.degree.cmp(&b.degree))
        })
        .expect("non-empty table")
        .clone();
    Ok(Stage1Fit {
        side,
        alpha_hat: best.alpha,
        degree_hat: best.degree,
        p_hat: best.coeffs,
        aic: best.aic,
        per_degree_table: table,
    })
}

/// Mean squared book error against a noise-free solve, over both sides
/// and all cells: `(1 / 2TN) sum (D - Vbar)^2`.
pub fn mse_book(dataset: &OrderBookDataset, vbar: &SimulationResult) -> Result<f64> {
    let (t, n) = dataset.ask.dim();
    if vbar.dataset.ask.dim() != (t, n) {
        return Err(Error::ShapeMismatch(format!(
            "dataset is {t}x{n} but the solve produced {}x{}",
            vbar.dataset.n_time(),
            vbar.dataset.n_price()
        )));
    }
    let mut total = 0.0;
    for (a, b) in dataset.ask.iter().zip(vbar.dataset.ask.iter()) {
        total += (a - b) * (a - b);
    }
    for (a, b) in dataset.bid.iter().zip(vbar.dataset.bid.iter()) {
        total += (a - b) * (a - b);
    }
    Ok(total / (2.0 * t as f64 * n as f64))
}

/// Mean squared residual of the discrete Stefan condition: the dataset's
/// mid-price increments against the one-sided boundary slopes of the
/// noise-free solve, `(1/(T-1)) sum [rho nabla_t P / dt - slopes]^2`.
pub fn mse_boundary(dataset: &OrderBookDataset, vbar: &SimulationResult, rho: f64) -> Result<f64> {
    let t = dataset.n_time();
    if t < 2 {
        return Err(Error::ShapeMismatch(
            "boundary MSE needs at least two time rows".into(),
        ));
    }
    if vbar.dataset.n_time() != t {
        return Err(Error::ShapeMismatch(format!(
            "dataset has {t} rows but the solve produced {}",
            vbar.dataset.n_time()
        )));
    }
    let dt = dataset.grid.dt;
    let dx = dataset.grid.dx;
    let mut total = 0.0;
    for i in 0..t - 1 {
        let price_rate = (dataset.mid[i + 1] - dataset.mid[i]) / dt;
        // one-sided slopes of the solve at step i: ask minus bid in
        // relative coordinates (volumes -> density -> slope)
        let slopes = (vbar.dataset.ask[[i, 0]] - vbar.dataset.bid[[i, 0]]) / (dx * dx);
        let r = rho * price_rate - slopes;
        total += r * r;
    }
    Ok(total / (t - 1) as f64)
}

struct ComboFit {
    c_ask: usize,
    c_bid: usize,
    q_ask: Vec<f64>,
    gamma_ask: f64,
    q_bid: Vec<f64>,
    gamma_bid: f64,
    rho: Option<f64>,
    mse1: f64,
    mse2: f64,
    objective: f64,
}

/// Least-squares fit of `x q(x) exp(-gamma x)` to the first dataset row,
/// used as the data-driven start of the stage-2 search: the decay rate
/// is scanned on a log grid and refined by golden section, the
/// polynomial solved linearly at each candidate.
fn fit_initial_profile(volumes: &[f64], grid: &GridSpec, degree: usize) -> (Vec<f64>, f64) {
    let n = volumes.len();
    let xs: Vec<f64> = (0..n).map(|k| (k as f64 + 1.0) * grid.dx).collect();
    let target: Vec<f64> = volumes.iter().map(|v| v / grid.dx).collect();
    if target.iter().all(|v| v.abs() < 1e-300) {
        return (vec![0.0; degree + 1], 1.0);
    }

    let solve_q = |gamma: f64| -> Option<(Vec<f64>, f64)> {
        let design = DMatrix::from_fn(n, degree + 1, |k, m| {
            xs[k].powi(m as i32 + 1) * (-gamma * xs[k]).exp()
        });
        let rhs = DVector::from_column_slice(&target);
        let sol = design.clone().svd(true, true).solve(&rhs, 1e-13).ok()?;
        let resid = (&design * &sol - rhs).norm_squared();
        Some((sol.as_slice().to_vec(), resid))
    };

    // The residual in gamma is not unimodal when the polynomial has
    // enough freedom to partly compensate a wrong decay rate, so refine
    // by repeatedly zooming a dense log grid instead of a line search.
    let scan = |lo_log: f64, hi_log: f64, points: usize| -> Option<(f64, Vec<f64>, f64)> {
        let mut best: Option<(f64, Vec<f64>, f64)> = None;
        for k in 0..=points {
            let gamma = (lo_log + (hi_log - lo_log) * k as f64 / points as f64).exp();
            if let Some((q, rss)) = solve_q(gamma) {
                if best.as_ref().is_none_or(|(b, _, _)| rss < *b) {
                    best = Some((rss, q, gamma));
                }
            }
        }
        best
    };

    let (mut lo, mut hi) = (1e-2f64.ln(), 1e2f64.ln());
    let mut best: Option<(f64, Vec<f64>, f64)> = None;
    for level in 0..4 {
        let points = if level == 0 { 48 } else { 96 };
        let Some(hit) = scan(lo, hi, points) else {
            break;
        };
        let step = (hi - lo) / points as f64;
        lo = hit.2.ln() - step;
        hi = hit.2.ln() + step;
        if best.as_ref().is_none_or(|(b, _, _)| hit.0 < *b) {
            best = Some(hit);
        }
    }
    let Some((best_rss, best_q, best_gamma)) = best else {
        return (vec![0.0; degree + 1], 1.0);
    };
    let refined_log = golden_max(
        |lg: f64| {
            solve_q(lg.exp())
                .map(|(_, rss)| -rss)
                .unwrap_or(f64::NEG_INFINITY)
        },
        lo,
        hi,
        1e-13,
    );
    let gamma = refined_log.exp();
    match solve_q(gamma) {
        Some((q, rss)) if rss <= best_rss => (q, gamma),
        _ => (best_q, best_gamma),
    }
}

/// Least-squares Stefan constant from the dataset alone: regress the
/// observed one-sided slopes on the mid-price increments.
fn rho_least_squares(dataset: &OrderBookDataset) -> Option<f64> {
    let t = dataset.n_time();
    let dt = dataset.grid.dt;
    let dx = dataset.grid.dx;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..t - 1 {
        let g = (dataset.mid[i + 1] - dataset.mid[i]) / dt;
        let s = (dataset.ask[[i, 0]] - dataset.bid[[i, 0]]) / (dx * dx);
        num += s * g;
        den += g * g;
    }
    if den > 1e-300 && num / den > 0.0 {
        Some(num / den)
    } else {
        None
    }
}

struct Stage2Problem<'a> {
    dataset: &'a OrderBookDataset,
    alpha_ask: f64,
    alpha_bid: f64,
    sigma_ask: ScalingSpec,
    sigma_bid: ScalingSpec,
    theta0: f64,
    with_rho: bool,
    c_ask: usize,
    c_bid: usize,
}

impl Stage2Problem<'_> {
    fn dim(&self) -> usize {
        self.c_ask + 1 + self.c_bid + 1 + 2 + usize::from(self.with_rho)
    }

    fn unpack(&self, theta: &[f64]) -> Option<(InitialConditionSpec, InitialConditionSpec, f64)> {
        let na = self.c_ask + 1;
        let nb = self.c_bid + 1;
        let q_ask = theta[..na].to_vec();
        let q_bid = theta[na..na + nb].to_vec();
        let gamma_ask = theta[na + nb].exp();
        let gamma_bid = theta[na + nb + 1].exp();
        let rho = if self.with_rho {
            theta[na + nb + 2].exp()
        } else {
            1.0
        };
        if !gamma_ask.is_finite() || !gamma_bid.is_finite() || !rho.is_finite() || rho <= 0.0 {
            return None;
        }
        let u0_ask = InitialConditionSpec::new(q_ask, gamma_ask).ok()?;
        let u0_bid = InitialConditionSpec::new(q_bid, gamma_bid).ok()?;
        Some((u0_ask, u0_bid, rho))
    }

    /// MSE1 and MSE2 at a parameter vector, via one noise-free solve.
    fn mse_parts(&self, theta: &[f64]) -> Option<(f64, f64)> {
        let (u0_ask, u0_bid, rho) = self.unpack(theta)?;
        let params = ModelParams::new(
            self.alpha_ask,
            self.alpha_bid,
            self.sigma_ask.clone(),
            self.sigma_bid.clone(),
            u0_ask,
            u0_bid,
            rho,
        )
        .ok()?;
        let vbar = solve_deterministic(&params, &self.dataset.grid, self.dataset.mid[0]).ok()?;
        if vbar.truncated {
            return None;
        }
        let m1 = mse_book(self.dataset, &vbar).ok()?;
        let m2 = if self.with_rho {
            mse_boundary(self.dataset, &vbar, rho).ok()?
        } else {
            0.0
        };
        if !m1.is_finite() || !m2.is_finite() {
            return None;
        }
        Some((m1, m2))
    }
}

fn fit_stage2_combo(
    problem: &Stage2Problem<'_>,
    init_rho: Option<f64>,
    config: &EstimationConfig,
) -> Result<ComboFit> {
    let grid = &problem.dataset.grid;
    let row0_ask = problem.dataset.ask.row(0).to_vec();
    let row0_bid = problem.dataset.bid.row(0).to_vec();
    let (qa0, ga0) = fit_initial_profile(&row0_ask, grid, problem.c_ask);
    let (qb0, gb0) = fit_initial_profile(&row0_bid, grid, problem.c_bid);

    let mut start = Vec::with_capacity(problem.dim());
    start.extend_from_slice(&qa0);
    start.extend_from_slice(&qb0);
    start.push(ga0.ln());
    start.push(gb0.ln());
    if problem.with_rho {
        start.push(init_rho.unwrap_or(1.0).ln());
    }

    let mut memo: HashMap<Vec<u64>, f64> = HashMap::new();
    let theta0 = problem.theta0;
    let mut objective = |theta: &[f64]| -> f64 {
        let key: Vec<u64> = theta.iter().map(|v| v.to_bits()).collect();
        if let Some(&v) = memo.get(&key) {
            return v;
        }
        let value = match problem.mse_parts(theta) {
            Some((m1, m2)) => m1 + theta0 * m2,
            None => INFEASIBLE,
        };
        memo.insert(key, value);
        value
    };

    let dim = problem.dim();
    let steps: Vec<f64> = start.iter().map(|v| (0.1 * v.abs()).max(0.05)).collect();
    let opts = NmOptions {
        max_evals: 300 * dim + 600,
        ftol: 1e-13,
        xtol: 1e-10,
    };

    let seed = config.restart_seed.wrapping_add(
        (problem.c_ask as u64 * 31 + problem.c_bid as u64).wrapping_mul(0x517C_C1B7_2722_0A95),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, 0.3).expect("valid std dev");

    let mut best: Option<(f64, Vec<f64>)> = None;
    for restart in 0..=config.restarts {
        let x0: Vec<f64> = if restart == 0 {
            start.clone()
        } else {
            start
                .iter()
                .map(|v| v + rng.sample::<f64, _>(jitter) * (1.0 + v.abs()))
                .collect()
        };
        let (theta, value) = nelder_mead(&mut objective, &x0, &steps, &opts);
        if best.as_ref().is_none_or(|(bv, _)| value < *bv) {
            best = Some((value, theta));
        }
    }
    // tight polish around the best point
    let (coarse_value, coarse_best) = best.expect("at least one start");
    let polish_steps: Vec<f64> = coarse_best
        .iter()
        .map(|v| (0.005 * v.abs()).max(1e-4))
        .collect();
    let polish_opts = NmOptions {
        max_evals: 200 * dim + 400,
        ftol: 1e-16,
        xtol: 1e-13,
    };
    let (polished, polished_value) =
        nelder_mead(&mut objective, &coarse_best, &polish_steps, &polish_opts);
    let (value, theta) = if polished_value < coarse_value {
        (polished_value, polished)
    } else {
        (coarse_value, coarse_best)
    };
    if value >= INFEASIBLE {
        return Err(Error::Numerical(format!(
            "no feasible stage-2 candidate at degrees ({}, {})",
            problem.c_ask, problem.c_bid
        )));
    }

    let (m1, m2) = problem
        .mse_parts(&theta)
        .expect("best candidate was feasible");
    let na = problem.c_ask + 1;
    let nb = problem.c_bid + 1;
    let rho = problem.with_rho.then(|| theta[na + nb + 2].exp());
    Ok(ComboFit {
        c_ask: problem.c_ask,
        c_bid: problem.c_bid,
        q_ask: theta[..na].to_vec(),
        gamma_ask: theta[na + nb].exp(),
        q_bid: theta[na..na + nb].to_vec(),
        gamma_bid: theta[na + nb + 1].exp(),
        rho,
        mse1: m1,
        mse2: m2,
        objective: (problem.c_ask + problem.c_bid) as f64 + m1 + theta0 * m2,
    })
}

/// Stage 2: with the stage-1 diffusivities and scalings fixed, search
/// the degree grid and, per degree pair, minimize `MSE1 + theta0 * MSE2`
/// over the profile coefficients, decay rates, and (when `theta0 > 0`)
/// the Stefan constant, each candidate evaluated through one noise-free
/// solve. Returns the global minimizer of `c_ask + c_bid + MSE`.
pub fn fit_stage2(
    dataset: &OrderBookDataset,
    stage1_ask: &Stage1Fit,
    stage1_bid: &Stage1Fit,
    config: &EstimationConfig,
) -> Result<Stage2Fit> {
    config.validate()?;
    if dataset.n_time() < 2 {
        return Err(Error::ShapeMismatch(
            "stage 2 needs at least two time rows".into(),
        ));
    }
    dataset.grid.check_cfl(stage1_ask.alpha_hat)?;
    dataset.grid.check_cfl(stage1_bid.alpha_hat)?;
    if stage1_ask.alpha_hat < 0.0 || stage1_bid.alpha_hat < 0.0 {
        return Err(Error::InvalidParameter(
            "stage-1 diffusivity estimate is negative; cannot run the deterministic solver".into(),
        ));
    }
    let sigma_ask = ScalingSpec::new(stage1_ask.p_hat.clone())?;
    let sigma_bid = ScalingSpec::new(stage1_bid.p_hat.clone())?;
    let with_rho = config.theta0 > 0.0;
    let init_rho = if with_rho {
        rho_least_squares(dataset)
    } else {
        None
    };

    let (lo, hi) = config.degree_range_stage2;
    let combos: Vec<(usize, usize)> = (lo..=hi)
        .flat_map(|ca| (lo..=hi).map(move |cb| (ca, cb)))
        .collect();
    let fits: Vec<Result<ComboFit>> = combos
        .into_par_iter()
        .map(|(c_ask, c_bid)| {
            let problem = Stage2Problem {
                dataset,
                alpha_ask: stage1_ask.alpha_hat,
                alpha_bid: stage1_bid.alpha_hat,
                sigma_ask: sigma_ask.clone(),
                sigma_bid: sigma_bid.clone(),
                theta0: config.theta0,
                with_rho,
                c_ask,
                c_bid,
            };
            fit_stage2_combo(&problem, init_rho, config)
        })
        .collect();

    let mut best: Option<ComboFit> = None;
    let mut first_err = None;
    for fit in fits {
        match fit {
            Ok(f) => {
                let replace = match &best {
                    None => true,
                    Some(b) => f
                        .objective
                        .total_cmp(&b.objective)
                        .then((f.c_ask + f.c_bid).cmp(&(b.c_ask + b.c_bid)))
                        .then(f.c_ask.cmp(&b.c_ask))
                        .is_lt(),
                };
                if replace {
                    best = Some(f);
                }
            }
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    let best = match best {
        Some(b) => b,
        None => {
            return Err(
                first_err.unwrap_or_else(|| Error::Numerical("stage 2 found no feasible fit".into()))
            )
        }
    };
    Ok(Stage2Fit {
        q_ask_hat: InitialConditionSpec::new(best.q_ask, best.gamma_ask)?,
        q_bid_hat: InitialConditionSpec::new(best.q_bid, best.gamma_bid)?,
        rho_hat: best.rho,
        mse1: best.mse1,
        mse2: best.mse2,
        objective: (best.c_ask + best.c_bid) as f64 + best.mse1 + config.theta0 * best.mse2,
    })
}
