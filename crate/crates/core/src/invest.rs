//! Limit-buy decision tools over a book snapshot.
//!
//! Given a utility `U(t, L, C)` of asset amount and consumption, the
//! statically optimal limit price offset `B*` satisfies the first order
//! condition `S* + B* = U_L / U_C`: the highest price worth paying per
//! unit of asset equals the marginal rate of substitution. Around that
//! optimum the expected instantaneous utility drift decomposes into a
//! time-discount term, a book-shape term
//! `alpha_A [V_A(S* + B) - B dV_A/dS(S*)]`, and two risk-aversion terms
//! weighted by integrals of the squared noise scaling. Comparing the
//! chord slope `V_A(S* + B*) / B*` against the boundary slope gives the
//! buy-now / keep-evaluating signal.

use serde::{Deserialize, Serialize};

use crate::model::{GridSpec, ModelParams, ScalingSpec};
use crate::num::{adaptive_simpson, brent_root, golden_max};
use crate::sim::BookState;
use crate::{Error, Result};

/// Built-in utility families. Both are monotone increasing and weakly
/// concave in the asset and consumption arguments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum UtilityModel {
    /// `U = exp(-delta t) (a ln L + b ln C)` with `a, b > 0`, `delta >= 0`.
    DiscountedLog { delta: f64, a: f64, b: f64 },
    /// `U = exp(-delta t) (a L + b C)`, the risk-neutral family.
    DiscountedLinear { delta: f64, a: f64, b: f64 },
}

/// All first and second partials of the utility at one point.
#[derive(Debug, Clone, Copy)]
pub struct UtilityPartials {
    pub u: f64,
    pub u_t: f64,
    pub u_l: f64,
    pub u_c: f64,
    pub u_ll: f64,
    pub u_cc: f64,
}

impl UtilityModel {
    pub fn new_log(delta: f64, a: f64, b: f64) -> Result<Self> {
        Self::validate_weights(delta, a, b)?;
        Ok(Self::DiscountedLog { delta, a, b })
    }

    pub fn new_linear(delta: f64, a: f64, b: f64) -> Result<Self> {
        Self::validate_weights(delta, a, b)?;
        Ok(Self::DiscountedLinear { delta, a, b })
    }

    fn validate_weights(delta: f64, a: f64, b: f64) -> Result<()> {
        if !(a > 0.0) || !(b > 0.0) || !(delta >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "utility weights need a > 0, b > 0, delta >= 0; got a = {a}, b = {b}, delta = {delta}"
            )));
        }
        Ok(())
    }

    pub fn eval(&self, t: f64, l: f64, c: f64) -> f64 {
        match *self {
            Self::DiscountedLog { delta, a, b } => {
                (-delta * t).exp() * (a * l.ln() + b * c.ln())
            }
            Self::DiscountedLinear { delta, a, b } => (-delta * t).exp() * (a * l + b * c),
        }
    }

    pub fn partials(&self, t: f64, l: f64, c: f64) -> UtilityPartials {
        match *self {
            Self::DiscountedLog { delta, a, b } => {
                let disc = (-delta * t).exp();
                let u = disc * (a * l.ln() + b * c.ln());
                UtilityPartials {
                    u,
                    u_t: -delta * u,
                    u_l: disc * a / l,
                    u_c: disc * b / c,
                    u_ll: -disc * a / (l * l),
                    u_cc: -disc * b / (c * c),
                }
            }
            Self::DiscountedLinear { delta, a, b } => {
                let disc = (-delta * t).exp();
                let u = disc * (a * l + b * c);
                UtilityPartials {
                    u,
                    u_t: -delta * u,
                    u_l: disc * a,
                    u_c: disc * b,
                    u_ll: 0.0,
                    u_cc: 0.0,
                }
            }
        }
    }

    /// Partials with the monotonicity and concavity invariants enforced
    /// at the queried point.
    pub fn checked_partials(&self, t: f64, l: f64, c: f64) -> Result<UtilityPartials> {
        let p = self.partials(t, l, c);
        if !(p.u_l > 0.0) || !p.u_l.is_finite() || !(p.u_c > 0.0) || !p.u_c.is_finite() {
            return Err(Error::UtilityInvariant(format!(
                "marginal utilities must be positive and finite at (t={t}, L={l}, C={c}): U_L = {}, U_C = {}",
                p.u_l, p.u_c
            )));
        }
        if !(p.u_ll <= 0.0) || !(p.u_cc <= 0.0) {
            return Err(Error::UtilityInvariant(format!(
                "second partials must be non-positive at (t={t}, L={l}, C={c}): U_LL = {}, U_CC = {}",
                p.u_ll, p.u_cc
            )));
        }
        Ok(p)
    }
}

/// A book snapshot with the investor's wealth and the model the book
/// came from (the ask diffusivity and noise scaling drive the drift).
#[derive(Debug, Clone)]
pub struct InvestorProblem {
    pub wealth: f64,
    pub time: f64,
    pub book: BookState,
    pub params: ModelParams,
    pub grid: GridSpec,
}

impl InvestorProblem {
    pub fn new(
        wealth: f64,
        time: f64,
        book: BookState,
        params: ModelParams,
        grid: GridSpec,
    ) -> Result<Self> {
        if !(wealth > 0.0) || !wealth.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "wealth must be positive and finite, got {wealth}"
            )));
        }
        if book.ask_rel.len() != grid.n_price {
            return Err(Error::ShapeMismatch(format!(
                "book has {} ask nodes but the grid declares {}",
                book.ask_rel.len(),
                grid.n_price
            )));
        }
        Ok(Self {
            wealth,
            time,
            book,
            params,
            grid,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimingSignal {
    BuyNow,
    EvaluateFurther,
}

/// Outcome of the static optimization plus the dynamic diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub b_star: f64,
    pub asset: f64,
    pub consumption: f64,
    pub du_drift: f64,
    pub signal: TimingSignal,
    pub foc_residual: f64,
}

/// Ask density at the boundary, linearly extrapolated from the first two
/// nodes and clamped at zero. A constant stored profile extends to its
/// own value; profiles vanishing linearly toward the mid extend to zero.
fn boundary_density(book: &BookState) -> f64 {
    (2.0 * book.ask_rel[0] - book.ask_rel[1]).max(0.0)
}

/// Piecewise-linear ask density at relative offset `x >= 0`, using the
/// extrapolated boundary value at `x = 0` and the replicated far value.
fn ask_density_at(book: &BookState, x: f64, dx: f64) -> f64 {
    let v = &book.ask_rel;
    let n = v.len();
    let s = x / dx;
    if s <= 0.0 {
        return boundary_density(book);
    }
    if s >= n as f64 {
        return v[n - 1];
    }
    let i = s.floor() as usize;
    let frac = s - i as f64;
    let lo = if i == 0 { boundary_density(book) } else { v[i - 1] };
    let hi = v[i];
    lo + frac * (hi - lo)
}

/// One-sided ask slope at the boundary, the same first difference the
/// simulator's Stefan condition uses.
fn boundary_slope(book: &BookState, dx: f64) -> f64 {
    book.ask_rel[0] / dx
}

fn check_in_book(b: f64, grid: &GridSpec) -> Result<()> {
    let span = grid.n_price as f64 * grid.dx;
    if !(b >= 0.0) || b > span * (1.0 + 1e-12) {
        return Err(Error::OutOfBook { b, span });
    }
    Ok(())
}

/// Amount of asset acquired by bidding up to `S* + B`: the trapezoidal
/// integral of the ask density over `[0, B]` in relative coordinates,
/// with linear interpolation at the off-grid endpoint. Exact for the
/// piecewise-linear density model.
pub fn asset_amount(book: &BookState, b: f64, grid: &GridSpec) -> Result<f64> {
    integrate_book(book, b, grid, |_, v| v, false)
}

/// Money spent acquiring that asset: the integral of `(S* + x) V_A`
/// over the same interval. The integrand is quadratic per cell under
/// the piecewise-linear density model, so each cell uses the three-point
/// rule; this keeps the cost integral exact and the first order
/// condition consistent with the maximizer of the discretized utility.
pub fn purchase_cost(book: &BookState, b: f64, grid: &GridSpec) -> Result<f64> {
    let mid = book.mid;
    integrate_book(book, b, grid, |x, v| (mid + x) * v, true)
}

fn integrate_book(
    book: &BookState,
    b: f64,
    grid: &GridSpec,
    f: impl Fn(f64, f64) -> f64,
    quadratic_rule: bool,
) -> Result<f64> {
    check_in_book(b, grid)?;
    let dx = grid.dx;
    let value_at = |x: f64| f(x, ask_density_at(book, x, dx));
    let mut total = 0.0;
    let mut covered = 0.0;
    let mut prev = value_at(0.0);
    let cell = |lo: f64, hi: f64, vlo: f64, vhi: f64| -> f64 {
        let w = hi - lo;
        if quadratic_rule {
            w / 6.0 * (vlo + 4.0 * value_at(0.5 * (lo + hi)) + vhi)
        } else {
            0.5 * (vlo + vhi) * w
        }
    };
    for i in 1..=grid.n_price {
        let x = i as f64 * dx;
        if x > b {
            break;
        }
        let cur = value_at(x);
        total += cell(covered, x, prev, cur);
        covered = x;
        prev = cur;
    }
    if b > covered {
        let cur = value_at(b);
        total += cell(covered, b, prev, cur);
    }
    Ok(total)
}

/// Consumption left after the purchase. Must stay strictly positive.
pub fn consumption(wealth: f64, cost: f64) -> Result<f64> {
    let c = wealth - cost;
    if !(c > 0.0) {
        return Err(Error::InfeasibleBudget { wealth, cost });
    }
    Ok(c)
}

/// Largest offset that keeps consumption strictly positive, found by
/// bisection on the monotone cost integral.
fn feasible_upper(problem: &InvestorProblem) -> Result<f64> {
    let span = problem.grid.n_price as f64 * problem.grid.dx;
    let budget = problem.wealth * (1.0 - 1e-9);
    if purchase_cost(&problem.book, span, &problem.grid)? <= budget {
        return Ok(span);
    }
    let (mut lo, mut hi) = (0.0, span);
    for _ in 0..200 {
        let m = 0.5 * (lo + hi);
        if purchase_cost(&problem.book, m, &problem.grid)? <= budget {
            lo = m;
        } else {
            hi = m;
        }
    }
    Ok(lo)
}

/// First order condition residual `g(B) = U_L - (S* + B) U_C` at the
/// bundle reached by bidding up to `S* + B`.
fn foc_residual(problem: &InvestorProblem, utility: &UtilityModel, b: f64) -> Result<f64> {
    let l = asset_amount(&problem.book, b, &problem.grid)?;
    let cost = purchase_cost(&problem.book, b, &problem.grid)?;
    let c = consumption(problem.wealth, cost)?;
    let p = utility.checked_partials(problem.time, l, c)?;
    Ok(p.u_l - (problem.book.mid + b) * p.u_c)
}

fn utility_at(problem: &InvestorProblem, utility: &UtilityModel, b: f64) -> f64 {
    let Ok(l) = asset_amount(&problem.book, b, &problem.grid) else {
        return f64::NEG_INFINITY;
    };
    let Ok(cost) = purchase_cost(&problem.book, b, &problem.grid) else {
        return f64::NEG_INFINITY;
    };
    let Ok(c) = consumption(problem.wealth, cost) else {
        return f64::NEG_INFINITY;
    };
    let u = utility.eval(problem.time, l, c);
    if u.is_finite() {
        u
    } else {
        f64::NEG_INFINITY
    }
}

/// Statically optimal limit price offset: bracket the first order
/// condition and solve it by Brent's method, falling back to bounded
/// maximization of the utility when the residual never changes sign.
/// Returns the boundary decision `B* = 0` when even the first marginal
/// unit is not worth the mid-price.
pub fn static_optimal(
    problem: &InvestorProblem,
    utility: &UtilityModel,
    tol: f64,
) -> Result<Decision> {
    let grid = &problem.grid;
    let b_max = feasible_upper(problem)?;
    if b_max <= 0.0 {
        return Err(Error::InfeasibleBudget {
            wealth: problem.wealth,
            cost: 0.0,
        });
    }
    let b_lo = (1e-9 * grid.dx).min(0.5 * b_max);

    let g = |b: f64| foc_residual(problem, utility, b);

    // Boundary case: not worth buying even at the mid.
    let g_lo = g(b_lo);
    if let Ok(v) = g_lo {
        if v < 0.0 {
            return build_decision(problem, utility, 0.0, v);
        }
    }

    // Scan for a sign change of the residual.
    let samples = 128;
    let mut bracket = None;
    let mut prev = (b_lo, g_lo.unwrap_or(f64::INFINITY));
    for k in 1..=samples {
        let b = b_lo + (b_max - b_lo) * k as f64 / samples as f64;
        let Ok(gb) = g(b) else { continue };
        if prev.1.is_finite() && prev.1 >= 0.0 && gb <= 0.0 {
            bracket = Some((prev.0, b));
            break;
        }
        prev = (b, gb);
    }

    let b_star = match bracket {
        Some((a, b)) => brent_root(
            |x| g(x).unwrap_or(f64::NEG_INFINITY),
            a,
            b,
            1e-13 * (1.0 + b_max),
        )?,
        // No sign change: maximize the utility directly on the bracket.
        None => golden_max(
            |b| utility_at(problem, utility, b),
            b_lo,
            b_max,
            1e-12 * (1.0 + b_max),
        ),
    };

    let residual = g(b_star)?;
    let l = asset_amount(&problem.book, b_star, grid)?;
    let cost = purchase_cost(&problem.book, b_star, grid)?;
    let c = consumption(problem.wealth, cost)?;
    let p = utility.checked_partials(problem.time, l, c)?;
    if bracket.is_some() && residual.abs() > tol * (p.u_l.abs() + p.u_c.abs()) {
        return Err(Error::Numerical(format!(
            "first order condition not met at B = {b_star}: residual {residual}"
        )));
    }
    build_decision(problem, utility, b_star, residual)
}

fn build_decision(
    problem: &InvestorProblem,
    utility: &UtilityModel,
    b_star: f64,
    residual: f64,
) -> Result<Decision> {
    let l = asset_amount(&problem.book, b_star, &problem.grid)?;
    let cost = purchase_cost(&problem.book, b_star, &problem.grid)?;
    let c = consumption(problem.wealth, cost)?;
    let drift = expected_du_dt(problem, utility, b_star)?;
    let signal = if b_star > 0.0 {
        timing_signal(&problem.book, b_star, &problem.grid)
    } else {
        TimingSignal::EvaluateFurther
    };
    Ok(Decision {
        b_star,
        asset: l,
        consumption: c,
        du_drift: drift,
        signal,
        foc_residual: residual,
    })
}

/// Integral of the squared noise scaling over `[0, b]`, to 1e-8 absolute.
pub fn sigma_sq_integral(spec: &ScalingSpec, b: f64) -> Result<f64> {
    adaptive_simpson(
        |s| spec.eval(s).map(|v| v * v).unwrap_or(f64::NAN),
        0.0,
        b,
        1e-9,
    )
}

/// Integral of `(mid + s)^2 sigma(s)^2` over `[0, b]`, to 1e-8 absolute.
pub fn weighted_sigma_sq_integral(spec: &ScalingSpec, mid: f64, b: f64) -> Result<f64> {
    adaptive_simpson(
        |s| {
            let z = mid + s;
            spec.eval(s).map(|v| z * z * v * v).unwrap_or(f64::NAN)
        },
        0.0,
        b,
        1e-9,
    )
}

/// Expected instantaneous utility drift at offset `b`, evaluated at the
/// bundle the static optimum buys:
///
/// `U_t + U_C { alpha_A [V_A(S*+b) - b dV_A/dS(S*)]
///   - (1/2) r_L (S*+b) int_0^b sigma^2 - (1/2) r_C int_0^b (S*+s)^2 sigma^2 }`
///
/// with `r_L = -U_LL / U_L` and `r_C = -U_CC / U_C` the absolute risk
/// aversions. Meaningful at the static optimum, where the first order
/// condition was used to collapse the asset-side terms.
pub fn expected_du_dt(problem: &InvestorProblem, utility: &UtilityModel, b: f64) -> Result<f64> {
    check_in_book(b, &problem.grid)?;
    let l = asset_amount(&problem.book, b, &problem.grid)?;
    let cost = purchase_cost(&problem.book, b, &problem.grid)?;
    let c = consumption(problem.wealth, cost)?;
    let p = utility.checked_partials(problem.time, l, c)?;
    let r_l = -p.u_ll / p.u_l;
    let r_c = -p.u_cc / p.u_c;

    let mid = problem.book.mid;
    let v_at_b = ask_density_at(&problem.book, b, problem.grid.dx);
    let slope0 = boundary_slope(&problem.book, problem.grid.dx);
    let int_plain = sigma_sq_integral(&problem.params.sigma_ask, b)?;
    let int_weighted = weighted_sigma_sq_integral(&problem.params.sigma_ask, mid, b)?;

    Ok(p.u_t
        + p.u_c
            * (problem.params.alpha_ask * (v_at_b - b * slope0)
                - 0.5 * r_l * (mid + b) * int_plain
                - 0.5 * r_c * int_weighted))
}

/// The chord slope `V_A(S* + B) / B` and the one-sided boundary slope,
/// the two quantities the timing criterion compares.
pub fn chord_and_boundary_slope(book: &BookState, b: f64, grid: &GridSpec) -> (f64, f64) {
    let chord = if b > 0.0 {
        ask_density_at(book, b, grid.dx) / b
    } else {
        f64::INFINITY
    };
    (chord, boundary_slope(book, grid.dx))
}

/// Sample `(B, U(B), g(B))` over the feasible range, for plotting the
/// optimization landscape. Points where the utility is undefined are
/// skipped.
pub fn utility_curve(
    problem: &InvestorProblem,
    utility: &UtilityModel,
    samples: usize,
) -> Result<Vec<(f64, f64, f64)>> {
    let b_max = feasible_upper(problem)?;
    let b_lo = (1e-9 * problem.grid.dx).min(0.5 * b_max);
    let mut out = Vec::with_capacity(samples);
    for k in 0..samples {
        let b = b_lo + (b_max - b_lo) * k as f64 / (samples.max(2) - 1) as f64;
        let u = utility_at(problem, utility, b);
        let Ok(g) = foc_residual(problem, utility, b) else {
            continue;
        };
        if u.is_finite() && g.is_finite() {
            out.push((b, u, g));
        }
    }
    Ok(out)
}

/// The buy-now / keep-evaluating criterion: buy when the chord slope
/// `V_A(S* + B*) / B*` does not exceed the one-sided boundary slope
/// (equality included); then the drift of the utility is non-positive
/// and waiting cannot help.
pub fn timing_signal(book: &BookState, b_star: f64, grid: &GridSpec) -> TimingSignal {
    if b_star <= 0.0 {
        return TimingSignal::EvaluateFurther;
    }
    let v_at = ask_density_at(book, b_star, grid.dx);
    let slope = boundary_slope(book, grid.dx);
    if v_at <= b_star * slope {
        TimingSignal::BuyNow
    } else {
        TimingSignal::EvaluateFurther
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InitialConditionSpec;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sigma_px() -> ScalingSpec {
        ScalingSpec::new(vec![0.0, 1.0]).unwrap()
    }

    fn default_params() -> ModelParams {
        let u0 = InitialConditionSpec::new(vec![1.0], 1.0).unwrap();
        ModelParams::new(1.0, 1.0, sigma_px(), sigma_px(), u0.clone(), u0, 1.0).unwrap()
    }

    fn flat_book(density: f64, n: usize, mid: f64) -> BookState {
        BookState {
            ask_rel: vec![density; n],
            bid_rel: vec![density; n],
            mid,
            time: 0.0,
        }
    }

    fn grid(n: usize, dx: f64) -> GridSpec {
        GridSpec::new(1e-4, dx, 2, n).unwrap()
    }

    #[test]
    fn asset_amount_examples() {
        let g = grid(100, 0.05);
        let book = flat_book(1.0, 100, 0.0);
        assert_eq!(asset_amount(&book, 0.0, &g).unwrap(), 0.0);
        // constant density integrates to v * B, including off-grid ends
        for b in [0.04, 0.5, 1.0, 2.33] {
            assert_relative_eq!(asset_amount(&book, b, &g).unwrap(), b, max_relative = 1e-12);
        }
        assert!(matches!(
            asset_amount(&book, 100.0, &g),
            Err(Error::OutOfBook { .. })
        ));
    }

    #[test]
    fn purchase_cost_examples() {
        let g = grid(100, 0.05);
        let book = flat_book(2.0, 100, 0.0);
        assert_eq!(purchase_cost(&book, 0.0, &g).unwrap(), 0.0);
        for b in [0.3, 1.0, 1.7] {
            assert_relative_eq!(
                purchase_cost(&book, b, &g).unwrap(),
                2.0 * b * b / 2.0,
                max_relative = 1e-12
            );
        }
        // with a positive mid the cost dominates mid * asset
        let shifted = flat_book(2.0, 100, 1.5);
        let b = 1.2;
        let cost = purchase_cost(&shifted, b, &g).unwrap();
        let asset = asset_amount(&shifted, b, &g).unwrap();
        assert!(cost >= 1.5 * asset);
    }

    proptest! {
        #[test]
        fn asset_amount_is_monotone_in_b(
            seed in 0u64..1000,
            b1 in 0.01f64..4.0,
            b2 in 0.01f64..4.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let book = BookState {
                ask_rel: (0..90).map(|_| rng.random_range(0.0..3.0)).collect(),
                bid_rel: vec![0.0; 90],
                mid: 0.0,
                time: 0.0,
            };
            let g = grid(90, 0.05);
            let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
            let a_lo = asset_amount(&book, lo, &g).unwrap();
            let a_hi = asset_amount(&book, hi, &g).unwrap();
            prop_assert!(a_hi >= a_lo - 1e-12);
        }
    }

    #[test]
    fn consumption_examples() {
        assert_eq!(consumption(1.5, 0.5).unwrap(), 1.0);
        assert_eq!(consumption(2.0, 0.0).unwrap(), 2.0);
        assert!(matches!(
            consumption(1.0, 1.0),
            Err(Error::InfeasibleBudget { .. })
        ));
    }

    #[test]
    fn log_family_partials_match_finite_differences() {
        let u = UtilityModel::new_log(0.3, 1.4, 0.7).unwrap();
        let (t, l, c) = (0.5, 1.3, 2.1);
        let p = u.partials(t, l, c);
        let h = 1e-5;
        let fd_l = (u.eval(t, l + h, c) - u.eval(t, l - h, c)) / (2.0 * h);
        let fd_c = (u.eval(t, l, c + h) - u.eval(t, l, c - h)) / (2.0 * h);
        let fd_ll = (u.eval(t, l + h, c) - 2.0 * u.eval(t, l, c) + u.eval(t, l - h, c)) / (h * h);
        let fd_cc = (u.eval(t, l, c + h) - 2.0 * u.eval(t, l, c) + u.eval(t, l, c - h)) / (h * h);
        let fd_t = (u.eval(t + h, l, c) - u.eval(t - h, l, c)) / (2.0 * h);
        assert_relative_eq!(p.u_l, fd_l, max_relative = 1e-6);
        assert_relative_eq!(p.u_c, fd_c, max_relative = 1e-6);
        assert_relative_eq!(p.u_ll, fd_ll, max_relative = 1e-4);
        assert_relative_eq!(p.u_cc, fd_cc, max_relative = 1e-4);
        assert_relative_eq!(p.u_t, fd_t, max_relative = 1e-6);
    }

    fn problem_with(book: BookState, wealth: f64, n: usize, dx: f64) -> InvestorProblem {
        InvestorProblem::new(wealth, 0.0, book, default_params(), grid(n, dx)).unwrap()
    }

    #[test]
    fn static_optimum_closed_form_log_utility() {
        // U = ln L + ln C, unit density, S* = 0: B* = sqrt(2 W / 3)
        let u = UtilityModel::new_log(0.0, 1.0, 1.0).unwrap();
        for (wealth, expected) in [(1.5, 1.0), (0.15, 0.1f64.sqrt())] {
            let p = problem_with(flat_book(1.0, 200, 0.0), wealth, 200, 0.05);
            let d = static_optimal(&p, &u, 1e-10).unwrap();
            assert!(
                (d.b_star - expected).abs() < 1e-8,
                "W = {wealth}: B* = {} vs {expected}",
                d.b_star
            );
        }
        // the W = 1.5 fixture has L = C = 1 and the FOC reads 0 + 1 = 1
        let p = problem_with(flat_book(1.0, 200, 0.0), 1.5, 200, 0.05);
        let d = static_optimal(&p, &u, 1e-10).unwrap();
        assert_relative_eq!(d.asset, 1.0, epsilon = 1e-8);
        assert_relative_eq!(d.consumption, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn static_optimum_beats_grid_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        let mut tested = 0;
        while tested < 25 {
            let n = 120;
            let dx = 0.05;
            let book = BookState {
                ask_rel: (0..n).map(|_| rng.random_range(0.2..2.0)).collect(),
                bid_rel: vec![0.0; n],
                mid: rng.random_range(0.0..0.5),
                time: 0.0,
            };
            let wealth = rng.random_range(0.5..4.0);
            let u = UtilityModel::new_log(
                rng.random_range(0.0..0.5),
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..2.0),
            )
            .unwrap();
            let p = problem_with(book, wealth, n, dx);
            let Ok(d) = static_optimal(&p, &u, 1e-9) else {
                continue;
            };
            tested += 1;
            let u_star = utility_at(&p, &u, d.b_star);
            let b_hi = feasible_upper(&p).unwrap();
            let mut best_scan = f64::NEG_INFINITY;
            let mut b = 1e-4;
            while b < b_hi {
                best_scan = best_scan.max(utility_at(&p, &u, b));
                b += 1e-4;
            }
            assert!(
                best_scan <= u_star + 1e-8,
                "scan found {best_scan} vs optimum {u_star}"
            );
        }
    }

    #[test]
    fn boundary_decision_when_asset_not_worth_the_mid() {
        // linear utility with a/b < S* at B -> 0+: g(0+) < 0
        let u = UtilityModel::new_linear(0.0, 1.0, 1.0).unwrap();
        let book = flat_book(1.0, 100, 3.0);
        let p = problem_with(book, 2.0, 100, 0.05);
        let d = static_optimal(&p, &u, 1e-9).unwrap();
        assert_eq!(d.b_star, 0.0);
        assert_eq!(d.signal, TimingSignal::EvaluateFurther);
        assert_eq!(d.consumption, 2.0);
    }

    #[test]
    fn risk_neutral_linear_book_drift_vanishes() {
        let dx = 0.25;
        let n = 40;
        let slope = 0.8;
        let book = BookState {
            ask_rel: (0..n).map(|k| slope * (k as f64 + 1.0) * dx).collect(),
            bid_rel: vec![0.0; n],
            mid: 0.0,
            time: 0.0,
        };
        let u = UtilityModel::new_linear(0.0, 2.0, 1.0).unwrap();
        let p = problem_with(book, 10.0, n, dx);
        let drift = expected_du_dt(&p, &u, 1.3).unwrap();
        assert!(drift.abs() <= 1e-12, "drift = {drift}");
    }

    #[test]
    fn discounted_log_linear_book_drift_is_negative() {
        let dx = 0.25;
        let n = 40;
        let book = BookState {
            ask_rel: (0..n).map(|k| 0.5 * (k as f64 + 1.0) * dx).collect(),
            bid_rel: vec![0.0; n],
            mid: 0.2,
            time: 0.0,
        };
        let u = UtilityModel::new_log(0.2, 1.0, 1.0).unwrap();
        let p = problem_with(book, 10.0, n, dx);
        let drift = expected_du_dt(&p, &u, 1.0).unwrap();
        assert!(drift < 0.0, "drift = {drift}");
    }

    #[test]
    fn drift_is_linear_in_alpha() {
        let dx = 0.2;
        let n = 50;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let book = BookState {
            ask_rel: (0..n).map(|_| rng.random_range(0.2..1.5)).collect(),
            bid_rel: vec![0.0; n],
            mid: 0.3,
            time: 0.1,
        };
        let u = UtilityModel::new_log(0.1, 1.0, 1.0).unwrap();
        let base = problem_with(book.clone(), 8.0, n, dx);
        let mut doubled = base.clone();
        doubled.params.alpha_ask *= 2.0;
        let b = 0.9;
        let d1 = expected_du_dt(&base, &u, b).unwrap();
        let d2 = expected_du_dt(&doubled, &u, b).unwrap();

        let l = asset_amount(&book, b, &base.grid).unwrap();
        let c = consumption(8.0, purchase_cost(&book, b, &base.grid).unwrap()).unwrap();
        let p = u.checked_partials(base.time, l, c).unwrap();
        let bracket = ask_density_at(&book, b, dx) - b * boundary_slope(&book, dx);
        assert_relative_eq!(
            d2 - d1,
            p.u_c * base.params.alpha_ask * bracket,
            max_relative = 1e-10,
            epsilon = 1e-14
        );
    }

    #[test]
    fn risk_integrals_are_nondecreasing_in_b() {
        let spec = sigma_px();
        let mut prev_plain = 0.0;
        let mut prev_weighted = 0.0;
        for k in 1..=20 {
            let b = k as f64 * 0.2;
            let plain = sigma_sq_integral(&spec, b).unwrap();
            let weighted = weighted_sigma_sq_integral(&spec, 0.4, b).unwrap();
            assert!(plain >= prev_plain - 1e-12);
            assert!(weighted >= prev_weighted - 1e-12);
            prev_plain = plain;
            prev_weighted = weighted;
        }
    }

    #[test]
    fn timing_signal_shapes() {
        let dx = 0.25;
        let n = 40;
        let g = grid(n, dx);
        // concave book sqrt(x): chord below boundary slope
        let concave = BookState {
            ask_rel: (0..n).map(|k| ((k as f64 + 1.0) * dx).sqrt()).collect(),
            bid_rel: vec![0.0; n],
            mid: 0.0,
            time: 0.0,
        };
        assert_eq!(timing_signal(&concave, 2.0, &g), TimingSignal::BuyNow);

        // convex book x^2: chord above boundary slope
        let convex = BookState {
            ask_rel: (0..n).map(|k| ((k as f64 + 1.0) * dx).powi(2)).collect(),
            bid_rel: vec![0.0; n],
            mid: 0.0,
            time: 0.0,
        };
        assert_eq!(
            timing_signal(&convex, 2.0, &g),
            TimingSignal::EvaluateFurther
        );

        // linear book: exact equality counts as BuyNow
        let linear = BookState {
            ask_rel: (0..n).map(|k| (k as f64 + 1.0) * dx).collect(),
            bid_rel: vec![0.0; n],
            mid: 0.0,
            time: 0.0,
        };
        assert_eq!(timing_signal(&linear, 0.5, &g), TimingSignal::BuyNow);
    }

    #[test]
    fn buy_now_signal_implies_nonpositive_drift() {
        // discounted concave utilities: whenever the chord criterion
        // fires, the drift cannot be positive
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut checked = 0;
        let mut buy_now_seen = 0;
        while checked < 100 {
            let n = 80;
            let dx = 0.1;
            let book = BookState {
                ask_rel: (0..n)
                    .map(|k| {
                        let x = (k as f64 + 1.0) * dx;
                        rng.random_range(0.1..1.5) * x.sqrt() / (1.0 + 0.2 * x)
                    })
                    .collect(),
                bid_rel: vec![0.0; n],
                mid: rng.random_range(0.0..0.4),
                time: rng.random_range(0.0..1.0),
            };
            let u = UtilityModel::new_log(
                rng.random_range(0.01..0.6),
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..2.0),
            )
            .unwrap();
            let mut problem = problem_with(book, rng.random_range(1.0..6.0), n, dx);
            problem.params.alpha_ask = rng.random_range(0.1..2.0);
            problem.time = problem.book.time;
            let Ok(d) = static_optimal(&problem, &u, 1e-8) else {
                continue;
            };
            checked += 1;
            if d.signal == TimingSignal::BuyNow && d.b_star > 0.0 {
                buy_now_seen += 1;
                assert!(
                    d.du_drift <= 1e-12,
                    "BuyNow with positive drift {}",
                    d.du_drift
                );
            }
        }
        assert!(buy_now_seen > 10, "only {buy_now_seen} BuyNow cases");
    }
}
