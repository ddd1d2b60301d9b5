//! Small numerical kernels used across the crate: Horner evaluation,
//! adaptive Simpson quadrature, Brent root finding, golden-section
//! maximization, Nelder-Mead, and BFGS with backtracking line search.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Nested polynomial evaluation, coefficients lowest degree first.
pub fn horner(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

fn simpson(fa: f64, fm: f64, fb: f64, h: f64) -> f64 {
    h / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive_simpson_rec<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
    converged: &mut bool,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(fa, flm, fm, m - a);
    let right = simpson(fm, frm, fb, b - m);
    let delta = left + right - whole;
    if delta.abs() <= 15.0 * tol || (b - a).abs() < 1e-14 {
        return left + right + delta / 15.0;
    }
    if depth == 0 {
        *converged = false;
        return left + right + delta / 15.0;
    }
    adaptive_simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1, converged)
        + adaptive_simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1, converged)
}

/// Adaptive Simpson quadrature of `f` on `[a, b]` to absolute tolerance
/// `tol`. Fails if the refinement limit is reached before the local
/// error estimates drop below the budget.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = simpson(fa, fm, fb, b - a);
    let mut converged = true;
    let value = adaptive_simpson_rec(&f, a, b, fa, fm, fb, whole, tol, 60, &mut converged);
    if !converged || !value.is_finite() {
        return Err(Error::QuadratureDidNotConverge { a, b });
    }
    Ok(value)
}

/// Brent's method for a root of `f` on a bracketing interval `[a, b]`.
pub fn brent_root<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, xtol: f64) -> Result<f64> {
    let (mut a, mut b) = (a, b);
    let mut fa = f(a);
    let mut fb = f(b);
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa * fb > 0.0 {
        return Err(Error::Numerical(format!(
            "root not bracketed on [{a}, {b}]: f(a) = {fa}, f(b) = {fb}"
        )));
    }
    let (mut c, mut fc) = (a, fa);
    let mut d = b - a;
    let mut e = d;
    for _ in 0..200 {
        if fb.abs() > fc.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol1 = 2.0 * f64::EPSILON * b.abs() + 0.5 * xtol;
        let xm = 0.5 * (c - b);
        if xm.abs() <= tol1 || fb == 0.0 {
            return Ok(b);
        }
        if e.abs() >= tol1 && fa.abs() > fb.abs() {
            // inverse quadratic interpolation / secant
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * xm * s;
                q = 1.0 - s;
            } else {
                let qq = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * xm * qq * (qq - r) - (b - a) * (r - 1.0));
                q = (qq - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            }
            p = p.abs();
            let min1 = 3.0 * xm * q - (tol1 * q).abs();
            let min2 = (e * q).abs();
            if 2.0 * p < min1.min(min2) {
                e = d;
                d = p / q;
            } else {
                d = xm;
                e = d;
            }
        } else {
            d = xm;
            e = d;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol1 {
            d
        } else {
            tol1.copysign(xm)
        };
        fb = f(b);
        if (fb > 0.0) == (fc > 0.0) {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
    }
    Ok(b)
}

/// Golden-section search for the maximizer of a unimodal `f` on `[a, b]`.
pub fn golden_max<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, xtol: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let (mut a, mut b) = (a, b);
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while (b - a).abs() > xtol {
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = f(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = f(x1);
        }
    }
    0.5 * (a + b)
}

#[derive(Debug, Clone)]
pub struct NmOptions {
    pub max_evals: usize,
    pub ftol: f64,
    pub xtol: f64,
}

impl Default for NmOptions {
    fn default() -> Self {
        Self {
            max_evals: 4000,
            ftol: 1e-12,
            xtol: 1e-10,
        }
    }
}

/// Nelder-Mead simplex minimization with the adaptive coefficients of
/// Gao and Han. Returns the best vertex found.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    f: &mut F,
    x0: &[f64],
    steps: &[f64],
    opts: &NmOptions,
) -> (Vec<f64>, f64) {
    let n = x0.len();
    assert!(n >= 1 && steps.len() == n);
    let nf = n as f64;
    let alpha = 1.0;
    let beta = 1.0 + 2.0 / nf;
    let gamma = 0.75 - 1.0 / (2.0 * nf);
    let delta = 1.0 - 1.0 / nf;

    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::MAX
        }
    };

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += if steps[i] != 0.0 { steps[i] } else { 1e-4 };
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| eval(v, &mut evals)).collect();

    loop {
        // order by value, best first
        let mut idx: Vec<usize> = (0..=n).collect();
        idx.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
        let ordered: Vec<Vec<f64>> = idx.iter().map(|&i| simplex[i].clone()).collect();
        let ordered_vals: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
        simplex = ordered;
        values = ordered_vals;

        let fbest = values[0];
        let fworst = values[n];
        let spread = fworst - fbest;
        let size = simplex[1..]
            .iter()
            .map(|v| {
                v.iter()
                    .zip(&simplex[0])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max)
            })
            .fold(0.0f64, f64::max);
        let scale = 1.0 + simplex[0].iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        if evals >= opts.max_evals
            || (spread <= opts.ftol * (1.0 + fbest.abs()) && size <= opts.xtol * scale)
        {
            return (simplex[0].clone(), values[0]);
        }

        let centroid: Vec<f64> = (0..n)
            .map(|k| simplex[..n].iter().map(|v| v[k]).sum::<f64>() / nf)
            .collect();
        let point = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n])
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };

        let xr = point(alpha);
        let fr = eval(&xr, &mut evals);
        if fr < values[0] {
            let xe = point(alpha * beta);
            let fe = eval(&xe, &mut evals);
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
        } else {
            let contracted = if fr < values[n] {
                point(alpha * gamma)
            } else {
                point(-gamma)
            };
            let fcon = eval(&contracted, &mut evals);
            if fcon < values[n].min(fr) {
                simplex[n] = contracted;
                values[n] = fcon;
            } else {
                // shrink toward the best vertex
                for i in 1..=n {
                    let v: Vec<f64> = simplex[i]
                        .iter()
                        .zip(&simplex[0])
                        .map(|(x, b)| b + delta * (x - b))
                        .collect();
                    values[i] = eval(&v, &mut evals);
                    simplex[i] = v;
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsOptions {
    pub max_iter: usize,
    pub gtol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 300,
            gtol: 1e-10,
        }
    }
}

/// BFGS minimization with an Armijo backtracking line search. `fg`
/// returns the value together with the gradient. Returns the best point
/// seen, which is never worse than the start.
pub fn bfgs<F: FnMut(&[f64]) -> (f64, Vec<f64>)>(
    fg: &mut F,
    x0: &[f64],
    opts: &BfgsOptions,
) -> (Vec<f64>, f64) {
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let (mut fx, g0) = fg(x.as_slice());
    let mut g = DVector::from_vec(g0);
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut best_x = x.clone();
    let mut best_f = fx;

    for _ in 0..opts.max_iter {
        if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
            break;
        }
        if g.amax() <= opts.gtol * (1.0 + fx.abs()) {
            break;
        }
        let mut dir = -(&h * &g);
        let mut slope = g.dot(&dir);
        if slope >= 0.0 {
            // not a descent direction; reset to steepest descent
            h = DMatrix::identity(n, n);
            dir = -g.clone();
            slope = g.dot(&dir);
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let cand = &x + t * &dir;
            let (fc, gc) = fg(cand.as_slice());
            if fc.is_finite() && fc <= fx + 1e-4 * t * slope {
                accepted = Some((cand, fc, DVector::from_vec(gc)));
                break;
            }
            t *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            break;
        };

        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            // standard inverse-Hessian BFGS update
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            h = &h + (sy + yhy) * rho * rho * (&s * s.transpose())
                - rho * (&hy * s.transpose() + &s * hy.transpose());
        } else {
            h = DMatrix::identity(n, n);
        }

        x = x_new;
        fx = f_new;
        g = g_new;
        if fx < best_f {
            best_f = fx;
            best_x = x.clone();
        }
    }

    (best_x.as_slice().to_vec(), best_f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn horner_matches_direct_evaluation() {
        let c = [2.0, -1.0, 0.5, 3.0];
        let x: f64 = 1.7;
        let direct: f64 = c
            .iter()
            .enumerate()
            .map(|(i, &ci)| ci * x.powi(i as i32))
            .sum();
        assert_relative_eq!(horner(&c, x), direct, max_relative = 1e-14);
    }

    #[test]
    fn simpson_known_integrals() {
        let v = adaptive_simpson(|x| x * x, 0.0, 1.0, 1e-10).unwrap();
        assert_relative_eq!(v, 1.0 / 3.0, epsilon = 1e-10);

        let v = adaptive_simpson(f64::sin, 0.0, std::f64::consts::PI, 1e-10).unwrap();
        assert_relative_eq!(v, 2.0, epsilon = 1e-9);

        let v = adaptive_simpson(|x| 4.0 / (1.0 + x * x), 0.0, 1.0, 1e-11).unwrap();
        assert_relative_eq!(v, std::f64::consts::PI, epsilon = 1e-10);
    }

    #[test]
    fn simpson_empty_interval() {
        assert_eq!(adaptive_simpson(|x| x, 2.0, 2.0, 1e-9).unwrap(), 0.0);
    }

    #[test]
    fn brent_finds_sqrt_two() {
        let r = brent_root(|x| x * x - 2.0, 0.0, 2.0, 1e-14).unwrap();
        assert_relative_eq!(r, 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn brent_rejects_unbracketed() {
        assert!(brent_root(|x| x * x + 1.0, -1.0, 1.0, 1e-12).is_err());
    }

    #[test]
    fn golden_max_quadratic() {
        let x = golden_max(|x| -(x - 0.3) * (x - 0.3), -1.0, 2.0, 1e-12);
        assert_relative_eq!(x, 0.3, epsilon = 1e-9);
    }

    #[test]
    fn nelder_mead_rosenbrock() {
        let mut f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            100.0 * (b - a * a).powi(2) + (1.0 - a).powi(2)
        };
        let opts = NmOptions {
            max_evals: 20000,
            ftol: 1e-14,
            xtol: 1e-12,
        };
        let (x, fx) = nelder_mead(&mut f, &[-1.2, 1.0], &[0.5, 0.5], &opts);
        assert!(fx < 1e-10, "fx = {fx}");
        assert_relative_eq!(x[0], 1.0, epsilon = 1e-4);
        assert_relative_eq!(x[1], 1.0, epsilon = 1e-4);
    }

    #[test]
    fn bfgs_quadratic_and_rosenbrock() {
        let mut quad = |x: &[f64]| {
            let f = (x[0] - 1.0).powi(2) + 10.0 * (x[1] + 2.0).powi(2);
            (f, vec![2.0 * (x[0] - 1.0), 20.0 * (x[1] + 2.0)])
        };
        let (x, f) = bfgs(&mut quad, &[5.0, 5.0], &BfgsOptions::default());
        assert!(f < 1e-16);
        assert_relative_eq!(x[0], 1.0, epsilon = 1e-7);
        assert_relative_eq!(x[1], -2.0, epsilon = 1e-7);

        let mut rosen = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let f = 100.0 * (b - a * a).powi(2) + (1.0 - a).powi(2);
            let g = vec![
                -400.0 * a * (b - a * a) - 2.0 * (1.0 - a),
                200.0 * (b - a * a),
            ];
            (f, g)
        };
        let (x, f) = bfgs(&mut rosen, &[-1.2, 1.0], &BfgsOptions::default());
        assert!(f < 1e-12, "f = {f}");
        assert_relative_eq!(x[0], 1.0, epsilon = 1e-5);
    }

    #[test]
    fn bfgs_never_worse_than_start() {
        let mut f = |x: &[f64]| {
            let v = (x[0].sin() * 3.0).exp() + x[0] * x[0] * 0.01;
            let g = vec![(x[0].sin() * 3.0).exp() * 3.0 * x[0].cos() + 0.02 * x[0]];
            (v, g)
        };
        let start = 2.3;
        let f0 = f(&[start]).0;
        let (_, fbest) = bfgs(&mut f, &[start], &BfgsOptions::default());
        assert!(fbest <= f0);
    }
}
