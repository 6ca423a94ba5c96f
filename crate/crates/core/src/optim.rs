//! Small dense quasi-Newton minimizer used by the GP tail fit, the variogram
//! least-squares fit and the gradient-score fit.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop when the gradient infinity norm falls below this.
    pub grad_tol: f64,
    /// Stop when the relative objective decrease falls below this.
    pub f_tol: f64,
    /// Relative step for central finite-difference gradients.
    pub fd_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self { max_iter: 200, grad_tol: 1e-6, f_tol: 1e-10, fd_step: 1e-5 }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

/// Central finite-difference gradient.
pub fn fd_gradient<F>(f: &mut F, x: &[f64], step: f64) -> (Vec<f64>, usize)
where
    F: FnMut(&[f64]) -> f64,
{
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let h = step * x[i].abs().max(1.0);
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    (g, 2 * x.len())
}

/// Minimize `f` with BFGS, using finite-difference gradients.
pub fn minimize<F>(mut f: F, x0: &[f64], opts: &BfgsOptions) -> Minimum
where
    F: FnMut(&[f64]) -> f64,
{
    let step = opts.fd_step;
    bfgs(
        |x: &[f64], need_grad: bool| {
            let v = f(x);
            if !need_grad || !v.is_finite() {
                return (v, None, 1);
            }
            let (g, n) = fd_gradient(&mut f, x, step);
            (v, Some(g), 1 + n)
        },
        x0,
        opts,
    )
}

/// Minimize with a user-supplied value-and-gradient closure.
///
/// Non-finite objective values are treated as infeasible: the line search
/// backtracks out of them.
pub fn minimize_with_grad<F>(mut fg: F, x0: &[f64], opts: &BfgsOptions) -> Minimum
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    bfgs(
        |x: &[f64], _| {
            let (v, g) = fg(x);
            (v, Some(g), 1)
        },
        x0,
        opts,
    )
}

/// BFGS with Armijo backtracking. `eval(x, need_grad)` returns the value,
/// the gradient when requested (or when it comes for free), and the number of
/// objective evaluations spent.
fn bfgs<E>(mut eval: E, x0: &[f64], opts: &BfgsOptions) -> Minimum
where
    E: FnMut(&[f64], bool) -> (f64, Option<Vec<f64>>, usize),
{
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let (mut fx, g0, mut evals) = eval(x.as_slice(), true);
    let g0 = g0.unwrap_or_else(|| vec![f64::NAN; n]);
    if !fx.is_finite() || g0.iter().any(|v| !v.is_finite()) {
        return Minimum { x: x0.to_vec(), value: fx, iterations: 0, evaluations: evals, converged: false };
    }
    let mut g = DVector::from_vec(g0);
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    let mut converged = false;
    let mut iter = 0;

    while iter < opts.max_iter {
        iter += 1;
        if g.amax() < opts.grad_tol {
            converged = true;
            break;
        }
        let mut dir = -(&h_inv * &g);
        let mut slope = dir.dot(&g);
        if slope >= 0.0 || !slope.is_finite() {
            h_inv = DMatrix::identity(n, n);
            dir = -g.clone();
            slope = dir.dot(&g);
        }
        // keep the first trial step bounded
        let dn = dir.norm();
        let mut t = if dn > 10.0 { 10.0 / dn } else { 1.0 };
        let mut accepted = None;
        for _ in 0..60 {
            let trial = &x + &dir * t;
            let (ft, gt, k) = eval(trial.as_slice(), false);
            evals += k;
            if ft.is_finite() && ft <= fx + 1e-4 * t * slope {
                let gt = match gt {
                    Some(gt) => gt,
                    None => {
                        let (_, gt, k) = eval(trial.as_slice(), true);
                        evals += k;
                        gt.unwrap_or_else(|| vec![f64::NAN; n])
                    }
                };
                if gt.iter().all(|v| v.is_finite()) {
                    accepted = Some((trial, ft, DVector::from_vec(gt)));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            // no descent possible along the current direction
            converged = g.amax() < opts.grad_tol.sqrt();
            break;
        };
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        let rel = (fx - f_new).abs() / fx.abs().max(1e-12);
        x = x_new;
        g = g_new;
        let f_old = fx;
        fx = f_new;
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(n, n);
            let a = &i - &s * y.transpose() * rho;
            let b = &i - &y * s.transpose() * rho;
            h_inv = &a * &h_inv * &b + &s * s.transpose() * rho;
        }
        if rel < opts.f_tol && (f_old - fx).abs() < opts.f_tol * (1.0 + fx.abs()) {
            converged = true;
            break;
        }
    }
    Minimum { x: x.as_slice().to_vec(), value: fx, iterations: iter, evaluations: evals, converged }
}
