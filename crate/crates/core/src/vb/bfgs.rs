//! Curvature-guarded BFGS with Armijo backtracking.
//!
//! Maintains a positive-definite approximation H of the Hessian; the search
//! direction solves Hp = −∇f. The rank-two update is applied only when the
//! curvature condition yᵀs > (c₂ − 1)·t·∇fᵀp holds, which keeps H positive
//! definite.

use nalgebra::{Cholesky, DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct Options {
    pub grad_tol: f64,
    pub max_iters: usize,
    pub armijo_gamma: f64,
    pub armijo_eta: f64,
    pub wolfe_c2: f64,
    pub max_backtracks: usize,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            grad_tol: 1e-8,
            max_iters: 100,
            armijo_gamma: 0.5,
            armijo_eta: 1e-4,
            wolfe_c2: 0.9,
            max_backtracks: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub x: DVector<f64>,
    pub value: f64,
    pub iterations: usize,
    /// True when the routine stopped because no trial step made progress
    /// (as opposed to meeting the gradient tolerance).
    pub stalled: bool,
}

/// H ← H + yyᵀ/(yᵀs) − (Hs)(Hs)ᵀ/(sᵀHs). Callers must ensure yᵀs > 0.
pub(crate) fn update_hessian(h: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) {
    let ys = y.dot(s);
    let hs = &*h * s;
    let shs = s.dot(&hs);
    if ys <= 0.0 || shs <= 0.0 || !ys.is_finite() || !shs.is_finite() {
        return;
    }
    let n = h.nrows();
    for j in 0..n {
        for i in 0..n {
            h[(i, j)] += y[i] * y[j] / ys - hs[i] * hs[j] / shs;
        }
    }
}

/// Minimize `f` starting from `x0`. `f` may return +∞ outside its domain;
/// `grad` may return `None` when the gradient cannot be evaluated (the
/// current iterate is then returned with `stalled` set).
pub fn minimize(
    f: &dyn Fn(&DVector<f64>) -> f64,
    grad: &dyn Fn(&DVector<f64>) -> Option<DVector<f64>>,
    x0: &DVector<f64>,
    opts: &Options,
) -> Outcome {
    let n = x0.len();
    let mut x = x0.clone();
    let mut fx = f(&x);
    let mut g = match grad(&x) {
        Some(g) => g,
        None => {
            return Outcome {
                x,
                value: fx,
                iterations: 0,
                stalled: true,
            }
        }
    };
    let mut h = DMatrix::identity(n, n);
    let mut stalled = false;
    let mut iterations = 0;

    for iter in 0..opts.max_iters {
        iterations = iter;
        if g.amax() < opts.grad_tol {
            return Outcome {
                x,
                value: fx,
                iterations,
                stalled: false,
            };
        }

        let mut p = match Cholesky::new(h.clone()) {
            Some(chol) => -chol.solve(&g),
            None => {
                h = DMatrix::identity(n, n);
                -g.clone()
            }
        };
        let mut slope = g.dot(&p);
        if !(slope < 0.0) {
            h = DMatrix::identity(n, n);
            p = -g.clone();
            slope = -g.norm_squared();
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let trial = &x + &p * t;
            let ft = f(&trial);
            if ft.is_finite() && ft <= fx + opts.armijo_eta * t * slope {
                accepted = Some((trial, ft, t));
                break;
            }
            t *= opts.armijo_gamma;
        }
        let Some((x_new, f_new, t)) = accepted else {
            stalled = true;
            break;
        };

        let Some(g_new) = grad(&x_new) else {
            x = x_new;
            fx = f_new;
            stalled = true;
            break;
        };
        let s = &x_new - &x;
        let y = &g_new - &g;
        if y.dot(&s) > (opts.wolfe_c2 - 1.0) * t * slope {
            update_hessian(&mut h, &s, &y);
        }
        x = x_new;
        fx = f_new;
        g = g_new;
    }

    Outcome {
        x,
        value: fx,
        iterations,
        stalled,
    }
}
