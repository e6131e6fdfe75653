//! Mean-field variational inference.
//!
//! Minimizes the variational objective L(φ, θ) by block-coordinate descent:
//! the variational block (μ, σ) is handled by successive pseudo-convex
//! approximation with per-coordinate Newton solves and an Armijo line search
//! on the true objective; the hyperparameter block θ is handled by a
//! curvature-guarded BFGS quasi-Newton method in log-parameter space.

use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::{build_cov_cached, CovFactor, FeatureMatrix, HyperParams, PairwiseSqDiffs};
use crate::posterior::RequestMatrix;

pub mod bfgs;

/// Mean-field Gaussian q(λ) = Π_m N(λ_m | μ_m, σ_m) plus the point estimate
/// of θ. `sigma` entries are variances, not standard deviations.
#[derive(Debug, Clone)]
pub struct VariationalPosterior {
    pub mu: DVector<f64>,
    pub sigma: DVector<f64>,
    pub theta: HyperParams,
    /// L values recorded after each accepted block (non-increasing).
    pub elbo_trace: Vec<f64>,
    /// Per-block detail behind `elbo_trace`, for the trace dump.
    pub block_trace: Vec<TraceEntry>,
    pub status: FitStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitStatus {
    Converged,
    MaxIterations,
    /// Both blocks stalled on the same outer iteration before the tolerance
    /// was reached.
    ConvergedWithWarning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Variational,
    Hyper,
}

#[derive(Debug, Clone)]
pub struct TraceEntry {
    pub outer_iter: usize,
    pub block: Block,
    pub l_value: f64,
    pub theta: HyperParams,
}

impl VariationalPosterior {
    pub fn validate(&self) -> Result<()> {
        if self.mu.len() != self.sigma.len() {
            return Err(Error::invalid("mu and sigma lengths differ"));
        }
        if self.sigma.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("sigma entries must be strictly positive"));
        }
        Ok(())
    }

    pub fn n_contents(&self) -> usize {
        self.mu.len()
    }
}

/// Controls for [`fit`] and its two inner solvers.
#[derive(Debug, Clone)]
pub struct VbConfig {
    /// Relative L decrease below which the outer loop stops.
    pub outer_tol: f64,
    pub max_outer: usize,
    /// Relative L decrease below which the SPCA inner loop stops.
    pub spca_tol: f64,
    pub max_spca: usize,
    pub armijo_gamma: f64,
    pub armijo_eta: f64,
    pub wolfe_c2: f64,
    pub newton_tol: f64,
    pub max_newton: usize,
    /// Gradient tolerance and iteration cap for the BFGS hyper block.
    pub bfgs_grad_tol: f64,
    pub max_bfgs: usize,
    pub seed: u64,
}

impl Default for VbConfig {
    fn default() -> Self {
        VbConfig {
            outer_tol: 1e-6,
            max_outer: 100,
            spca_tol: 1e-8,
            max_spca: 50,
            armijo_gamma: 0.5,
            armijo_eta: 1e-4,
            wolfe_c2: 0.9,
            newton_tol: 1e-10,
            max_newton: 100,
            bfgs_grad_tol: 1e-6,
            max_bfgs: 50,
            seed: 0,
        }
    }
}

impl VbConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v > 0.0 && v < 1.0;
        if !(self.outer_tol > 0.0 && self.spca_tol > 0.0 && self.newton_tol > 0.0) {
            return Err(Error::invalid("tolerances must be > 0"));
        }
        if !in_unit(self.armijo_gamma) || !in_unit(self.armijo_eta) || !in_unit(self.wolfe_c2) {
            return Err(Error::invalid(
                "armijo_gamma, armijo_eta, wolfe_c2 must lie in (0,1)",
            ));
        }
        Ok(())
    }
}

const MAX_ARMIJO_BACKTRACKS: usize = 50;

/// Sufficient statistics plus kernel precomputation shared by all ELBO work.
#[derive(Debug, Clone)]
struct VbProblem {
    dbar: DVector<f64>,
    n_slots: f64,
    sqdiffs: PairwiseSqDiffs,
    q_features: usize,
}

impl VbProblem {
    fn new(data: &RequestMatrix, features: &FeatureMatrix) -> Result<Self> {
        if data.n_contents() != features.n_contents() {
            return Err(Error::invalid(format!(
                "request matrix has {} rows, features {}",
                data.n_contents(),
                features.n_contents()
            )));
        }
        Ok(VbProblem {
            dbar: data.row_sums(),
            n_slots: data.n_slots() as f64,
            sqdiffs: PairwiseSqDiffs::new(features),
            q_features: features.n_features(),
        })
    }
}

/// Factorization cache for one θ setting.
struct ThetaCtx {
    cf: CovFactor,
    diag_inv: DVector<f64>,
}

impl ThetaCtx {
    fn new(problem: &VbProblem, theta: &HyperParams) -> Result<Self> {
        let cf = build_cov_cached(&problem.sqdiffs, theta, 0.0)?;
        let diag_inv = cf.diag_of_inverse();
        Ok(ThetaCtx { cf, diag_inv })
    }

    /// L(μ, σ; θ) = −d̄ᵀμ + N Σ_m e^{μ_m + σ_m/2}
    ///            + ½ Σ_m ([K̃⁻¹]_mm σ_m − log σ_m)
    ///            + ½ (μᵀK̃⁻¹μ + log|K̃|).
    ///
    /// Constants independent of (μ, σ, θ) are omitted, identically everywhere
    /// L values are compared. Returns +∞ on overflow or σ ≤ 0 so line
    /// searches can reject the trial.
    fn elbo(&self, problem: &VbProblem, mu: &DVector<f64>, sigma: &DVector<f64>) -> f64 {
        if sigma.iter().any(|&s| !(s > 0.0)) {
            return f64::INFINITY;
        }
        let mut l = -problem.dbar.dot(mu);
        for m in 0..mu.len() {
            l += problem.n_slots * (mu[m] + 0.5 * sigma[m]).exp();
            l += 0.5 * (self.diag_inv[m] * sigma[m] - sigma[m].ln());
        }
        let v = self.cf.solve_vec(mu);
        l += 0.5 * (mu.dot(&v) + self.cf.logdet());
        l
    }

    /// ∂L/∂μ and ∂L/∂σ at (μ, σ).
    fn grad_mu_sigma(
        &self,
        problem: &VbProblem,
        mu: &DVector<f64>,
        sigma: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>) {
        let kinv_mu = self.cf.solve_vec(mu);
        let m = mu.len();
        let mut gmu = DVector::zeros(m);
        let mut gsigma = DVector::zeros(m);
        for i in 0..m {
            let e = (mu[i] + 0.5 * sigma[i]).exp();
            gmu[i] = -problem.dbar[i] + problem.n_slots * e + kinv_mu[i];
            gsigma[i] = 0.5 * problem.n_slots * e + 0.5 * self.diag_inv[i] - 0.5 / sigma[i];
        }
        (gmu, gsigma)
    }
}

/// The variational objective L for a full posterior object (θ taken from
/// `vp.theta`). Lower is better; −L lower-bounds the log marginal likelihood.
pub fn elbo_objective(
    vp: &VariationalPosterior,
    data: &RequestMatrix,
    features: &FeatureMatrix,
) -> Result<f64> {
    let problem = VbProblem::new(data, features)?;
    let ctx = ThetaCtx::new(&problem, &vp.theta)?;
    Ok(ctx.elbo(&problem, &vp.mu, &vp.sigma))
}

// ---------------------------------------------------------------------------
// Scalar Newton solves for the separable SPCA subproblems
// ---------------------------------------------------------------------------

/// Monotone scalar root find: Newton with a bisection safeguard on a strictly
/// increasing g. Requires g(lo) < 0 < g(hi).
fn newton_bisect(
    g: impl Fn(f64) -> f64,
    gprime: impl Fn(f64) -> f64,
    mut lo: f64,
    mut hi: f64,
    tol: f64,
    max_iter: usize,
) -> Result<f64> {
    let mut x = 0.5 * (lo + hi);
    let mut gx = g(x);
    for _ in 0..max_iter {
        if gx.abs() < tol {
            return Ok(x);
        }
        if gx.is_finite() {
            if gx < 0.0 {
                lo = x;
            } else {
                hi = x;
            }
        } else {
            // overflow counts as "too far right" for the increasing g here
            hi = x;
        }
        let step = gx / gprime(x);
        let mut next = x - step;
        if !next.is_finite() || next <= lo || next >= hi {
            next = 0.5 * (lo + hi);
        }
        x = next;
        gx = g(x);
    }
    Err(Error::NonConvergence {
        grad_magnitude: gx.abs(),
        iterations: max_iter,
    })
}

fn expand_bracket(g: impl Fn(f64) -> f64, start: f64) -> Result<(f64, f64)> {
    let mut lo = start - 1.0;
    let mut hi = start + 1.0;
    let mut width = 1.0;
    for _ in 0..200 {
        let glo = g(lo);
        let ghi = g(hi);
        // non-finite ghi means the increasing g overflowed: still an upper end
        let hi_pos = !ghi.is_finite() || ghi > 0.0;
        if glo < 0.0 && hi_pos {
            return Ok((lo, hi));
        }
        width *= 2.0;
        if !(glo < 0.0) {
            lo -= width;
        }
        if !hi_pos {
            hi += width;
        }
    }
    Err(Error::Numerical("scalar solve could not bracket a root".into()))
}

/// Minimize lin·μ + exp_coef·e^μ + ½·quad·μ² (strictly convex for
/// exp_coef > 0). Newton with convergence |gradient| < `tol`.
pub fn solve_mu_scalar(
    lin: f64,
    exp_coef: f64,
    quad: f64,
    tol: f64,
    max_iter: usize,
) -> Result<f64> {
    if !(exp_coef > 0.0) || quad < 0.0 || !lin.is_finite() || !exp_coef.is_finite() {
        return Err(Error::invalid(
            "mu solve needs exp_coef > 0, quad >= 0, finite coefficients",
        ));
    }
    if quad == 0.0 && lin >= 0.0 {
        return Err(Error::invalid("mu subproblem has no stationary point"));
    }
    let g = |x: f64| lin + exp_coef * x.exp() + quad * x;
    let gp = |x: f64| exp_coef * x.exp() + quad;
    let (lo, hi) = expand_bracket(g, 0.0)?;
    newton_bisect(g, gp, lo, hi, tol, max_iter)
}

/// Minimize a·e^{σ/2} + ½(b·σ − log σ) over σ > 0 via Newton in τ = log σ,
/// which keeps the iterate positive (equivalent to a projected Newton).
/// Convergence |dL/dτ| < `tol`. For a = 0 the minimizer is exactly 1/b.
pub fn solve_sigma_scalar(a: f64, b: f64, tol: f64, max_iter: usize) -> Result<f64> {
    if !(b > 0.0) || a < 0.0 || !a.is_finite() {
        return Err(Error::invalid(
            "sigma solve needs precision b > 0 and finite a >= 0",
        ));
    }
    // dL/dτ = (a/2)·σ·e^{σ/2} + (b·σ − 1)/2 with σ = e^τ, strictly increasing
    let g = |tau: f64| {
        let s = tau.exp();
        0.5 * a * s * (0.5 * s).exp() + 0.5 * (b * s - 1.0)
    };
    let gp = |tau: f64| {
        let s = tau.exp();
        let e = (0.5 * s).exp();
        0.5 * a * s * e * (1.0 + 0.5 * s) + 0.5 * b * s
    };
    let start = -(b.max(a + 1.0)).ln();
    let (lo, hi) = expand_bracket(g, start)?;
    let tau = newton_bisect(g, gp, lo, hi, tol, max_iter)?;
    Ok(tau.exp())
}

// ---------------------------------------------------------------------------
// SPCA variational block
// ---------------------------------------------------------------------------

struct SpcaIteration {
    mu: DVector<f64>,
    sigma: DVector<f64>,
    l_value: f64,
    stalled: bool,
}

/// One SPCA iteration against a fixed-θ context: solve the M separable
/// surrogates in parallel, then Armijo-backtrack on the true L along the
/// direction to the surrogate minimizer.
fn spca_iteration(
    problem: &VbProblem,
    ctx: &ThetaCtx,
    mu: &DVector<f64>,
    sigma: &DVector<f64>,
    l_current: f64,
    cfg: &VbConfig,
) -> Result<SpcaIteration> {
    let m = mu.len();
    let kinv_mu = ctx.cf.solve_vec(mu);

    // Each scalar subproblem depends only on the frozen iterate, so the batch
    // result is identical however it is scheduled.
    let solved: Result<Vec<(f64, f64)>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let coupling = kinv_mu[i] - ctx.diag_inv[i] * mu[i];
            let mu_bar = solve_mu_scalar(
                -problem.dbar[i] + coupling,
                problem.n_slots * (0.5 * sigma[i]).exp(),
                ctx.diag_inv[i],
                cfg.newton_tol,
                cfg.max_newton,
            )?;
            let sigma_bar = solve_sigma_scalar(
                problem.n_slots * mu[i].exp(),
                ctx.diag_inv[i],
                cfg.newton_tol,
                cfg.max_newton,
            )?;
            Ok((mu_bar, sigma_bar))
        })
        .collect();
    let solved = solved?;

    let dir_mu = DVector::from_fn(m, |i, _| solved[i].0 - mu[i]);
    let dir_sigma = DVector::from_fn(m, |i, _| solved[i].1 - sigma[i]);

    let (gmu, gsigma) = ctx.grad_mu_sigma(problem, mu, sigma);
    let slope = gmu.dot(&dir_mu) + gsigma.dot(&dir_sigma);

    let mut t = 1.0;
    for _ in 0..MAX_ARMIJO_BACKTRACKS {
        let mu_t = mu + &dir_mu * t;
        let sigma_t = sigma + &dir_sigma * t;
        let l_t = ctx.elbo(problem, &mu_t, &sigma_t);
        if l_t.is_finite() && l_t <= l_current + cfg.armijo_eta * t * slope {
            return Ok(SpcaIteration {
                mu: mu_t,
                sigma: sigma_t,
                l_value: l_t,
                stalled: false,
            });
        }
        t *= cfg.armijo_gamma;
    }
    Ok(SpcaIteration {
        mu: mu.clone(),
        sigma: sigma.clone(),
        l_value: l_current,
        stalled: true,
    })
}

/// Outcome of one public SPCA step: the (possibly unchanged) posterior and
/// whether the Armijo search exhausted its backtracks.
#[derive(Debug, Clone)]
pub struct SpcaStepOutcome {
    pub posterior: VariationalPosterior,
    pub stalled: bool,
}

/// One SPCA iteration on (μ, σ) with θ held at `vp.theta`.
/// Postcondition: L(new) ≤ L(old).
pub fn spca_variational_step(
    vp: &VariationalPosterior,
    data: &RequestMatrix,
    features: &FeatureMatrix,
    cfg: &VbConfig,
) -> Result<SpcaStepOutcome> {
    vp.validate()?;
    cfg.validate()?;
    let problem = VbProblem::new(data, features)?;
    let ctx = ThetaCtx::new(&problem, &vp.theta)?;
    let l0 = ctx.elbo(&problem, &vp.mu, &vp.sigma);
    let step = spca_iteration(&problem, &ctx, &vp.mu, &vp.sigma, l0, cfg)?;
    let mut out = vp.clone();
    out.mu = step.mu;
    out.sigma = step.sigma;
    Ok(SpcaStepOutcome {
        posterior: out,
        stalled: step.stalled,
    })
}

// ---------------------------------------------------------------------------
// BFGS hyperparameter block
// ---------------------------------------------------------------------------

/// ∇_φ L(θ = e^φ) with (μ, σ) fixed:
/// ∂L/∂φ_q = ½tr(K̃⁻¹Ġ) − ½uᵀĠu − ½Σ_m σ_m [K̃⁻¹ĠK̃⁻¹]_mm, u = K̃⁻¹μ,
/// with Ġ = ∂K̃/∂φ_q from the kernel module.
fn hyper_grad(
    problem: &VbProblem,
    hp: &HyperParams,
    mu: &DVector<f64>,
    sigma: &DVector<f64>,
) -> Result<DVector<f64>> {
    let cf = build_cov_cached(&problem.sqdiffs, hp, 0.0)?;
    let w = cf.inverse();
    let u = cf.solve_vec(mu);
    let kernel = problem.sqdiffs.kernel_matrix(hp)?;
    let m = mu.len();
    let n_params = problem.q_features + 2;
    let mut grad = DVector::zeros(n_params);

    // η term: Ġ = ηI, so tr(WĠ) = η·tr(W), uᵀĠu = η‖u‖², [WĠW]_mm = η‖w_m‖²
    let eta = hp.eta();
    let tr_w: f64 = (0..m).map(|i| w[(i, i)]).sum();
    let wdiag2: f64 = (0..m).map(|i| sigma[i] * w.column(i).norm_squared()).sum();
    grad[0] = 0.5 * eta * tr_w - 0.5 * eta * u.norm_squared() - 0.5 * eta * wdiag2;

    let mut gmat = DMatrix::zeros(m, m);
    for p in 1..n_params {
        if p == 1 {
            gmat.copy_from(&kernel);
        } else {
            let alpha = hp.alphas()[p - 1];
            let d = problem.sqdiffs.dim_matrix(p - 2);
            for j in 0..m {
                for i in 0..m {
                    gmat[(i, j)] = -alpha * d[(i, j)] * kernel[(i, j)];
                }
            }
        }
        let tr = gmat.component_mul(&w).sum();
        let quad = u.dot(&(&gmat * &u));
        let t = &gmat * &w;
        let mut diag_term = 0.0;
        for i in 0..m {
            diag_term += sigma[i] * w.column(i).dot(&t.column(i));
        }
        grad[p] = 0.5 * tr - 0.5 * quad - 0.5 * diag_term;
    }
    Ok(grad)
}

/// Minimize L over θ (in φ = log θ, so positivity is automatic) with BFGS,
/// holding (μ, σ) fixed. Returns θ with L(θ_new) ≤ L(θ_old) plus a stall
/// flag when no progress was possible.
pub fn bfgs_hyper_step(
    vp: &VariationalPosterior,
    data: &RequestMatrix,
    features: &FeatureMatrix,
    cfg: &VbConfig,
) -> Result<(HyperParams, bool)> {
    vp.validate()?;
    cfg.validate()?;
    let problem = VbProblem::new(data, features)?;
    bfgs_hyper_step_inner(&problem, &vp.theta, &vp.mu, &vp.sigma, cfg)
}

fn bfgs_hyper_step_inner(
    problem: &VbProblem,
    theta: &HyperParams,
    mu: &DVector<f64>,
    sigma: &DVector<f64>,
    cfg: &VbConfig,
) -> Result<(HyperParams, bool)> {
    let phi0 = DVector::from_vec(theta.to_log());
    let value = |phi: &DVector<f64>| -> f64 {
        let hp = match HyperParams::from_log(phi.as_slice()) {
            Ok(hp) => hp,
            Err(_) => return f64::INFINITY,
        };
        match ThetaCtx::new(problem, &hp) {
            Ok(ctx) => ctx.elbo(problem, mu, sigma),
            Err(_) => f64::INFINITY,
        }
    };
    let gradient = |phi: &DVector<f64>| -> Option<DVector<f64>> {
        let hp = HyperParams::from_log(phi.as_slice()).ok()?;
        let g = hyper_grad(problem, &hp, mu, sigma).ok()?;
        g.iter().all(|v| v.is_finite()).then_some(g)
    };
    let opts = bfgs::Options {
        grad_tol: cfg.bfgs_grad_tol,
        max_iters: cfg.max_bfgs,
        armijo_gamma: cfg.armijo_gamma,
        armijo_eta: cfg.armijo_eta,
        wolfe_c2: cfg.wolfe_c2,
        max_backtracks: MAX_ARMIJO_BACKTRACKS,
    };
    let outcome = bfgs::minimize(&value, &gradient, &phi0, &opts);
    let stalled = outcome.stalled && outcome.x == phi0;
    let hp = HyperParams::from_log(outcome.x.as_slice())
        .map_err(|_| Error::Numerical("BFGS left the positive domain".into()))?;
    Ok((hp, stalled))
}

// ---------------------------------------------------------------------------
// Full block-coordinate descent
// ---------------------------------------------------------------------------

/// Initial point: μ⁰ = smoothed log-MLE, σ⁰ = 1/N, θ⁰ scale-aware
/// (η = 0.1, α₀ = variance of μ⁰ floored at 0.01, α_q = 1/Q).
pub fn default_init(data: &RequestMatrix, q_features: usize) -> Result<(DVector<f64>, DVector<f64>, HyperParams)> {
    let n = data.n_slots() as f64;
    let mu = data.row_sums().map(|s| ((s + 0.5) / n).ln());
    let m = mu.len() as f64;
    let mean = mu.sum() / m;
    let var = mu.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
    let alpha0 = var.max(1e-2);
    let mut alphas = vec![alpha0];
    alphas.resize(1 + q_features, 1.0 / q_features as f64);
    let theta = HyperParams::new(0.1, alphas)?;
    let sigma = DVector::from_element(mu.len(), 1.0 / n);
    Ok((mu, sigma, theta))
}

/// Block-coordinate descent: SPCA on (μ, σ) to inner convergence, BFGS on θ,
/// alternating until the relative L decrease over one outer iteration drops
/// below `outer_tol`.
pub fn fit(
    data: &RequestMatrix,
    features: &FeatureMatrix,
    cfg: &VbConfig,
    init: Option<(DVector<f64>, DVector<f64>, HyperParams)>,
) -> Result<VariationalPosterior> {
    cfg.validate()?;
    let problem = VbProblem::new(data, features)?;
    let (mut mu, mut sigma, mut theta) = match init {
        Some(i) => i,
        None => default_init(data, features.n_features())?,
    };
    if sigma.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::invalid("initial sigma must be strictly positive"));
    }

    let mut ctx = ThetaCtx::new(&problem, &theta)?;
    let mut l_current = ctx.elbo(&problem, &mu, &sigma);
    if !l_current.is_finite() {
        return Err(Error::Numerical("objective not finite at the initial point".into()));
    }
    let mut elbo_trace = vec![l_current];
    let mut block_trace = Vec::new();
    let mut status = FitStatus::MaxIterations;

    for outer in 0..cfg.max_outer {
        let l_outer_start = l_current;

        // variational block to inner convergence
        let mut spca_stalled = false;
        for _ in 0..cfg.max_spca {
            let step = spca_iteration(&problem, &ctx, &mu, &sigma, l_current, cfg)?;
            if step.stalled {
                spca_stalled = l_current == l_outer_start;
                break;
            }
            let decrease = l_current - step.l_value;
            mu = step.mu;
            sigma = step.sigma;
            l_current = step.l_value;
            if decrease <= cfg.spca_tol * l_current.abs().max(1.0) {
                break;
            }
        }
        elbo_trace.push(l_current);
        block_trace.push(TraceEntry {
            outer_iter: outer,
            block: Block::Variational,
            l_value: l_current,
            theta: theta.clone(),
        });

        // hyperparameter block
        let (theta_new, hyper_stalled) =
            bfgs_hyper_step_inner(&problem, &theta, &mu, &sigma, cfg)?;
        theta = theta_new;
        ctx = ThetaCtx::new(&problem, &theta)?;
        let l_after_hyper = ctx.elbo(&problem, &mu, &sigma);
        // BFGS only ever accepts descent steps
        l_current = l_after_hyper.min(l_current);
        elbo_trace.push(l_current);
        block_trace.push(TraceEntry {
            outer_iter: outer,
            block: Block::Hyper,
            l_value: l_current,
            theta: theta.clone(),
        });

        if spca_stalled && hyper_stalled {
            status = FitStatus::ConvergedWithWarning;
            break;
        }
        let decrease = l_outer_start - l_current;
        if decrease <= cfg.outer_tol * l_current.abs().max(1.0) {
            status = FitStatus::Converged;
            break;
        }
    }

    let vp = VariationalPosterior {
        mu,
        sigma,
        theta,
        elbo_trace,
        block_trace,
        status,
    };
    vp.validate()?;
    Ok(vp)
}

/// E{d_{c,N+1}|D} ≈ e^{μ_m + σ_m/2}, elementwise.
pub fn vb_mean_rates(vp: &VariationalPosterior) -> DVector<f64> {
    DVector::from_fn(vp.mu.len(), |m, _| (vp.mu[m] + 0.5 * vp.sigma[m]).exp())
}

/// Dump `outer_iter,block,L,theta_eta,theta_alpha_0..` per accepted block.
pub fn write_trace_csv(vp: &VariationalPosterior, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "outer_iter,block,L,theta_eta")?;
    for q in 0..vp.theta.alphas().len() {
        write!(f, ",theta_alpha_{q}")?;
    }
    writeln!(f)?;
    for entry in &vp.block_trace {
        let block = match entry.block {
            Block::Variational => "spca",
            Block::Hyper => "bfgs",
        };
        write!(
            f,
            "{},{},{},{}",
            entry.outer_iter, block, entry.l_value, entry.theta.eta()
        )?;
        for a in entry.theta.alphas() {
            write!(f, ",{a}")?;
        }
        writeln!(f)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn vp_for(mu: Vec<f64>, sigma: Vec<f64>, theta: HyperParams) -> VariationalPosterior {
        VariationalPosterior {
            mu: DVector::from_vec(mu),
            sigma: DVector::from_vec(sigma),
            theta,
            elbo_trace: Vec::new(),
            block_trace: Vec::new(),
            status: FitStatus::Converged,
        }
    }

    #[test]
    fn elbo_scalar_reference_value() {
        // M=1, N=1, d̄=1, μ=0, σ=1, K̃=[[1]] → e^{0.5} + 0.5
        let data = RequestMatrix::from_rows(&[vec![1]]).unwrap();
        let features = FeatureMatrix::from_rows(&[vec![0.0]]).unwrap();
        let eta = 0.25;
        let theta = HyperParams::new(eta, vec![1.0 - eta, 1.0]).unwrap();
        let vp = vp_for(vec![0.0], vec![1.0], theta);
        let l = elbo_objective(&vp, &data, &features).unwrap();
        assert_relative_eq!(l, 0.5_f64.exp() + 0.5, max_relative = 1e-12);
        assert_relative_eq!(l, 2.148721270700128, max_relative = 1e-10);
    }

    #[test]
    fn elbo_zero_counts_drop_linear_term() {
        let features = FeatureMatrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let theta = HyperParams::new(0.1, vec![0.5, 1.0]).unwrap();
        let vp = vp_for(vec![0.3, -0.2], vec![0.5, 0.4], theta);
        let zero = RequestMatrix::from_rows(&[vec![0, 0], vec![0, 0]]).unwrap();
        let nonzero = RequestMatrix::from_rows(&[vec![2, 1], vec![0, 3]]).unwrap();
        let l_zero = elbo_objective(&vp, &zero, &features).unwrap();
        let l_nonzero = elbo_objective(&vp, &nonzero, &features).unwrap();
        let dbar_dot_mu = 3.0 * 0.3 + 3.0 * (-0.2);
        assert_relative_eq!(l_zero - l_nonzero, dbar_dot_mu, max_relative = 1e-12);
    }

    #[test]
    fn mu_scalar_textbook_root() {
        // −2μ + e^μ + ½μ²: root of e^μ + μ = 2 at μ* ≈ 0.44285
        let mu = solve_mu_scalar(-2.0, 1.0, 1.0, 1e-12, 100).unwrap();
        // bisection oracle on the scalar gradient
        let (mut lo, mut hi): (f64, f64) = (0.0, 1.0);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if mid.exp() + mid < 2.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert_relative_eq!(mu, 0.5 * (lo + hi), epsilon = 1e-10);
        assert_relative_eq!(mu, 0.442854401002389, epsilon = 1e-9);
    }

    #[test]
    fn mu_scalar_balance_at_zero() {
        // d̄ = N e^{μ} balances at μ=0 with no quadratic/linear coupling
        let mu = solve_mu_scalar(-5.0, 5.0, 0.0, 1e-12, 100).unwrap();
        assert_relative_eq!(mu, 0.0, epsilon = 1e-10);
    }

    #[test]
    fn sigma_scalar_closed_form_when_a_zero() {
        let s = solve_sigma_scalar(0.0, 4.0, 1e-12, 100).unwrap();
        assert_relative_eq!(s, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn scalar_solves_beat_random_probes() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..25 {
            let lin = rng.random_range(-10.0..2.0);
            let expc = rng.random_range(0.1..20.0);
            let quad = rng.random_range(0.05..5.0);
            let mu = solve_mu_scalar(lin, expc, quad, 1e-11, 200).unwrap();
            let f = |x: f64| lin * x + expc * x.exp() + 0.5 * quad * x * x;
            let g = lin + expc * mu.exp() + quad * mu;
            assert!(g.abs() < 1e-10, "gradient {g}");
            for _ in 0..20 {
                let probe = mu + rng.random_range(-3.0..3.0);
                assert!(f(mu) <= f(probe) + 1e-12);
            }

            let a = rng.random_range(0.0..15.0);
            let b = rng.random_range(0.05..10.0);
            let s = solve_sigma_scalar(a, b, 1e-11, 200).unwrap();
            assert!(s > 0.0);
            let h = |x: f64| a * (0.5 * x).exp() + 0.5 * (b * x - x.ln());
            for _ in 0..20 {
                let probe = (s * rng.random_range(0.05..20.0)).max(1e-9);
                assert!(h(s) <= h(probe) + 1e-10);
            }
        }
    }

    fn random_problem(
        rng: &mut ChaCha8Rng,
        m: usize,
        q: usize,
        n: usize,
    ) -> (RequestMatrix, FeatureMatrix) {
        let features = FeatureMatrix::from_rows(
            &(0..m)
                .map(|_| (0..q).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let data = RequestMatrix::from_rows(
            &(0..m)
                .map(|_| (0..n).map(|_| rng.random_range(0..7)).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        (data, features)
    }

    #[test]
    fn surrogate_gradients_match_true_objective_at_expansion_point() {
        // condition C3: the separable surrogate and L share gradients at the
        // expansion point (analytic identity, checked numerically)
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let (data, features) = random_problem(&mut rng, 5, 2, 4);
            let problem = VbProblem::new(&data, &features).unwrap();
            let theta = HyperParams::new(
                rng.random_range(0.05..0.5),
                vec![rng.random_range(0.2..1.5), 0.7, 0.3],
            )
            .unwrap();
            let ctx = ThetaCtx::new(&problem, &theta).unwrap();
            let mu = DVector::from_fn(5, |_, _| rng.random_range(-0.5..0.5));
            let sigma = DVector::from_fn(5, |_, _| rng.random_range(0.05..0.8));
            let (gmu, gsigma) = ctx.grad_mu_sigma(&problem, &mu, &sigma);
            let kinv_mu = ctx.cf.solve_vec(&mu);
            for i in 0..5 {
                let coupling = kinv_mu[i] - ctx.diag_inv[i] * mu[i];
                // ∂L̃/∂μ_i at μ_i = μ^{i−1}_i
                let surrogate_mu = (-problem.dbar[i] + coupling)
                    + problem.n_slots * (0.5 * sigma[i]).exp() * mu[i].exp()
                    + ctx.diag_inv[i] * mu[i];
                assert_relative_eq!(surrogate_mu, gmu[i], epsilon = 1e-8);
                // ∂L̃/∂σ_i at σ_i = σ^{i−1}_i
                let surrogate_sigma = 0.5 * problem.n_slots * mu[i].exp()
                    * (0.5 * sigma[i]).exp()
                    + 0.5 * ctx.diag_inv[i]
                    - 0.5 / sigma[i];
                assert_relative_eq!(surrogate_sigma, gsigma[i], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn spca_step_descends_and_fixed_point_is_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (data, features) = random_problem(&mut rng, 6, 2, 5);
        let cfg = VbConfig::default();
        let theta = HyperParams::new(0.2, vec![0.6, 0.4, 0.9]).unwrap();
        let mut vp = vp_for(
            (0..6).map(|_| rng.random_range(-0.5..0.5)).collect(),
            (0..6).map(|_| rng.random_range(0.1..1.0)).collect(),
            theta,
        );
        let l0 = elbo_objective(&vp, &data, &features).unwrap();
        for _ in 0..40 {
            let out = spca_variational_step(&vp, &data, &features, &cfg).unwrap();
            vp = out.posterior;
            if out.stalled {
                break;
            }
        }
        let l1 = elbo_objective(&vp, &data, &features).unwrap();
        assert!(l1 <= l0);
        // at (near) convergence the surrogate minimizers coincide with the
        // iterate and the step direction vanishes
        let out = spca_variational_step(&vp, &data, &features, &cfg).unwrap();
        let dmu = (&out.posterior.mu - &vp.mu).norm();
        let dsig = (&out.posterior.sigma - &vp.sigma).norm();
        assert!(dmu < 1e-6 && dsig < 1e-6, "step ({dmu}, {dsig}) not a fixed point");
    }

    #[test]
    fn spca_solve_order_is_immaterial() {
        // running the scalar solves sequentially in any order gives the same
        // minimizers because each depends only on the frozen iterate
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (data, features) = random_problem(&mut rng, 5, 2, 3);
        let problem = VbProblem::new(&data, &features).unwrap();
        let theta = HyperParams::new(0.3, vec![0.5, 0.2, 0.4]).unwrap();
        let ctx = ThetaCtx::new(&problem, &theta).unwrap();
        let mu: DVector<f64> = DVector::from_fn(5, |_, _| rng.random_range(-0.4..0.4));
        let sigma: DVector<f64> = DVector::from_fn(5, |_, _| rng.random_range(0.1..0.9));
        let cfg = VbConfig::default();
        let kinv_mu = ctx.cf.solve_vec(&mu);
        let solve_at = |i: usize| {
            let coupling = kinv_mu[i] - ctx.diag_inv[i] * mu[i];
            solve_mu_scalar(
                -problem.dbar[i] + coupling,
                problem.n_slots * (0.5 * sigma[i]).exp(),
                ctx.diag_inv[i],
                cfg.newton_tol,
                cfg.max_newton,
            )
            .unwrap()
        };
        let forward: Vec<f64> = (0..5).map(solve_at).collect();
        let backward: Vec<f64> = (0..5).rev().map(solve_at).collect();
        for i in 0..5 {
            assert_eq!(forward[i], backward[4 - i]);
        }
    }

    #[test]
    fn hyper_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (data, features) = random_problem(&mut rng, 5, 2, 4);
        let problem = VbProblem::new(&data, &features).unwrap();
        let mu = DVector::from_fn(5, |_, _| rng.random_range(-0.5..0.5));
        let sigma = DVector::from_fn(5, |_, _| rng.random_range(0.1..0.8));
        let theta = HyperParams::new(0.3, vec![0.8, 0.5, 0.2]).unwrap();
        let grad = hyper_grad(&problem, &theta, &mu, &sigma).unwrap();
        let phi = DVector::from_vec(theta.to_log());
        let value = |p: &DVector<f64>| {
            let hp = HyperParams::from_log(p.as_slice()).unwrap();
            let ctx = ThetaCtx::new(&problem, &hp).unwrap();
            ctx.elbo(&problem, &mu, &sigma)
        };
        let step = 1e-6;
        for i in 0..phi.len() {
            let mut up = phi.clone();
            let mut dn = phi.clone();
            up[i] += step;
            dn[i] -= step;
            let fd = (value(&up) - value(&dn)) / (2.0 * step);
            assert!(
                (grad[i] - fd).abs() / fd.abs().max(1e-4) < 1e-5,
                "param {i}: analytic {} vs fd {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn bfgs_hyper_step_decreases_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (data, features) = random_problem(&mut rng, 6, 2, 5);
        let theta = HyperParams::new(0.5, vec![1.0, 0.5, 0.5]).unwrap();
        let vp = vp_for(
            (0..6).map(|_| rng.random_range(-0.4..0.4)).collect(),
            (0..6).map(|_| rng.random_range(0.1..0.6)).collect(),
            theta,
        );
        let cfg = VbConfig::default();
        let l0 = elbo_objective(&vp, &data, &features).unwrap();
        let (theta_new, _) = bfgs_hyper_step(&vp, &data, &features, &cfg).unwrap();
        let mut vp_new = vp.clone();
        vp_new.theta = theta_new;
        let l1 = elbo_objective(&vp_new, &data, &features).unwrap();
        assert!(l1 <= l0 + 1e-12, "L went from {l0} to {l1}");
    }

    #[test]
    fn fit_trace_non_increasing_and_invariants_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (data, features) = random_problem(&mut rng, 8, 2, 6);
        let vp = fit(&data, &features, &VbConfig::default(), None).unwrap();
        vp.validate().unwrap();
        for w in vp.elbo_trace.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0),
                "trace increased: {} -> {}",
                w[0],
                w[1]
            );
        }
        assert!(vp.theta.eta() > 0.0 && vp.theta.alpha0() > 0.0);
    }

    #[test]
    fn fit_is_equivariant_under_content_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let (data, features) = random_problem(&mut rng, 6, 2, 5);
        let cfg = VbConfig::default();
        let vp = fit(&data, &features, &cfg, None).unwrap();

        let perm = [3usize, 0, 5, 1, 4, 2];
        let data_p = RequestMatrix::from_rows(
            &perm
                .iter()
                .map(|&i| (0..5).map(|n| data.count(i, n)).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let features_p = features.select_rows(&perm).unwrap();
        let vp_p = fit(&data_p, &features_p, &cfg, None).unwrap();

        for (new_idx, &old_idx) in perm.iter().enumerate() {
            assert_relative_eq!(vp_p.mu[new_idx], vp.mu[old_idx], epsilon = 1e-8);
            assert_relative_eq!(vp_p.sigma[new_idx], vp.sigma[old_idx], epsilon = 1e-8);
        }
        assert_relative_eq!(vp_p.theta.eta(), vp.theta.eta(), max_relative = 1e-6);
        let la = elbo_objective(&vp, &data, &features).unwrap();
        let lb = elbo_objective(&vp_p, &data_p, &features_p).unwrap();
        assert_relative_eq!(la, lb, epsilon = 1e-8);
    }

    #[test]
    fn vb_mean_rates_formula() {
        let theta = HyperParams::new(0.1, vec![1.0]).unwrap();
        let vp = vp_for(vec![0.0, 2.0_f64.ln(), 0.0], vec![0.0, 0.0, 2.0 * 2.0_f64.ln()], theta);
        let rates = vb_mean_rates(&vp);
        assert_relative_eq!(rates[0], 1.0, max_relative = 1e-14);
        assert_relative_eq!(rates[1], 2.0, max_relative = 1e-14);
        assert_relative_eq!(rates[2], 2.0, max_relative = 1e-14);
    }

    #[test]
    fn trace_csv_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (data, features) = random_problem(&mut rng, 4, 2, 3);
        let vp = fit(&data, &features, &VbConfig::default(), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_trace_csv(&vp, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(
            header,
            "outer_iter,block,L,theta_eta,theta_alpha_0,theta_alpha_1,theta_alpha_2"
        );
        assert_eq!(text.lines().count(), vp.block_trace.len() + 1);
    }
}
