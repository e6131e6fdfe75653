//! Hamiltonian Monte Carlo over ζ = (λ, φ) with leapfrog integration and
//! Metropolis acceptance.
//!
//! The sampler is generic over a [`Target`] so tests can inject simple
//! closed-form densities; the production target is [`posterior::Model`].

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernel::FeatureMatrix;
use crate::posterior::{GammaPrior, Model, RequestMatrix, UnconstrainedState};

/// A differentiable unnormalized negative log density.
pub trait Target {
    fn dim(&self) -> usize;
    /// ψ(q); may return +∞ for states outside the support.
    fn neg_log_prob(&self, position: &DVector<f64>) -> Result<f64>;
    fn grad_neg_log_prob(&self, position: &DVector<f64>) -> Result<DVector<f64>>;
}

impl Target for Model {
    fn dim(&self) -> usize {
        Model::dim(self)
    }

    fn neg_log_prob(&self, position: &DVector<f64>) -> Result<f64> {
        self.neg_log_posterior(&UnconstrainedState::from_flat(position, self.n_contents()))
    }

    fn grad_neg_log_prob(&self, position: &DVector<f64>) -> Result<DVector<f64>> {
        self.grad_neg_log_posterior(&UnconstrainedState::from_flat(position, self.n_contents()))
    }
}

/// Standard Gaussian ψ(q) = ½‖q‖²; the calibration hook used by the tests.
#[derive(Debug, Clone, Copy)]
pub struct StdGaussianTarget {
    pub dim: usize,
}

impl Target for StdGaussianTarget {
    fn dim(&self) -> usize {
        self.dim
    }

    fn neg_log_prob(&self, position: &DVector<f64>) -> Result<f64> {
        Ok(0.5 * position.norm_squared())
    }

    fn grad_neg_log_prob(&self, position: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(position.clone())
    }
}

/// Sampler configuration. The defaults mirror the experimental settings:
/// ε = 0.015, L = 20, 5000 draws after 2500 burn-in, identity mass matrix.
#[derive(Debug, Clone)]
pub struct HmcConfig {
    pub step_size: f64,
    pub leapfrog_steps: usize,
    pub num_samples: usize,
    pub burn_in: usize,
    /// Diagonal of the momentum covariance G; `None` means identity.
    pub mass: Option<DVector<f64>>,
    pub seed: u64,
}

impl HmcConfig {
    pub fn new(seed: u64) -> Self {
        HmcConfig {
            step_size: 0.015,
            leapfrog_steps: 20,
            num_samples: 5000,
            burn_in: 2500,
            mass: None,
            seed,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.step_size > 0.0) {
            return Err(Error::invalid("step size must be > 0"));
        }
        if self.leapfrog_steps == 0 {
            return Err(Error::invalid("leapfrog steps must be >= 1"));
        }
        if self.num_samples == 0 {
            return Err(Error::invalid("num_samples must be >= 1"));
        }
        if let Some(mass) = &self.mass {
            if mass.len() != dim {
                return Err(Error::invalid(format!(
                    "mass diagonal has length {}, expected {dim}",
                    mass.len()
                )));
            }
            if mass.iter().any(|&g| !(g > 0.0)) {
                return Err(Error::invalid("mass entries must be > 0"));
            }
        }
        Ok(())
    }
}

/// H(ζ, p) = ψ(ζ) + ½ log((2π)^D |G|) + ½ pᵀG⁻¹p.
pub fn hamiltonian(
    target: &impl Target,
    position: &DVector<f64>,
    momentum: &DVector<f64>,
    mass: Option<&DVector<f64>>,
) -> Result<f64> {
    let d = target.dim();
    if momentum.len() != d || position.len() != d {
        return Err(Error::invalid("position/momentum dimension mismatch"));
    }
    let psi = target.neg_log_prob(position)?;
    let (log_det_g, kinetic) = match mass {
        None => (0.0, 0.5 * momentum.norm_squared()),
        Some(g) => {
            let logdet: f64 = g.iter().map(|gi| gi.ln()).sum();
            let kin = 0.5
                * momentum
                    .iter()
                    .zip(g.iter())
                    .map(|(p, gi)| p * p / gi)
                    .sum::<f64>();
            (logdet, kin)
        }
    };
    Ok(psi + 0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det_g) + kinetic)
}

/// L steps of the symplectic leapfrog: half-step momentum, full-step
/// position (q += εG⁻¹p), half-step momentum.
///
/// Returns an error when the gradient or the state stops being finite, which
/// the sampler treats as a divergent (rejected) trajectory.
pub fn leapfrog(
    target: &impl Target,
    position: &DVector<f64>,
    momentum: &DVector<f64>,
    step_size: f64,
    steps: usize,
    mass: Option<&DVector<f64>>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let mut q = position.clone();
    let mut p = momentum.clone();
    let half = 0.5 * step_size;

    let grad_checked = |q: &DVector<f64>| -> Result<DVector<f64>> {
        let g = target.grad_neg_log_prob(q)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("integrator diverged: non-finite gradient".into()));
        }
        Ok(g)
    };

    let mut grad = grad_checked(&q)?;
    for _ in 0..steps {
        p.axpy(-half, &grad, 1.0);
        match mass {
            None => q.axpy(step_size, &p, 1.0),
            Some(g) => {
                for i in 0..q.len() {
                    q[i] += step_size * p[i] / g[i];
                }
            }
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("integrator diverged: non-finite position".into()));
        }
        grad = grad_checked(&q)?;
        p.axpy(-half, &grad, 1.0);
    }
    Ok((q, p))
}

/// Raw chain output from [`run_chain`], still in flat ζ coordinates.
#[derive(Debug, Clone)]
pub struct Chain {
    /// One row per post-burn-in draw.
    pub draws: DMatrix<f64>,
    pub accept_rate: f64,
    pub energy_trace: Vec<f64>,
    pub accepted: Vec<bool>,
    pub divergences: usize,
}

const DIVERGENCE_WINDOW: usize = 100;

pub fn run_chain(target: &impl Target, cfg: &HmcConfig, init: &DVector<f64>) -> Result<Chain> {
    run_chain_with_momentum_sign(target, cfg, init, 1.0)
}

// The sign hook exists so tests can verify chain statistics are invariant
// under flipping every initial momentum while reusing the identical random
// stream.
fn run_chain_with_momentum_sign(
    target: &impl Target,
    cfg: &HmcConfig,
    init: &DVector<f64>,
    momentum_sign: f64,
) -> Result<Chain> {
    let d = target.dim();
    cfg.validate(d)?;
    if init.len() != d {
        return Err(Error::invalid("init dimension mismatch"));
    }
    if init.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("init must be finite"));
    }
    let psi0 = target.neg_log_prob(init)?;
    if !psi0.is_finite() {
        return Err(Error::invalid("init has non-finite target density"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total = cfg.burn_in + cfg.num_samples;
    let mut q = init.clone();

    let mut draws = DMatrix::zeros(cfg.num_samples, d);
    let mut energy_trace = Vec::with_capacity(cfg.num_samples);
    let mut accepted_flags = Vec::with_capacity(cfg.num_samples);
    let mut accepted_count = 0usize;
    let mut divergences = 0usize;
    let mut window: Vec<bool> = Vec::with_capacity(DIVERGENCE_WINDOW);
    let mut window_pos = 0usize;
    let mut window_divergent = 0usize;

    let sqrt_mass: Option<DVector<f64>> = cfg.mass.as_ref().map(|g| g.map(|v| v.sqrt()));

    for iter in 0..total {
        let mut p = DVector::from_fn(d, |_, _| {
            momentum_sign * rng.sample::<f64, _>(StandardNormal)
        });
        if let Some(s) = &sqrt_mass {
            p.component_mul_assign(s);
        }
        let u: f64 = rng.random();

        let h0 = hamiltonian(target, &q, &p, cfg.mass.as_ref())?;
        let mut divergent = false;
        let mut accept = false;
        let mut h_final = h0;
        match leapfrog(target, &q, &p, cfg.step_size, cfg.leapfrog_steps, cfg.mass.as_ref()) {
            Ok((q_new, p_new)) => {
                match hamiltonian(target, &q_new, &p_new, cfg.mass.as_ref()) {
                    Ok(h1) if h1.is_finite() && h0.is_finite() => {
                        let dh = h1 - h0;
                        if u < (-dh).exp() {
                            q = q_new;
                            accept = true;
                            h_final = h1;
                        }
                    }
                    _ => divergent = true,
                }
            }
            Err(_) => divergent = true,
        }
        if divergent {
            divergences += 1;
        }

        // Sliding 100-iteration divergence window: if essentially every
        // trajectory in it diverged, the step size is hopeless.
        if window.len() < DIVERGENCE_WINDOW {
            window.push(divergent);
            if divergent {
                window_divergent += 1;
            }
        } else {
            if window[window_pos] {
                window_divergent -= 1;
            }
            window[window_pos] = divergent;
            if divergent {
                window_divergent += 1;
            }
            window_pos = (window_pos + 1) % DIVERGENCE_WINDOW;
        }
        if window.len() == DIVERGENCE_WINDOW && window_divergent * 100 > 99 * DIVERGENCE_WINDOW {
            return Err(Error::Sampler(format!(
                "acceptance collapsed: {window_divergent}/{DIVERGENCE_WINDOW} recent trajectories \
                 diverged; try a smaller step size than {}",
                cfg.step_size
            )));
        }

        if iter >= cfg.burn_in {
            let s = iter - cfg.burn_in;
            draws.row_mut(s).copy_from(&q.transpose());
            energy_trace.push(h_final);
            accepted_flags.push(accept);
            if accept {
                accepted_count += 1;
            }
        }
    }

    Ok(Chain {
        draws,
        accept_rate: accepted_count as f64 / cfg.num_samples as f64,
        energy_trace,
        accepted: accepted_flags,
        divergences,
    })
}

/// Posterior draws split back into λ and φ blocks.
#[derive(Debug, Clone)]
pub struct PosteriorSamples {
    /// S×M matrix of λ draws.
    pub lambda_draws: DMatrix<f64>,
    /// S×(Q+2) matrix of φ = log θ draws.
    pub phi_draws: DMatrix<f64>,
    pub accept_rate: f64,
    pub energy_trace: Vec<f64>,
    pub accepted: Vec<bool>,
}

impl PosteriorSamples {
    pub fn n_draws(&self) -> usize {
        self.lambda_draws.nrows()
    }

    pub fn n_contents(&self) -> usize {
        self.lambda_draws.ncols()
    }

    /// Posterior mean of θ = e^φ, per parameter.
    pub fn theta_means(&self) -> DVector<f64> {
        let s = self.n_draws() as f64;
        DVector::from_fn(self.phi_draws.ncols(), |j, _| {
            self.phi_draws.column(j).iter().map(|p| p.exp()).sum::<f64>() / s
        })
    }
}

/// Smoothed log-MLE start: λ⁰_m = log((d̄_m + 0.5)/N), φ⁰ = 0.
pub fn default_init(data: &RequestMatrix, n_hyper: usize) -> UnconstrainedState {
    let n = data.n_slots() as f64;
    let lambda = data.row_sums().map(|s| ((s + 0.5) / n).ln());
    UnconstrainedState {
        lambda,
        phi: DVector::zeros(n_hyper),
    }
}

/// Draw S posterior samples for the popularity model. Deterministic given
/// `cfg.seed`; `init` defaults to the smoothed log-MLE start.
pub fn sample(
    data: &RequestMatrix,
    features: &FeatureMatrix,
    priors: &[GammaPrior],
    cfg: &HmcConfig,
    init: Option<UnconstrainedState>,
) -> Result<PosteriorSamples> {
    let model = Model::new(data, features, priors)?;
    let m = model.n_contents();
    let init = init.unwrap_or_else(|| default_init(data, model.n_params()));
    let chain = run_chain(&model, cfg, &init.to_flat())?;

    let s = chain.draws.nrows();
    let n_params = model.n_params();
    let mut lambda_draws = DMatrix::zeros(s, m);
    let mut phi_draws = DMatrix::zeros(s, n_params);
    for i in 0..s {
        for j in 0..m {
            lambda_draws[(i, j)] = chain.draws[(i, j)];
        }
        for j in 0..n_params {
            phi_draws[(i, j)] = chain.draws[(i, m + j)];
        }
    }
    Ok(PosteriorSamples {
        lambda_draws,
        phi_draws,
        accept_rate: chain.accept_rate,
        energy_trace: chain.energy_trace,
        accepted: chain.accepted,
    })
}

/// E{d_{c,N+1}|D} ≈ (1/S) Σ_s e^{λ^{(s)}}, elementwise over contents.
pub fn posterior_mean_rates(samples: &PosteriorSamples) -> DVector<f64> {
    let s = samples.n_draws() as f64;
    DVector::from_fn(samples.n_contents(), |m, _| {
        samples
            .lambda_draws
            .column(m)
            .iter()
            .map(|l| l.exp())
            .sum::<f64>()
            / s
    })
}

/// Dump one row per post-burn-in draw:
/// `draw,lambda_1..lambda_M,phi_0..phi_{Q+1},accepted,H`.
pub fn write_draws_csv(samples: &PosteriorSamples, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "draw")?;
    for m in 0..samples.n_contents() {
        write!(f, ",lambda_{}", m + 1)?;
    }
    for j in 0..samples.phi_draws.ncols() {
        write!(f, ",phi_{j}")?;
    }
    writeln!(f, ",accepted,H")?;
    for s in 0..samples.n_draws() {
        write!(f, "{s}")?;
        for m in 0..samples.n_contents() {
            write!(f, ",{}", samples.lambda_draws[(s, m)])?;
        }
        for j in 0..samples.phi_draws.ncols() {
            write!(f, ",{}", samples.phi_draws[(s, j)])?;
        }
        writeln!(
            f,
            ",{},{}",
            u8::from(samples.accepted[s]),
            samples.energy_trace[s]
        )?;
    }
    Ok(())
}
