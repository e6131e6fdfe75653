//! Command implementations plus the shared experiment plumbing: backend
//! selection, config-to-solver translation, and seed-stream layout.

pub mod chr;
pub mod fit;
pub mod gen;
pub mod ingest;
pub mod rmse;
pub mod tables;

use pgp_core::datagen::SyntheticDataset;
use pgp_core::hmc::{posterior_mean_rates, HmcConfig};
use pgp_core::posterior::{mle_popularity, GammaPrior};
use pgp_core::predict::{predict_unseen_hmc_batch, predict_unseen_vb_batch};
use pgp_core::vb::{vb_mean_rates, VbConfig};

use crate::{CliError, ExperimentConfig};

// Seed-stream bases: every RNG consumer derives its seed from the master
// seed and a disjoint stream index.
pub const STREAM_GEN: u64 = 0x0100_0000_0000;
pub const STREAM_FIT: u64 = 0x0200_0000_0000;
pub const STREAM_FUTURE: u64 = 0x0300_0000_0000;
pub const STREAM_MLERAND: u64 = 0x0400_0000_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Mle,
    Vb,
    Hmc,
    /// Ground-truth passthrough (test hook for harness validation).
    Truth,
}

impl BackendKind {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "mle" => Ok(BackendKind::Mle),
            "vb" | "pgp-vb" => Ok(BackendKind::Vb),
            "hmc" | "pgp-hmc" => Ok(BackendKind::Hmc),
            "truth" => Ok(BackendKind::Truth),
            other => Err(CliError::Config(format!("unknown backend {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BackendKind::Mle => "mle",
            BackendKind::Vb => "vb",
            BackendKind::Hmc => "hmc",
            BackendKind::Truth => "truth",
        }
    }
}

pub fn vb_config_from(cfg: &ExperimentConfig) -> Result<VbConfig, CliError> {
    let d = VbConfig::default();
    Ok(VbConfig {
        outer_tol: cfg.f64_or("vb.outer_tol", d.outer_tol)?,
        max_outer: cfg.usize_or("vb.max_outer", d.max_outer)?,
        spca_tol: cfg.f64_or("vb.spca_tol", d.spca_tol)?,
        max_spca: cfg.usize_or("vb.max_spca", d.max_spca)?,
        armijo_gamma: cfg.f64_or("vb.armijo_gamma", d.armijo_gamma)?,
        armijo_eta: cfg.f64_or("vb.armijo_eta", d.armijo_eta)?,
        wolfe_c2: cfg.f64_or("vb.wolfe_c2", d.wolfe_c2)?,
        newton_tol: cfg.f64_or("vb.newton_tol", d.newton_tol)?,
        max_newton: cfg.usize_or("vb.max_newton", d.max_newton)?,
        bfgs_grad_tol: cfg.f64_or("vb.bfgs_grad_tol", d.bfgs_grad_tol)?,
        max_bfgs: cfg.usize_or("vb.max_bfgs", d.max_bfgs)?,
        seed: 0,
    })
}

/// Desk-scale HMC defaults (2000 draws, 1000 burn-in); the full-scale
/// config raises these to 5000/2500.
pub fn hmc_config_from(cfg: &ExperimentConfig, seed: u64) -> Result<HmcConfig, CliError> {
    let mut c = HmcConfig::new(seed);
    c.num_samples = cfg.usize_or("hmc.draws", 2000)?;
    c.burn_in = cfg.usize_or("hmc.burn_in", 1000)?;
    c.step_size = cfg.f64_or("hmc.step_size", 0.015)?;
    c.leapfrog_steps = cfg.usize_or("hmc.leapfrog", 20)?;
    Ok(c)
}

pub fn gamma_priors_from(cfg: &ExperimentConfig, q: usize) -> Result<Vec<GammaPrior>, CliError> {
    let default = GammaPrior::default_hyperprior();
    let shape = cfg.f64_or("prior.shape", default.shape)?;
    let rate = cfg.f64_or("prior.rate", default.rate)?;
    Ok(vec![GammaPrior::new(shape, rate)?; q + 2])
}

/// Popularity estimates a backend produces for one dataset: per-seen-content
/// Type-1 rates, plus Type-2 means for the unseen contents when the backend
/// supports them.
pub struct BackendFit {
    pub seen_rates: Vec<f64>,
    pub unseen_means: Option<Vec<f64>>,
    /// Fitted θ = (η, α₀..α_Q) where the backend estimates one.
    pub theta: Option<Vec<f64>>,
}

pub fn run_backend(
    kind: BackendKind,
    ds: &SyntheticDataset,
    cfg: &ExperimentConfig,
    fit_seed: u64,
) -> Result<BackendFit, CliError> {
    let seen_features = ds.seen_features()?;
    let unseen_features = ds.unseen_features()?;
    match kind {
        BackendKind::Mle => Ok(BackendFit {
            seen_rates: mle_popularity(&ds.requests).as_slice().to_vec(),
            unseen_means: None,
            theta: None,
        }),
        BackendKind::Truth => {
            let truth = ds.truth.as_ref().ok_or_else(|| {
                CliError::Config("truth backend needs a dataset with ground truth".into())
            })?;
            let seen: Vec<f64> = (0..ds.n_total())
                .filter(|&i| ds.seen_mask[i])
                .map(|i| truth.popularities[i])
                .collect();
            let unseen: Vec<f64> = (0..ds.n_total())
                .filter(|&i| !ds.seen_mask[i])
                .map(|i| truth.popularities[i])
                .collect();
            Ok(BackendFit {
                seen_rates: seen,
                unseen_means: (!unseen.is_empty()).then_some(unseen),
                theta: None,
            })
        }
        BackendKind::Vb => {
            let vb_cfg = vb_config_from(cfg)?;
            let vp = pgp_core::vb::fit(&ds.requests, &seen_features, &vb_cfg, None)?;
            let unseen_means = match &unseen_features {
                Some(uf) => Some(
                    predict_unseen_vb_batch(&vp, uf, &seen_features)?
                        .iter()
                        .map(|p| p.mean)
                        .collect(),
                ),
                None => None,
            };
            let mut theta = vec![vp.theta.eta()];
            theta.extend_from_slice(vp.theta.alphas());
            Ok(BackendFit {
                seen_rates: vb_mean_rates(&vp).as_slice().to_vec(),
                unseen_means,
                theta: Some(theta),
            })
        }
        BackendKind::Hmc => {
            let hmc_cfg = hmc_config_from(cfg, fit_seed)?;
            let priors = gamma_priors_from(cfg, seen_features.n_features())?;
            let samples =
                pgp_core::hmc::sample(&ds.requests, &seen_features, &priors, &hmc_cfg, None)?;
            let stride = cfg.usize_or("hmc.prediction_stride", 10)?;
            let unseen_means = match &unseen_features {
                Some(uf) => Some(
                    predict_unseen_hmc_batch(&samples, uf, &seen_features, stride)?
                        .iter()
                        .map(|p| p.mean)
                        .collect(),
                ),
                None => None,
            };
            Ok(BackendFit {
                seen_rates: posterior_mean_rates(&samples).as_slice().to_vec(),
                unseen_means,
                theta: Some(samples.theta_means().as_slice().to_vec()),
            })
        }
    }
}

pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (ss / a.len() as f64).sqrt()
}

pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
