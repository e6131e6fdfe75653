//! Posterior-predictive point predictions: Type 1 for contents with request
//! history, Type 2 for unseen contents scored purely through feature
//! similarity, for both inference backends.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hmc::PosteriorSamples;
use crate::kernel::{build_cov, sek_entry, CovFactor, FeatureMatrix, HyperParams};
use crate::vb::VariationalPosterior;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictionBackend {
    Hmc,
    Vb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictionKind {
    Type1,
    Type2,
}

/// Expected next-slot request count plus a predictive spread
/// (Var[d] = E[rate] + Var[rate], the Poisson-mixture total variance).
#[derive(Debug, Clone, Copy)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
    pub backend: PredictionBackend,
    pub kind: PredictionKind,
    /// Set when the conditional variance had to be clamped away from a
    /// (numerically) negative value.
    pub variance_clamped: bool,
}

const VARIANCE_FLOOR: f64 = 1e-12;

/// Type-1 prediction from HMC draws: mean (1/S)Σ e^{λ_m^{(s)}}, variance the
/// sample analogue of rate variance plus Poisson variance.
pub fn predict_seen_hmc(samples: &PosteriorSamples, m: usize) -> Result<Prediction> {
    if m >= samples.n_contents() {
        return Err(Error::invalid(format!("content index {m} out of range")));
    }
    let s = samples.n_draws() as f64;
    let mut mean = 0.0;
    let mut second = 0.0;
    for lam in samples.lambda_draws.column(m).iter() {
        let r = lam.exp();
        mean += r;
        second += r * r;
    }
    mean /= s;
    second /= s;
    Ok(Prediction {
        mean,
        variance: mean + (second - mean * mean).max(0.0),
        backend: PredictionBackend::Hmc,
        kind: PredictionKind::Type1,
        variance_clamped: false,
    })
}

/// Type-1 prediction from the variational posterior: mean e^{μ_m + σ_m/2},
/// variance (e^{σ_m} − 1)e^{2μ_m + σ_m} + e^{μ_m + σ_m/2}.
pub fn predict_seen_vb(vp: &VariationalPosterior, m: usize) -> Result<Prediction> {
    if m >= vp.n_contents() {
        return Err(Error::invalid(format!("content index {m} out of range")));
    }
    let (mu, sigma) = (vp.mu[m], vp.sigma[m]);
    let mean = (mu + 0.5 * sigma).exp();
    let rate_var = (sigma.exp() - 1.0) * (2.0 * mu + sigma).exp();
    Ok(Prediction {
        mean,
        variance: mean + rate_var,
        backend: PredictionBackend::Vb,
        kind: PredictionKind::Type1,
        variance_clamped: false,
    })
}

/// Condition the GP at a new feature vector given latent values λ at the
/// training contents:
/// λ̂_new = k̃ᵀK̃⁻¹λ,  σ̂_new = K(x_new, x_new) + η − k̃ᵀK̃⁻¹k̃.
pub fn gp_condition(
    new_features: &[f64],
    lambda: &DVector<f64>,
    hp: &HyperParams,
    features: &FeatureMatrix,
) -> Result<(f64, f64)> {
    let cf = build_cov(features, hp, 0.0)?;
    gp_condition_with_factor(new_features, lambda, hp, features, &cf)
}

fn cross_covariances(
    new_features: &[f64],
    hp: &HyperParams,
    features: &FeatureMatrix,
) -> Result<DVector<f64>> {
    let m = features.n_contents();
    let mut k = DVector::zeros(m);
    for i in 0..m {
        k[i] = sek_entry(&features.row(i), new_features, hp)?;
    }
    Ok(k)
}

/// [`gp_condition`] with an already-built covariance factor (shared across
/// many new contents or posterior draws).
pub fn gp_condition_with_factor(
    new_features: &[f64],
    lambda: &DVector<f64>,
    hp: &HyperParams,
    features: &FeatureMatrix,
    cf: &CovFactor,
) -> Result<(f64, f64)> {
    if lambda.len() != features.n_contents() {
        return Err(Error::invalid("lambda length does not match training contents"));
    }
    let k = cross_covariances(new_features, hp, features)?;
    let u = cf.solve_vec(&k);
    let mean = u.dot(lambda);
    // K(x_new, x_new) = α₀ exactly; positivity follows from the Schur
    // complement given η > 0, the floor only absorbs roundoff
    let var = (hp.alpha0() + hp.eta() - k.dot(&u)).max(VARIANCE_FLOOR);
    Ok((mean, var))
}

/// Type-2 prediction under HMC: for every `stride`-th draw, condition the GP
/// with that draw's λ and θ = e^φ, then average e^{λ̂ + σ̂/2} over draws.
pub fn predict_unseen_hmc(
    samples: &PosteriorSamples,
    new_features: &[f64],
    features: &FeatureMatrix,
    stride: usize,
) -> Result<Prediction> {
    let unseen = FeatureMatrix::from_rows(&[new_features.to_vec()])?;
    Ok(predict_unseen_hmc_batch(samples, &unseen, features, stride)?.remove(0))
}

/// Batch Type-2 HMC prediction sharing each per-draw factorization across all
/// new contents. Draw accumulation is ordered by draw index, so the result is
/// independent of how the per-draw work is scheduled.
pub fn predict_unseen_hmc_batch(
    samples: &PosteriorSamples,
    new_features: &FeatureMatrix,
    features: &FeatureMatrix,
    stride: usize,
) -> Result<Vec<Prediction>> {
    if samples.n_draws() == 0 {
        return Err(Error::invalid("need at least one posterior draw"));
    }
    if samples.n_contents() != features.n_contents() {
        return Err(Error::invalid("draws and training features disagree on M"));
    }
    let stride = stride.max(1);
    let draw_indices: Vec<usize> = (0..samples.n_draws()).step_by(stride).collect();
    let n_new = new_features.n_contents();

    // per draw: (Σ per-content conditional means, Σ per-content second moments)
    let per_draw: Result<Vec<Vec<(f64, f64)>>> = draw_indices
        .par_iter()
        .map(|&s| {
            let phi: Vec<f64> = samples.phi_draws.row(s).iter().copied().collect();
            let hp = HyperParams::from_log(&phi)?;
            let lambda = DVector::from_fn(samples.n_contents(), |i, _| {
                samples.lambda_draws[(s, i)]
            });
            let cf = build_cov(features, &hp, 0.0)?;
            let mut vals = Vec::with_capacity(n_new);
            for j in 0..n_new {
                let (lam_new, sig_new) =
                    gp_condition_with_factor(&new_features.row(j), &lambda, &hp, features, &cf)?;
                let mean = (lam_new + 0.5 * sig_new).exp();
                let second = (2.0 * lam_new + 2.0 * sig_new).exp();
                vals.push((mean, second));
            }
            Ok(vals)
        })
        .collect();
    let per_draw = per_draw?;

    let count = draw_indices.len() as f64;
    let mut out = Vec::with_capacity(n_new);
    for j in 0..n_new {
        let mut mean = 0.0;
        let mut second = 0.0;
        for draw in &per_draw {
            mean += draw[j].0;
            second += draw[j].1;
        }
        mean /= count;
        second /= count;
        out.push(Prediction {
            mean,
            variance: mean + (second - mean * mean).max(0.0),
            backend: PredictionBackend::Hmc,
            kind: PredictionKind::Type2,
            variance_clamped: false,
        });
    }
    Ok(out)
}

/// Type-2 prediction under VB:
/// λ̄_new = k̃ᵀK̃⁻¹μ and σ̄_new = σ̂_new + k̃ᵀK̃⁻¹ΣK̃⁻¹k̃ with Σ = Diag(σ),
/// mean e^{λ̄_new + σ̄_new/2}.
///
/// Marginalizing λ ~ q through the GP conditional adds the ΣK̃⁻¹k̃ quadratic
/// term to the conditional variance; the Monte Carlo cross-check lives in the
/// prediction test suite. Negative variances are clamped and flagged.
pub fn predict_unseen_vb(
    vp: &VariationalPosterior,
    new_features: &[f64],
    features: &FeatureMatrix,
) -> Result<Prediction> {
    let unseen = FeatureMatrix::from_rows(&[new_features.to_vec()])?;
    Ok(predict_unseen_vb_batch(vp, &unseen, features)?.remove(0))
}

/// Batch Type-2 VB prediction sharing one factorization of K̃ at the fitted θ.
pub fn predict_unseen_vb_batch(
    vp: &VariationalPosterior,
    new_features: &FeatureMatrix,
    features: &FeatureMatrix,
) -> Result<Vec<Prediction>> {
    if vp.n_contents() != features.n_contents() {
        return Err(Error::invalid("posterior and training features disagree on M"));
    }
    let hp = &vp.theta;
    let cf = build_cov(features, hp, 0.0)?;
    let mut out = Vec::with_capacity(new_features.n_contents());
    for j in 0..new_features.n_contents() {
        let k = cross_covariances(&new_features.row(j), hp, features)?;
        let u = cf.solve_vec(&k);
        let lam_new = u.dot(&vp.mu);
        let sig_cond = (hp.alpha0() + hp.eta() - k.dot(&u)).max(VARIANCE_FLOOR);
        let quad: f64 = (0..u.len()).map(|i| vp.sigma[i] * u[i] * u[i]).sum();
        let sig_raw = sig_cond + quad;
        let clamped = sig_raw < VARIANCE_FLOOR;
        let sig_new = sig_raw.max(VARIANCE_FLOOR);
        let mean = (lam_new + 0.5 * sig_new).exp();
        let rate_var = (sig_new.exp() - 1.0) * (2.0 * lam_new + sig_new).exp();
        out.push(Prediction {
            mean,
            variance: mean + rate_var,
            backend: PredictionBackend::Vb,
            kind: PredictionKind::Type2,
            variance_clamped: clamped,
        });
    }
    Ok(out)
}
