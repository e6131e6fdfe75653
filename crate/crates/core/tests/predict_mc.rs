//! Monte Carlo cross-checks of the posterior-predictive means, including the
//! oracle that adjudicates the Type-2 variational variance: drawing λ ~ q,
//! conditioning the GP, and averaging must match the closed form.

mod common;

use nalgebra::{DMatrix, DVector};
use pgp_core::hmc::PosteriorSamples;
use pgp_core::kernel::{build_cov, FeatureMatrix, HyperParams};
use pgp_core::predict::{
    gp_condition, predict_seen_hmc, predict_seen_vb, predict_unseen_hmc, predict_unseen_vb,
};
use pgp_core::vb::{FitStatus, VariationalPosterior};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn vp_with(mu: Vec<f64>, sigma: Vec<f64>, theta: HyperParams) -> VariationalPosterior {
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
fn vb_type1_mean_matches_lognormal_monte_carlo() {
    // 100k-draw estimate of E[e^λ] under N(μ, σ) within 1%
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let (mu, sigma) = (0.4_f64, 0.3_f64);
    let theta = HyperParams::new(0.1, vec![0.5]).unwrap();
    let vp = vp_with(vec![mu], vec![sigma], theta);
    let pred = predict_seen_vb(&vp, 0).unwrap();

    let draws = 100_000;
    let mut acc = 0.0;
    for _ in 0..draws {
        let z: f64 = rng.sample(StandardNormal);
        acc += (mu + sigma.sqrt() * z).exp();
    }
    let mc = acc / draws as f64;
    assert!(
        (pred.mean / mc - 1.0).abs() < 0.01,
        "closed form {} vs MC {mc}",
        pred.mean
    );
}

#[test]
fn vb_type2_matches_marginalization_monte_carlo() {
    // Draw λ ~ q = N(μ, Σ), condition the GP at x_new, and average
    // e^{λ̂_new(λ) + σ̂_new/2} over 100k draws. The analytic identity gives
    // e^{λ̄ + (σ̂ + k̃ᵀK̃⁻¹ΣK̃⁻¹k̃)/2}: the quadratic term enters with a PLUS
    // sign (the printed display subtracts it). The implementation must match
    // the Monte Carlo marginalization within 2%.
    let features =
        FeatureMatrix::from_rows(&[vec![0.0, 0.3], vec![1.0, -0.2], vec![0.4, 0.8]]).unwrap();
    let hp = HyperParams::new(0.05, vec![0.8, 0.6, 0.4]).unwrap();
    let mu = vec![0.5, -0.3, 0.2];
    let sigma = vec![0.30, 0.20, 0.25]; // large enough to expose the sign
    let vp = vp_with(mu.clone(), sigma.clone(), hp.clone());
    let x_new = [0.5, 0.1];

    let pred = predict_unseen_vb(&vp, &x_new, &features).unwrap();

    let cf = build_cov(&features, &hp, 0.0).unwrap();
    let mut k = DVector::zeros(3);
    for i in 0..3 {
        k[i] = pgp_core::kernel::sek_entry(&features.row(i), &x_new, &hp).unwrap();
    }
    let u = cf.solve_vec(&k);
    let sig_cond = hp.alpha0() + hp.eta() - k.dot(&u);

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let draws = 100_000;
    let mut acc = 0.0;
    for _ in 0..draws {
        let lam = DVector::from_fn(3, |i, _| {
            mu[i] + sigma[i].sqrt() * rng.sample::<f64, _>(StandardNormal)
        });
        let lam_new = u.dot(&lam);
        acc += (lam_new + 0.5 * sig_cond).exp();
    }
    let mc = acc / draws as f64;
    assert!(
        (pred.mean / mc - 1.0).abs() < 0.02,
        "implementation {} vs MC marginalization {mc}",
        pred.mean
    );

    // and the variant that subtracts the quadratic term does NOT reproduce
    // the marginalization
    let quad: f64 = (0..3).map(|i| sigma[i] * u[i] * u[i]).sum();
    let minus_sign_mean = (u.dot(&DVector::from_vec(mu.clone()))
        + 0.5 * (sig_cond - quad).max(1e-12))
    .exp();
    assert!(
        (minus_sign_mean / mc - 1.0).abs() > 0.02,
        "minus-sign variant unexpectedly matches: {minus_sign_mean} vs {mc}"
    );
}

#[test]
fn type2_collapses_to_type1_on_duplicated_features_both_backends() {
    // η = 1e-8 and x_new = x_1: Type-2 must agree with Type-1 within 1%
    let features = FeatureMatrix::from_rows(&[
        vec![0.0, 1.0],
        vec![1.0, 0.0],
        vec![0.5, 0.5],
        vec![-0.3, 0.2],
    ])
    .unwrap();
    let x_new = [0.0, 1.0];
    let theta = HyperParams::new(1e-8, vec![0.5, 0.7, 0.4]).unwrap();

    // VB with realistic fitted-scale variances (σ ~ 1/N)
    let vp = vp_with(
        vec![0.6, -0.2, 0.1, 0.4],
        vec![0.05, 0.04, 0.06, 0.05],
        theta.clone(),
    );
    let t1 = predict_seen_vb(&vp, 0).unwrap();
    let t2 = predict_unseen_vb(&vp, &x_new, &features).unwrap();
    assert!(
        (t2.mean / t1.mean - 1.0).abs() < 0.01,
        "VB: type2 {} vs type1 {}",
        t2.mean,
        t1.mean
    );

    // HMC: λ draws vary, θ draws pinned at the same hyperparameters
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let s = 50;
    let lambda_draws = DMatrix::from_fn(s, 4, |_, j| {
        [0.6, -0.2, 0.1, 0.4][j] + 0.2 * rng.sample::<f64, _>(StandardNormal)
    });
    let phi = theta.to_log();
    let phi_draws = DMatrix::from_fn(s, phi.len(), |_, j| phi[j]);
    let samples = PosteriorSamples {
        lambda_draws,
        phi_draws,
        accept_rate: 1.0,
        energy_trace: vec![0.0; s],
        accepted: vec![true; s],
    };
    let t1 = predict_seen_hmc(&samples, 0).unwrap();
    let t2 = predict_unseen_hmc(&samples, &x_new, &features, 1).unwrap();
    assert!(
        (t2.mean / t1.mean - 1.0).abs() < 0.01,
        "HMC: type2 {} vs type1 {}",
        t2.mean,
        t1.mean
    );
}

#[test]
fn hmc_type2_stride_stays_close_to_full_average() {
    let features = FeatureMatrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = 200;
    let lambda_draws = DMatrix::from_fn(s, 2, |_, _| 0.3 * rng.sample::<f64, _>(StandardNormal));
    let hp = HyperParams::new(0.05, vec![0.5, 0.6]).unwrap();
    let phi = hp.to_log();
    let phi_draws = DMatrix::from_fn(s, phi.len(), |_, j| phi[j]);
    let samples = PosteriorSamples {
        lambda_draws,
        phi_draws,
        accept_rate: 1.0,
        energy_trace: vec![0.0; s],
        accepted: vec![true; s],
    };
    let full = predict_unseen_hmc(&samples, &[0.4], &features, 1).unwrap();
    let strided = predict_unseen_hmc(&samples, &[0.4], &features, 10).unwrap();
    assert!(
        (strided.mean / full.mean - 1.0).abs() < 0.05,
        "stride 10 {} vs full {}",
        strided.mean,
        full.mean
    );
}

#[test]
fn gp_condition_errors_on_bad_lambda_length() {
    let features = FeatureMatrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
    let hp = HyperParams::new(0.1, vec![0.5, 0.5]).unwrap();
    let lambda = DVector::from_vec(vec![1.0]);
    assert!(gp_condition(&[0.3], &lambda, &hp, &features).is_err());
}
