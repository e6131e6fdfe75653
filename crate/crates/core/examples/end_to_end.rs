//! End-to-end demo on one synthetic replication: fit both backends, compare
//! prediction error against the MLE baseline, then place a cache and score
//! its hit ratio.
//!
//! Usage: cargo run --release --example end_to_end [M] [N] [seed]

use std::time::Instant;

use pgp_core::cache::{evaluate_chr, mle_rand_place, place};
use pgp_core::datagen::{gen_cell_level, gen_future_requests, CellGenConfig};
use pgp_core::hmc::{posterior_mean_rates, sample, HmcConfig};
use pgp_core::posterior::{mle_popularity, GammaPrior};
use pgp_core::predict::{predict_unseen_hmc_batch, predict_unseen_vb_batch};
use pgp_core::vb::{fit, vb_mean_rates, VbConfig};

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (ss / a.len() as f64).sqrt()
}

fn main() {
    let m = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let n = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(20);
    let seed = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(42);

    let ds = gen_cell_level(&CellGenConfig::defaults(m, n, seed)).unwrap();
    let truth = ds.truth.as_ref().unwrap();
    let seen_truth: Vec<f64> = (0..m).map(|i| truth.popularities[i]).collect();
    let unseen_truth: Vec<f64> = (m..ds.n_total()).map(|i| truth.popularities[i]).collect();
    let seen = ds.seen_features().unwrap();
    let unseen = ds.unseen_features().unwrap().unwrap();
    println!(
        "workload: {} seen + {} unseen contents, {n} slots, seed {seed}",
        m,
        ds.n_total() - m
    );

    let mle = mle_popularity(&ds.requests);
    println!("mle   type1 rmse {:.4}", rmse(mle.as_slice(), &seen_truth));

    let t = Instant::now();
    let vp = fit(&ds.requests, &seen, &VbConfig::default(), None).unwrap();
    let vb_rates = vb_mean_rates(&vp);
    let vb_unseen: Vec<f64> = predict_unseen_vb_batch(&vp, &unseen, &seen)
        .unwrap()
        .iter()
        .map(|p| p.mean)
        .collect();
    println!(
        "vb    type1 rmse {:.4}  type2 rmse {:.4}  ({:.2?})",
        rmse(vb_rates.as_slice(), &seen_truth),
        rmse(&vb_unseen, &unseen_truth),
        t.elapsed()
    );

    let mut hmc_cfg = HmcConfig::new(seed ^ 0xABCD);
    hmc_cfg.num_samples = 2000;
    hmc_cfg.burn_in = 1000;
    let t = Instant::now();
    let samples = sample(
        &ds.requests,
        &seen,
        &GammaPrior::default_set(seen.n_features()),
        &hmc_cfg,
        None,
    )
    .unwrap();
    let hmc_rates = posterior_mean_rates(&samples);
    let hmc_unseen: Vec<f64> = predict_unseen_hmc_batch(&samples, &unseen, &seen, 10)
        .unwrap()
        .iter()
        .map(|p| p.mean)
        .collect();
    println!(
        "hmc   type1 rmse {:.4}  type2 rmse {:.4}  ({:.2?}, accept {:.2})",
        rmse(hmc_rates.as_slice(), &seen_truth),
        rmse(&hmc_unseen, &unseen_truth),
        t.elapsed(),
        samples.accept_rate
    );

    // place a cache at 30% capacity using the VB estimates and score it
    let mut pops = vec![0.0; ds.n_total()];
    for i in 0..m {
        pops[i] = vb_rates[i];
    }
    for (k, p) in vb_unseen.iter().enumerate() {
        pops[m + k] = *p;
    }
    let capacity = 0.3 * ds.catalog.total_size();
    let plan = place(&pops, &ds.catalog, capacity).unwrap();
    let baseline = mle_rand_place(&ds.requests, &ds.catalog, capacity, seed ^ 0x77).unwrap();
    let future = gen_future_requests(truth.popularities.as_slice(), 30, seed ^ 0xF0).unwrap();
    println!(
        "chr @ 0.3 capacity: pgp-vb {:.4} vs mle-rand {:.4}",
        evaluate_chr(&plan, &future).unwrap(),
        evaluate_chr(&baseline, &future).unwrap()
    );
}
