//! Shared independent oracles for the integration and acceptance suites.
//! Everything here is deliberately implemented from scratch (no calls into
//! the library's own solver paths) so it can stand as a cross-check.

// not every test binary uses every oracle
#![allow(dead_code)]

/// Central finite differences of a scalar function.
pub fn central_diff<F: Fn(&[f64]) -> f64>(f: F, point: &[f64], eps: f64) -> Vec<f64> {
    let mut grads = Vec::with_capacity(point.len());
    let mut work = point.to_vec();
    for i in 0..point.len() {
        work[i] = point[i] + eps;
        let up = f(&work);
        work[i] = point[i] - eps;
        let dn = f(&work);
        work[i] = point[i];
        grads.push((up - dn) / (2.0 * eps));
    }
    grads
}

/// Quadrature summary of the one-content posterior
/// p(λ | D) ∝ exp(d̄·λ − N·e^λ) · N(λ | 0, v).
#[derive(Debug, Clone, Copy)]
pub struct Quad1d {
    pub mean: f64,
    pub variance: f64,
    /// log ∫ exp(d̄·λ − N·e^λ) · N(λ | 0, v) dλ  (no factorial terms).
    pub log_evidence: f64,
}

/// Simpson's rule on the log-density, centered on the posterior mode.
pub fn quadrature_1d(dbar: f64, n_slots: f64, prior_var: f64) -> Quad1d {
    assert!(prior_var > 0.0 && n_slots > 0.0 && dbar >= 0.0);
    let logw = |lam: f64| {
        dbar * lam - n_slots * lam.exp() - lam * lam / (2.0 * prior_var)
            - 0.5 * (2.0 * std::f64::consts::PI * prior_var).ln()
    };
    // mode by Newton on d̄ − N e^λ − λ/v
    let mut mode = ((dbar + 0.5) / n_slots).ln();
    for _ in 0..100 {
        let g = dbar - n_slots * mode.exp() - mode / prior_var;
        let h = -n_slots * mode.exp() - 1.0 / prior_var;
        let step = g / h;
        mode -= step;
        if step.abs() < 1e-13 {
            break;
        }
    }
    let sd = (1.0 / (n_slots * mode.exp() + 1.0 / prior_var)).sqrt();
    let (lo, hi) = (mode - 12.0 * sd, mode + 12.0 * sd);
    let points = 4001usize; // odd, for Simpson
    let h = (hi - lo) / (points - 1) as f64;

    let logs: Vec<f64> = (0..points).map(|i| logw(lo + i as f64 * h)).collect();
    let max_log = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let simpson_coef = |i: usize| -> f64 {
        if i == 0 || i == points - 1 {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        }
    };
    let mut z = 0.0;
    let mut m1 = 0.0;
    let mut m2 = 0.0;
    for i in 0..points {
        let lam = lo + i as f64 * h;
        let w = simpson_coef(i) * (logs[i] - max_log).exp();
        z += w;
        m1 += w * lam;
        m2 += w * lam * lam;
    }
    let mean = m1 / z;
    Quad1d {
        mean,
        variance: m2 / z - mean * mean,
        log_evidence: max_log + (z * h / 3.0).ln(),
    }
}

/// Brute-force 0/1 knapsack optimum by subset enumeration (≤ ~20 items).
pub fn enumerate_knapsack(sizes: &[f64], values: &[f64], capacity: f64) -> f64 {
    let m = sizes.len();
    assert!(m <= 20, "enumeration oracle limited to 20 items");
    let mut best = 0.0_f64;
    for mask in 0u64..(1 << m) {
        let mut s = 0.0;
        let mut v = 0.0;
        for i in 0..m {
            if mask & (1 << i) != 0 {
                s += sizes[i];
                v += values[i];
            }
        }
        if s <= capacity {
            best = best.max(v);
        }
    }
    best
}

/// Root mean squared error between two popularity vectors.
pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (ss / a.len() as f64).sqrt()
}

pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}
