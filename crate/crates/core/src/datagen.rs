//! Synthetic workload generation: cell-level model draws for the
//! prediction-accuracy experiments and user-level draws (Dirichlet user
//! profiles, joint content×user kernel) for the cache-hit-ratio experiments,
//! plus the on-disk dataset dump format shared with the ingestion pipeline.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};

use crate::cache::ContentCatalog;
use crate::error::{Error, Result};
use crate::kernel::{build_kernel_matrix, factor_psd, FeatureMatrix, HyperParams};
use crate::posterior::RequestMatrix;

/// Per-dimension feature distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FeatureDist {
    Bernoulli(f64),
    StandardNormal,
}

/// The feature mix used throughout the experiments: three Bernoulli
/// dimensions (p = 0.5, 0.8, 0.2) and one standard normal.
pub fn default_feature_spec() -> Vec<FeatureDist> {
    vec![
        FeatureDist::Bernoulli(0.5),
        FeatureDist::Bernoulli(0.8),
        FeatureDist::Bernoulli(0.2),
        FeatureDist::StandardNormal,
    ]
}

/// The generating hyperparameters for the prediction experiments:
/// η = 1e-4, α₀ = 0.1, α = (0.25, 0, 0.1, 0.5).
pub fn default_true_hp() -> HyperParams {
    HyperParams::new(1e-4, vec![0.1, 0.25, 0.0, 0.1, 0.5]).expect("valid defaults")
}

/// Cell-level generator configuration.
#[derive(Debug, Clone)]
pub struct CellGenConfig {
    pub m_seen: usize,
    /// Unseen contents as a fraction of the seen count.
    pub unseen_fraction: f64,
    pub n_slots: usize,
    pub feature_spec: Vec<FeatureDist>,
    pub true_hp: HyperParams,
    pub seed: u64,
}

impl CellGenConfig {
    pub fn defaults(m_seen: usize, n_slots: usize, seed: u64) -> Self {
        CellGenConfig {
            m_seen,
            unseen_fraction: 0.25,
            n_slots,
            feature_spec: default_feature_spec(),
            true_hp: default_true_hp(),
            seed,
        }
    }

    pub fn n_unseen(&self) -> usize {
        (self.unseen_fraction * self.m_seen as f64).round() as usize
    }

    fn validate(&self) -> Result<()> {
        if self.m_seen < 2 {
            return Err(Error::invalid("need at least 2 seen contents"));
        }
        if self.unseen_fraction < 0.0 {
            return Err(Error::invalid("unseen_fraction must be >= 0"));
        }
        if self.n_slots == 0 {
            return Err(Error::invalid("need at least one time slot"));
        }
        if self.feature_spec.len() != self.true_hp.n_feature_scales() {
            return Err(Error::invalid(
                "feature_spec length must match the kernel's feature scales",
            ));
        }
        Ok(())
    }
}

/// User-level generator configuration.
#[derive(Debug, Clone)]
pub struct UserGenConfig {
    pub m_seen: usize,
    pub unseen_fraction: f64,
    pub n_slots: usize,
    /// Number of users U.
    pub users: usize,
    /// User profile dimension P.
    pub p_user_features: usize,
    /// Symmetric Dirichlet concentration ω for the user profiles.
    pub dirichlet_omega: f64,
    /// Vertical scale of the joint kernel (the sweep variable).
    pub alpha0: f64,
    /// Content-feature scales α₁..α_Q, shared across users.
    pub content_alphas: Vec<f64>,
    /// Observation-level variance of λ around the GP draw.
    pub eta: f64,
    /// User-profile scale β, shared across profile dimensions and users.
    pub beta: f64,
    pub feature_spec: Vec<FeatureDist>,
    pub size_range: (f64, f64),
    pub seed: u64,
}

impl UserGenConfig {
    pub fn defaults(m_seen: usize, n_slots: usize, seed: u64) -> Self {
        UserGenConfig {
            m_seen,
            unseen_fraction: 0.25,
            n_slots,
            users: 10,
            p_user_features: 100,
            dirichlet_omega: 1.0,
            alpha0: 2.5,
            content_alphas: vec![0.25, 0.0, 0.1, 0.5],
            eta: 1e-4,
            beta: 1.0,
            feature_spec: default_feature_spec(),
            size_range: (0.0, 100.0),
            seed,
        }
    }

    pub fn n_unseen(&self) -> usize {
        (self.unseen_fraction * self.m_seen as f64).round() as usize
    }

    fn validate(&self) -> Result<()> {
        if self.m_seen < 2 || self.n_slots == 0 {
            return Err(Error::invalid("need at least 2 seen contents and 1 slot"));
        }
        if self.users == 0 {
            return Err(Error::invalid("need at least one user"));
        }
        if !(self.dirichlet_omega > 0.0) {
            return Err(Error::invalid("dirichlet omega must be > 0"));
        }
        if !(self.alpha0 > 0.0) || !(self.eta > 0.0) || self.beta < 0.0 {
            return Err(Error::invalid("alpha0, eta must be > 0 and beta >= 0"));
        }
        if self.feature_spec.len() != self.content_alphas.len() {
            return Err(Error::invalid("feature_spec and content_alphas lengths differ"));
        }
        if !(self.size_range.1 > self.size_range.0) || self.size_range.0 < 0.0 {
            return Err(Error::invalid("size_range must be a nonnegative interval"));
        }
        Ok(())
    }
}

/// Ground-truth latent state for scoring predictions.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Cell-level: the drawn λ. User-level: log of the aggregated popularity.
    pub lambdas: DVector<f64>,
    pub popularities: DVector<f64>,
}

/// A generated (or loaded) workload: features over seen+unseen contents,
/// requests over the seen ones, optional ground truth, and the catalog.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub features: FeatureMatrix,
    pub seen_mask: Vec<bool>,
    pub requests: RequestMatrix,
    pub truth: Option<GroundTruth>,
    pub catalog: ContentCatalog,
}

impl SyntheticDataset {
    pub fn n_total(&self) -> usize {
        self.features.n_contents()
    }

    pub fn n_seen(&self) -> usize {
        self.seen_mask.iter().filter(|&&s| s).count()
    }

    pub fn seen_features(&self) -> Result<FeatureMatrix> {
        let idx: Vec<usize> = (0..self.n_total()).filter(|&i| self.seen_mask[i]).collect();
        self.features.select_rows(&idx)
    }

    pub fn unseen_features(&self) -> Result<Option<FeatureMatrix>> {
        let idx: Vec<usize> = (0..self.n_total()).filter(|&i| !self.seen_mask[i]).collect();
        if idx.is_empty() {
            return Ok(None);
        }
        Ok(Some(self.features.select_rows(&idx)?))
    }
}

/// SplitMix64 seed derivation: every RNG consumer gets its own stream from
/// one master seed.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn draw_features<R: Rng>(
    rng: &mut R,
    spec: &[FeatureDist],
    m_total: usize,
) -> Result<FeatureMatrix> {
    let q = spec.len();
    let mut rows = Vec::with_capacity(m_total);
    for _ in 0..m_total {
        let mut row = Vec::with_capacity(q);
        for dist in spec {
            let v = match dist {
                FeatureDist::Bernoulli(p) => {
                    if !(0.0..=1.0).contains(p) {
                        return Err(Error::invalid("Bernoulli parameter must lie in [0,1]"));
                    }
                    f64::from(rng.random::<f64>() < *p)
                }
                FeatureDist::StandardNormal => rng.sample(StandardNormal),
            };
            row.push(v);
        }
        rows.push(row);
    }
    FeatureMatrix::from_rows(&rows)
}

fn poisson_count<R: Rng>(rng: &mut R, rate: f64) -> Result<u64> {
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(Error::Numerical(format!("Poisson rate {rate} out of range")));
    }
    let dist = Poisson::new(rate)
        .map_err(|e| Error::Numerical(format!("Poisson rate {rate}: {e}")))?;
    let x: f64 = dist.sample(rng);
    Ok(x as u64)
}

/// Cell-level draw: features per spec, f ~ N(0, K) jointly over seen and
/// unseen contents, λ_m ~ N(f_m, η), then Poisson(e^{λ_m}) counts for seen
/// contents. Deterministic given the seed; sizes default to 1.0.
pub fn gen_cell_level(cfg: &CellGenConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let m_total = cfg.m_seen + cfg.n_unseen();

    let features = draw_features(&mut rng, &cfg.feature_spec, m_total)?;

    // f is drawn jointly over seen+unseen so unseen ground truth exists
    let kernel = build_kernel_matrix(&features, &cfg.true_hp)?;
    let cf = factor_psd(kernel)?;
    let z = DVector::from_fn(m_total, |_, _| rng.sample::<f64, _>(StandardNormal));
    let f = cf.chol_l() * z;

    let sqrt_eta = cfg.true_hp.eta().sqrt();
    let lambdas = DVector::from_fn(m_total, |m, _| {
        f[m] + sqrt_eta * rng.sample::<f64, _>(StandardNormal)
    });
    let popularities = lambdas.map(f64::exp);

    let mut counts = DMatrix::zeros(cfg.m_seen, cfg.n_slots);
    for m in 0..cfg.m_seen {
        for n in 0..cfg.n_slots {
            counts[(m, n)] = poisson_count(&mut rng, popularities[m])?;
        }
    }

    let seen_mask: Vec<bool> = (0..m_total).map(|i| i < cfg.m_seen).collect();
    Ok(SyntheticDataset {
        features,
        seen_mask: seen_mask.clone(),
        requests: RequestMatrix::new(counts)?,
        truth: Some(GroundTruth {
            lambdas,
            popularities,
        }),
        catalog: ContentCatalog::unit_sizes(seen_mask)?,
    })
}

/// One draw from the symmetric Dirichlet(ω·1_dim) via normalized Gamma(ω, 1)
/// variates.
pub fn dirichlet_draw(dim: usize, omega: f64, seed: u64) -> Result<Vec<f64>> {
    if dim == 0 {
        return Err(Error::invalid("dirichlet dimension must be >= 1"));
    }
    if !(omega > 0.0) {
        return Err(Error::invalid("dirichlet omega must be > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    dirichlet_draw_with(&mut rng, dim, omega)
}

fn dirichlet_draw_with<R: Rng>(rng: &mut R, dim: usize, omega: f64) -> Result<Vec<f64>> {
    let gamma = Gamma::new(omega, 1.0)
        .map_err(|e| Error::invalid(format!("gamma shape {omega}: {e}")))?;
    let mut draws: Vec<f64> = (0..dim).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        for d in &mut draws {
            *d /= sum;
        }
    } else {
        // all mass underflowed (tiny ω): collapse onto one random coordinate
        draws.iter_mut().for_each(|d| *d = 0.0);
        draws[rng.random_range(0..dim)] = 1.0;
    }
    Ok(draws)
}

/// User-level draw per the joint content×user kernel, with the kernel
/// parameters shared across users. Also returns the per-(content, user) λ
/// matrix for diagnostics.
///
/// With shared parameters the joint kernel factorizes as
/// α₀·(A ⊗ B) with A over users and B over contents, so the GP draw is
/// F = √α₀·L_B·Z·L_Aᵀ instead of one (MU)×(MU) factorization.
pub fn gen_user_level_full(cfg: &UserGenConfig) -> Result<(SyntheticDataset, DMatrix<f64>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let m_total = cfg.m_seen + cfg.n_unseen();
    let u = cfg.users;

    let features = draw_features(&mut rng, &cfg.feature_spec, m_total)?;
    let sizes: Vec<f64> = (0..m_total)
        .map(|_| rng.random_range(cfg.size_range.0..cfg.size_range.1))
        .collect();

    let profiles: Vec<Vec<f64>> = (0..u)
        .map(|_| dirichlet_draw_with(&mut rng, cfg.p_user_features, cfg.dirichlet_omega))
        .collect::<Result<_>>()?;

    // user block A[u,u'] = e^{−β‖p_u − p_u'‖²}
    let user_cov = DMatrix::from_fn(u, u, |i, j| {
        let d2: f64 = profiles[i]
            .iter()
            .zip(&profiles[j])
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        (-cfg.beta * d2).exp()
    });
    // content block B[m,m'] = e^{−Σ_q α_q‖x_q,m − x_q,m'‖²}
    let mut content_alphas = vec![1.0];
    content_alphas.extend_from_slice(&cfg.content_alphas);
    let content_hp = HyperParams::new(cfg.eta, content_alphas)?;
    let content_cov = build_kernel_matrix(&features, &content_hp)?;

    let l_users = factor_psd(user_cov)?.chol_l();
    let l_contents = factor_psd(content_cov)?.chol_l();

    let z = DMatrix::from_fn(m_total, u, |_, _| rng.sample::<f64, _>(StandardNormal));
    let f = (l_contents * z * l_users.transpose()) * cfg.alpha0.sqrt();

    let sqrt_eta = cfg.eta.sqrt();
    let lambdas_mu = DMatrix::from_fn(m_total, u, |m, uu| {
        f[(m, uu)] + sqrt_eta * rng.sample::<f64, _>(StandardNormal)
    });

    // aggregate to cell level: per slot, the observed count is the sum of
    // the independent per-user Poisson draws
    let mut counts = DMatrix::zeros(cfg.m_seen, cfg.n_slots);
    for m in 0..cfg.m_seen {
        for n in 0..cfg.n_slots {
            let mut total = 0u64;
            for uu in 0..u {
                total += poisson_count(&mut rng, lambdas_mu[(m, uu)].exp())?;
            }
            counts[(m, n)] = total;
        }
    }

    let popularities = DVector::from_fn(m_total, |m, _| {
        (0..u).map(|uu| lambdas_mu[(m, uu)].exp()).sum::<f64>()
    });
    let lambdas = popularities.map(f64::ln);

    let seen_mask: Vec<bool> = (0..m_total).map(|i| i < cfg.m_seen).collect();
    let dataset = SyntheticDataset {
        features,
        seen_mask: seen_mask.clone(),
        requests: RequestMatrix::new(counts)?,
        truth: Some(GroundTruth {
            lambdas,
            popularities,
        }),
        catalog: ContentCatalog::new(sizes, seen_mask)?,
    };
    Ok((dataset, lambdas_mu))
}

/// User-level draw; see [`gen_user_level_full`].
pub fn gen_user_level(cfg: &UserGenConfig) -> Result<SyntheticDataset> {
    Ok(gen_user_level_full(cfg)?.0)
}

/// Held-out request slots drawn from known popularities (the cell-level
/// aggregate of independent per-user Poisson draws is itself Poisson).
pub fn gen_future_requests(
    popularities: &[f64],
    n_slots: usize,
    seed: u64,
) -> Result<RequestMatrix> {
    if popularities.is_empty() || n_slots == 0 {
        return Err(Error::invalid("need at least one content and one slot"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = DMatrix::zeros(popularities.len(), n_slots);
    for m in 0..popularities.len() {
        for n in 0..n_slots {
            counts[(m, n)] = poisson_count(&mut rng, popularities[m])?;
        }
    }
    RequestMatrix::new(counts)
}

// ---------------------------------------------------------------------------
// Dataset dump format
// ---------------------------------------------------------------------------

/// Write `features.csv`, `requests.csv`, `catalog.csv` and (when ground truth
/// exists) `truth.csv` into `dir`.
pub fn save_dataset(ds: &SyntheticDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let q = ds.features.n_features();

    let mut w = csv::Writer::from_path(dir.join("features.csv"))?;
    let mut header = vec!["content_id".to_string(), "seen".to_string()];
    header.extend((1..=q).map(|i| format!("x_{i}")));
    w.write_record(&header)?;
    for m in 0..ds.n_total() {
        let mut rec = vec![m.to_string(), u8::from(ds.seen_mask[m]).to_string()];
        rec.extend(ds.features.row(m).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("requests.csv"))?;
    w.write_record(["content_id", "slot", "count"])?;
    let seen_ids: Vec<usize> = (0..ds.n_total()).filter(|&i| ds.seen_mask[i]).collect();
    for (row, &id) in seen_ids.iter().enumerate() {
        for n in 0..ds.requests.n_slots() {
            w.write_record(&[
                id.to_string(),
                n.to_string(),
                ds.requests.count(row, n).to_string(),
            ])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("catalog.csv"))?;
    w.write_record(["content_id", "size"])?;
    for m in 0..ds.n_total() {
        w.write_record(&[m.to_string(), ds.catalog.sizes[m].to_string()])?;
    }
    w.flush()?;

    if let Some(truth) = &ds.truth {
        let mut w = csv::Writer::from_path(dir.join("truth.csv"))?;
        w.write_record(["content_id", "lambda", "popularity"])?;
        for m in 0..ds.n_total() {
            w.write_record(&[
                m.to_string(),
                truth.lambdas[m].to_string(),
                truth.popularities[m].to_string(),
            ])?;
        }
        w.flush()?;
    }
    Ok(())
}

fn parse_field<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Parse(format!("bad {what}: {s:?}")))
}

/// Load a dataset directory written by [`save_dataset`] (or the ingestion
/// pipeline, in which case `truth.csv` is absent).
pub fn load_dataset(dir: &Path) -> Result<SyntheticDataset> {
    let mut rdr = csv::Reader::from_path(dir.join("features.csv"))?;
    let q = rdr.headers()?.len().saturating_sub(2);
    if q == 0 {
        return Err(Error::Parse("features.csv has no feature columns".into()));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut seen_mask = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let id: usize = parse_field(&rec[0], "content_id")?;
        if id != rows.len() {
            return Err(Error::Parse(format!(
                "features.csv ids must be dense and ascending, got {id}"
            )));
        }
        seen_mask.push(parse_field::<u8>(&rec[1], "seen")? != 0);
        rows.push(
            (0..q)
                .map(|i| parse_field(&rec[2 + i], "feature"))
                .collect::<Result<_>>()?,
        );
    }
    let features = FeatureMatrix::from_rows(&rows)?;
    let m_total = rows.len();

    let seen_ids: Vec<usize> = (0..m_total).filter(|&i| seen_mask[i]).collect();
    let row_of_id: std::collections::HashMap<usize, usize> = seen_ids
        .iter()
        .enumerate()
        .map(|(row, &id)| (id, row))
        .collect();
    let mut rdr = csv::Reader::from_path(dir.join("requests.csv"))?;
    let mut cells: Vec<(usize, usize, u64)> = Vec::new();
    let mut max_slot = 0usize;
    for rec in rdr.records() {
        let rec = rec?;
        let id: usize = parse_field(&rec[0], "content_id")?;
        let slot: usize = parse_field(&rec[1], "slot")?;
        let count: u64 = parse_field(&rec[2], "count")?;
        let &row = row_of_id
            .get(&id)
            .ok_or_else(|| Error::Parse(format!("requests.csv references unseen id {id}")))?;
        max_slot = max_slot.max(slot);
        cells.push((row, slot, count));
    }
    if cells.is_empty() {
        return Err(Error::Parse("requests.csv is empty".into()));
    }
    let mut counts = DMatrix::zeros(seen_ids.len(), max_slot + 1);
    for (row, slot, count) in cells {
        counts[(row, slot)] = count;
    }
    let requests = RequestMatrix::new(counts)?;

    let mut rdr = csv::Reader::from_path(dir.join("catalog.csv"))?;
    let mut sizes = vec![0.0; m_total];
    for rec in rdr.records() {
        let rec = rec?;
        let id: usize = parse_field(&rec[0], "content_id")?;
        if id >= m_total {
            return Err(Error::Parse(format!("catalog.csv id {id} out of range")));
        }
        sizes[id] = parse_field(&rec[1], "size")?;
    }
    let catalog = ContentCatalog::new(sizes, seen_mask.clone())?;

    let truth_path = dir.join("truth.csv");
    let truth = if truth_path.exists() {
        let mut rdr = csv::Reader::from_path(truth_path)?;
        let mut lambdas = DVector::zeros(m_total);
        let mut pops = DVector::zeros(m_total);
        for rec in rdr.records() {
            let rec = rec?;
            let id: usize = parse_field(&rec[0], "content_id")?;
            if id >= m_total {
                return Err(Error::Parse(format!("truth.csv id {id} out of range")));
            }
            lambdas[id] = parse_field(&rec[1], "lambda")?;
            pops[id] = parse_field(&rec[2], "popularity")?;
        }
        Some(GroundTruth {
            lambdas,
            popularities: pops,
        })
    } else {
        None
    };

    Ok(SyntheticDataset {
        features,
        seen_mask,
        requests,
        truth,
        catalog,
    })
}
