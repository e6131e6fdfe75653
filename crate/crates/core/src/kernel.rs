//! Squared-exponential kernel, the regularized covariance K̃ = K + ηI and its
//! Cholesky factorization, and kernel derivatives in log-parameter space.
//!
//! Everything downstream (posterior evaluation, HMC, VB, GP conditioning)
//! funnels its K̃⁻¹ products through [`CovFactor`] so the factorization is
//! computed once per hyperparameter setting.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// M×Q matrix of content feature vectors, one row per content.
///
/// Binary features are stored as 0.0/1.0 and enter the kernel exactly like
/// continuous ones.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: DMatrix<f64>,
}

impl FeatureMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::invalid("feature matrix must be at least 1x1"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature matrix contains non-finite entries"));
        }
        Ok(FeatureMatrix { data })
    }

    /// Build from row-major per-content feature vectors.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("feature matrix must have at least one row"));
        }
        let q = rows[0].len();
        if rows.iter().any(|r| r.len() != q) {
            return Err(Error::invalid("feature rows have inconsistent lengths"));
        }
        Self::new(DMatrix::from_fn(rows.len(), q, |i, j| rows[i][j]))
    }

    pub fn n_contents(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.data.ncols()
    }

    pub fn row(&self, m: usize) -> Vec<f64> {
        self.data.row(m).iter().copied().collect()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    /// New matrix keeping only the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        if rows.iter().any(|&r| r >= self.n_contents()) {
            return Err(Error::invalid("row index out of range"));
        }
        let q = self.n_features();
        Self::new(DMatrix::from_fn(rows.len(), q, |i, j| self.data[(rows[i], j)]))
    }
}

/// θ = (η, α₀, …, α_Q): GP noise variance plus kernel scales.
///
/// η and α₀ are strictly positive so that K̃ is positive definite; the
/// horizontal scales α_q may be zero (feature q then has no influence).
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    eta: f64,
    alphas: Vec<f64>,
}

impl HyperParams {
    pub fn new(eta: f64, alphas: Vec<f64>) -> Result<Self> {
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(Error::invalid(format!("eta must be > 0, got {eta}")));
        }
        if alphas.is_empty() {
            return Err(Error::invalid("alphas must contain at least alpha_0"));
        }
        if !(alphas[0] > 0.0) || !alphas[0].is_finite() {
            return Err(Error::invalid(format!(
                "alpha_0 must be > 0, got {}",
                alphas[0]
            )));
        }
        if alphas[1..].iter().any(|&a| a < 0.0 || !a.is_finite()) {
            return Err(Error::invalid("horizontal scales must be >= 0 and finite"));
        }
        Ok(HyperParams { eta, alphas })
    }

    /// Reconstruct θ = e^φ from log parameters ordered [log η, log α₀, …, log α_Q].
    pub fn from_log(phi: &[f64]) -> Result<Self> {
        if phi.len() < 2 {
            return Err(Error::invalid("log-parameter vector needs eta and alpha_0"));
        }
        let theta: Vec<f64> = phi.iter().map(|p| p.exp()).collect();
        Self::new(theta[0], theta[1..].to_vec())
    }

    /// φ = log θ, ordered [log η, log α₀, …, log α_Q].
    pub fn to_log(&self) -> Vec<f64> {
        let mut phi = Vec::with_capacity(self.dim());
        phi.push(self.eta.ln());
        phi.extend(self.alphas.iter().map(|a| a.ln()));
        phi
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn alpha0(&self) -> f64 {
        self.alphas[0]
    }

    /// All vertical+horizontal scales [α₀, α₁, …, α_Q].
    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// Number of feature dimensions Q the kernel expects.
    pub fn n_feature_scales(&self) -> usize {
        self.alphas.len() - 1
    }

    /// Total parameter count Q + 2 (η plus α₀..α_Q).
    pub fn dim(&self) -> usize {
        self.alphas.len() + 1
    }
}

/// Squared exponential kernel entry α₀ · exp(−Σ_q α_q (x_{q,i} − x_{q,j})²).
pub fn sek_entry(xi: &[f64], xj: &[f64], hp: &HyperParams) -> Result<f64> {
    let q = hp.n_feature_scales();
    if xi.len() != q || xj.len() != q {
        return Err(Error::invalid(format!(
            "feature vectors must have {q} entries, got {} and {}",
            xi.len(),
            xj.len()
        )));
    }
    let mut expo = 0.0;
    for k in 0..q {
        let d = xi[k] - xj[k];
        expo += hp.alphas[k + 1] * (d * d);
    }
    Ok(hp.alpha0() * (-expo).exp())
}

/// Precomputed per-dimension squared differences D_q[i][j] = (x_{q,i} − x_{q,j})².
///
/// These depend only on the features, so callers that rebuild the kernel for
/// many hyperparameter settings (HMC, VB) compute them once.
#[derive(Debug, Clone)]
pub struct PairwiseSqDiffs {
    mats: Vec<DMatrix<f64>>,
    n: usize,
}

impl PairwiseSqDiffs {
    pub fn new(features: &FeatureMatrix) -> Self {
        let m = features.n_contents();
        let q = features.n_features();
        let x = features.matrix();
        let mats = (0..q)
            .map(|k| {
                DMatrix::from_fn(m, m, |i, j| {
                    let d = x[(i, k)] - x[(j, k)];
                    d * d
                })
            })
            .collect();
        PairwiseSqDiffs { mats, n: m }
    }

    pub fn n_contents(&self) -> usize {
        self.n
    }

    pub fn n_features(&self) -> usize {
        self.mats.len()
    }

    pub fn dim_matrix(&self, q: usize) -> &DMatrix<f64> {
        &self.mats[q]
    }

    /// The unregularized kernel matrix K for the given scales.
    pub fn kernel_matrix(&self, hp: &HyperParams) -> Result<DMatrix<f64>> {
        if hp.n_feature_scales() != self.n_features() {
            return Err(Error::invalid(format!(
                "hyperparameters expect {} feature dims, features have {}",
                hp.n_feature_scales(),
                self.n_features()
            )));
        }
        let m = self.n;
        let mut expo = DMatrix::zeros(m, m);
        for (k, d) in self.mats.iter().enumerate() {
            let a = hp.alphas[k + 1];
            if a != 0.0 {
                expo.zip_apply(d, |e, dv| *e += a * dv);
            }
        }
        let a0 = hp.alpha0();
        Ok(expo.map(|e: f64| a0 * (-e).exp()))
    }
}

/// The unregularized kernel matrix K over all content pairs.
pub fn build_kernel_matrix(features: &FeatureMatrix, hp: &HyperParams) -> Result<DMatrix<f64>> {
    PairwiseSqDiffs::new(features).kernel_matrix(hp)
}

/// K̃ = K + ηI together with its Cholesky factor and log-determinant.
///
/// Immutable after construction; shareable across threads.
#[derive(Debug, Clone)]
pub struct CovFactor {
    ktilde: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    logdet: f64,
    jitter_used: f64,
}

// Escalating diagonal jitter, relative to the mean diagonal of the matrix
// being factored: start at 1e-10·trace/M, multiply by 10, give up beyond
// 1e-4·trace/M. η > 0 usually makes this moot; the ladder guards
// near-duplicate feature rows.
const JITTER_LADDER_START: f64 = 1e-10;
const JITTER_LADDER_MAX: f64 = 1e-4;

/// Cholesky with the escalating jitter ladder. `mat` must be symmetric.
fn cholesky_with_ladder(mat: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(chol) = Cholesky::new(mat.clone()) {
        return Ok((chol, 0.0));
    }
    let scale = mat.trace() / mat.nrows() as f64;
    let scale = if scale.is_finite() && scale > 0.0 { scale } else { 1.0 };
    let mut jitter = JITTER_LADDER_START * scale;
    let max_jitter = JITTER_LADDER_MAX * scale;
    while jitter <= max_jitter {
        let mut attempt = mat.clone();
        for i in 0..attempt.nrows() {
            attempt[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(attempt) {
            return Ok((chol, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::CholeskyFailed {
        final_jitter: jitter / 10.0,
    })
}

impl CovFactor {
    fn from_ktilde(ktilde: DMatrix<f64>) -> Result<Self> {
        if ktilde.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(
                "covariance matrix has non-finite entries".into(),
            ));
        }
        let (chol, extra) = cholesky_with_ladder(&ktilde)?;
        let mut ktilde = ktilde;
        if extra > 0.0 {
            for i in 0..ktilde.nrows() {
                ktilde[(i, i)] += extra;
            }
        }
        let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(CovFactor {
            ktilde,
            chol,
            logdet,
            jitter_used: extra,
        })
    }

    pub fn dim(&self) -> usize {
        self.ktilde.nrows()
    }

    pub fn ktilde(&self) -> &DMatrix<f64> {
        &self.ktilde
    }

    /// Lower-triangular Cholesky factor L with K̃ = LLᵀ.
    pub fn chol_l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    /// Ladder jitter that had to be added beyond the caller-supplied one.
    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    /// K̃⁻¹ b via two triangular solves.
    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// K̃⁻¹ B, column by column, via the shared factor.
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// Dense K̃⁻¹. Only the gradient trace terms need the full inverse.
    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// diag(K̃⁻¹) computed column-by-column from the factor:
    /// [K̃⁻¹]_mm = ‖L⁻¹ e_m‖².
    pub fn diag_of_inverse(&self) -> DVector<f64> {
        let m = self.dim();
        let l = self.chol.l();
        let linv = l
            .solve_lower_triangular(&DMatrix::identity(m, m))
            .expect("triangular solve with positive diagonal");
        DVector::from_fn(m, |j, _| linv.column(j).norm_squared())
    }
}

/// K̃⁻¹b for a vector right-hand side (thin wrapper kept for symmetry with
/// [`CovFactor::solve_mat`]).
pub fn solve_with(cf: &CovFactor, b: &DVector<f64>) -> DVector<f64> {
    cf.solve_vec(b)
}

/// Build K̃ = K + (η + jitter)I and factor it.
///
/// `jitter` is a caller-supplied base added to the diagonal; if the
/// factorization still fails, an internal escalating ladder takes over before
/// giving up.
pub fn build_cov(features: &FeatureMatrix, hp: &HyperParams, jitter: f64) -> Result<CovFactor> {
    build_cov_cached(&PairwiseSqDiffs::new(features), hp, jitter)
}

/// [`build_cov`] against precomputed pairwise squared differences.
pub fn build_cov_cached(
    sqdiffs: &PairwiseSqDiffs,
    hp: &HyperParams,
    jitter: f64,
) -> Result<CovFactor> {
    if jitter < 0.0 {
        return Err(Error::invalid("jitter must be >= 0"));
    }
    let mut ktilde = sqdiffs.kernel_matrix(hp)?;
    let diag_add = hp.eta() + jitter;
    for i in 0..ktilde.nrows() {
        ktilde[(i, i)] += diag_add;
    }
    CovFactor::from_ktilde(ktilde)
}

/// Factor an externally built symmetric PSD matrix (jitter ladder applies).
/// Used by the synthetic generator to draw from N(0, K) with η absent.
pub fn factor_psd(mat: DMatrix<f64>) -> Result<CovFactor> {
    if mat.nrows() != mat.ncols() {
        return Err(Error::invalid("matrix must be square"));
    }
    CovFactor::from_ktilde(mat)
}

/// Derivative ∂K̃/∂φ of the regularized covariance with respect to one
/// log-transformed parameter φ = log θ (chain-rule factor θ included).
///
/// `which` indexes θ = [η, α₀, α₁, …, α_Q]: 0 is η, 1 is α₀, 1+q is α_q.
///
/// - φ = log η:   η·I
/// - φ = log α₀:  K (the unregularized kernel)
/// - φ = log α_q: −α_q · D_q ∘ K
pub fn cov_grad(features: &FeatureMatrix, hp: &HyperParams, which: usize) -> Result<DMatrix<f64>> {
    let sqdiffs = PairwiseSqDiffs::new(features);
    cov_grad_cached(&sqdiffs, hp, which)
}

/// [`cov_grad`] against precomputed pairwise squared differences.
pub fn cov_grad_cached(
    sqdiffs: &PairwiseSqDiffs,
    hp: &HyperParams,
    which: usize,
) -> Result<DMatrix<f64>> {
    let m = sqdiffs.n_contents();
    if which >= hp.dim() {
        return Err(Error::invalid(format!(
            "parameter index {which} out of range (dim {})",
            hp.dim()
        )));
    }
    if which == 0 {
        return Ok(DMatrix::from_diagonal_element(m, m, hp.eta()));
    }
    let kernel = sqdiffs.kernel_matrix(hp)?;
    if which == 1 {
        return Ok(kernel);
    }
    let q = which - 2;
    let alpha = hp.alphas[q + 1];
    let d = sqdiffs.dim_matrix(q);
    Ok(DMatrix::from_fn(m, m, |i, j| {
        -alpha * d[(i, j)] * kernel[(i, j)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn hp(eta: f64, alphas: &[f64]) -> HyperParams {
        HyperParams::new(eta, alphas.to_vec()).unwrap()
    }

    #[test]
    fn sek_zero_distance_returns_alpha0() {
        let h = hp(0.5, &[0.1, 1.0, 2.0]);
        let x = vec![0.3, -1.2];
        assert_eq!(sek_entry(&x, &x, &h).unwrap(), 0.1);
    }

    #[test]
    fn sek_zero_scale_erases_feature() {
        let h = hp(0.5, &[1.0, 0.0]);
        assert_eq!(sek_entry(&[0.0], &[1.0], &h).unwrap(), 1.0);
    }

    #[test]
    fn sek_scalar_value() {
        // 2·e^{-0.5}; cross-checked against an independently coded exponential
        let h = hp(0.5, &[2.0, 0.5]);
        let got = sek_entry(&[0.0], &[1.0], &h).unwrap();
        let independent = 2.0 * (-0.5_f64).exp();
        assert_relative_eq!(got, independent, max_relative = 1e-15);
        assert_relative_eq!(got, 1.2130613194252668, max_relative = 1e-12);
    }

    #[test]
    fn sek_dimension_mismatch_errors() {
        let h = hp(0.5, &[1.0, 1.0]);
        assert!(sek_entry(&[0.0, 1.0], &[1.0], &h).is_err());
    }

    #[test]
    fn sek_symmetric_exactly() {
        let h = hp(0.1, &[0.7, 0.3, 1.5, 0.0]);
        let xi = [0.2, -0.4, 1.1];
        let xj = [1.0, 0.5, -2.0];
        let a = sek_entry(&xi, &xj, &h).unwrap();
        let b = sek_entry(&xj, &xi, &h).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn build_cov_one_by_one() {
        let f = FeatureMatrix::from_rows(&[vec![0.0]]).unwrap();
        let h = hp(0.2, &[0.3, 1.0]);
        let cf = build_cov(&f, &h, 0.1).unwrap();
        assert_relative_eq!(cf.ktilde()[(0, 0)], 0.6, max_relative = 1e-15);
        assert_relative_eq!(cf.logdet(), 0.6_f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn build_cov_identical_rows_2x2() {
        // K̃ = [[1.1, 1.0], [1.0, 1.1]], det = 1.1² − 1.0² = 0.21 by hand
        let f = FeatureMatrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let h = hp(0.1, &[1.0, 1.0, 1.0]);
        let cf = build_cov(&f, &h, 0.0).unwrap();
        assert_relative_eq!(cf.ktilde()[(0, 1)], 1.0, max_relative = 1e-15);
        assert_relative_eq!(cf.ktilde()[(0, 0)], 1.1, max_relative = 1e-15);
        assert_relative_eq!(cf.logdet(), 0.21_f64.ln(), max_relative = 1e-10);
    }

    #[test]
    fn chol_reconstructs_ktilde() {
        let f = FeatureMatrix::from_rows(&[
            vec![0.1, 2.0],
            vec![-0.5, 0.3],
            vec![1.4, -1.0],
        ])
        .unwrap();
        let h = hp(0.05, &[0.8, 0.4, 1.3]);
        let cf = build_cov(&f, &h, 0.0).unwrap();
        let l = cf.chol_l();
        let recon = &l * l.transpose();
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(recon[(i, j)], cf.ktilde()[(i, j)], max_relative = 1e-8);
            }
        }
    }

    #[test]
    fn solve_roundtrip_and_hand_case() {
        let f = FeatureMatrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let h = hp(0.1, &[1.0, 1.0, 1.0]);
        let cf = build_cov(&f, &h, 0.0).unwrap();

        // Cramer's rule on [[1.1, 1.0], [1.0, 1.1]] x = [1, 0]:
        // x = (1.1, -1.0)/0.21
        let sol = cf.solve_vec(&DVector::from_vec(vec![1.0, 0.0]));
        assert_relative_eq!(sol[0], 1.1 / 0.21, max_relative = 1e-10);
        assert_relative_eq!(sol[1], -1.0 / 0.21, max_relative = 1e-10);

        let v = DVector::from_vec(vec![0.3, -0.7]);
        let b = cf.ktilde() * &v;
        let back = cf.solve_vec(&b);
        assert_relative_eq!(back[0], v[0], max_relative = 1e-8);
        assert_relative_eq!(back[1], v[1], max_relative = 1e-8);
    }

    #[test]
    fn solve_scalar_case() {
        let cf = factor_psd(DMatrix::from_element(1, 1, 2.0)).unwrap();
        let sol = cf.solve_vec(&DVector::from_vec(vec![4.0]));
        assert_relative_eq!(sol[0], 2.0, max_relative = 1e-15);
    }

    #[test]
    fn diag_of_inverse_matches_full_inverse() {
        let f = FeatureMatrix::from_rows(&[
            vec![0.1, 2.0],
            vec![-0.5, 0.3],
            vec![1.4, -1.0],
            vec![0.0, 0.0],
        ])
        .unwrap();
        let h = hp(0.05, &[0.8, 0.4, 1.3]);
        let cf = build_cov(&f, &h, 0.0).unwrap();
        let full = cf.inverse();
        let diag = cf.diag_of_inverse();
        for i in 0..4 {
            assert_relative_eq!(diag[i], full[(i, i)], max_relative = 1e-10);
        }
    }

    #[test]
    fn cov_grad_eta_is_eta_times_identity() {
        let f = FeatureMatrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let h = hp(0.5, &[1.0, 1.0]);
        let g = cov_grad(&f, &h, 0).unwrap();
        assert_eq!(g[(0, 0)], 0.5);
        assert_eq!(g[(1, 1)], 0.5);
        assert_eq!(g[(0, 1)], 0.0);
    }

    #[test]
    fn cov_grad_alpha0_is_kernel() {
        let f = FeatureMatrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let h = hp(0.5, &[2.0, 0.5]);
        let g = cov_grad(&f, &h, 1).unwrap();
        let k = build_kernel_matrix(&f, &h).unwrap();
        assert_eq!(g, k);
    }

    #[test]
    fn cov_grad_invalid_index() {
        let f = FeatureMatrix::from_rows(&[vec![0.0]]).unwrap();
        let h = hp(0.5, &[2.0, 0.5]);
        assert!(cov_grad(&f, &h, 3).is_err());
    }

    #[test]
    fn cov_grad_matches_finite_differences() {
        // central differences of build_cov entries in log-parameter space
        let f = FeatureMatrix::from_rows(&[vec![0.3, -0.2], vec![1.1, 0.7]]).unwrap();
        let h = hp(0.3, &[0.9, 0.6, 1.4]);
        let phi = h.to_log();
        let step = 1e-6;
        for which in 0..h.dim() {
            let grad = cov_grad(&f, &h, which).unwrap();
            let mut up = phi.clone();
            let mut dn = phi.clone();
            up[which] += step;
            dn[which] -= step;
            let k_up = build_cov(&f, &HyperParams::from_log(&up).unwrap(), 0.0).unwrap();
            let k_dn = build_cov(&f, &HyperParams::from_log(&dn).unwrap(), 0.0).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    let fd = (k_up.ktilde()[(i, j)] - k_dn.ktilde()[(i, j)]) / (2.0 * step);
                    let scale = fd.abs().max(1e-8);
                    assert!(
                        (grad[(i, j)] - fd).abs() / scale < 1e-5,
                        "param {which} entry ({i},{j}): analytic {} vs fd {fd}",
                        grad[(i, j)]
                    );
                }
            }
        }
    }

    #[test]
    fn monotone_relevance_on_2x2() {
        // increasing α_q strictly decreases off-diagonal entries that differ in q
        let f = FeatureMatrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let lo = build_kernel_matrix(&f, &hp(0.1, &[1.0, 0.5])).unwrap();
        let hi = build_kernel_matrix(&f, &hp(0.1, &[1.0, 2.0])).unwrap();
        assert!(hi[(0, 1)] < lo[(0, 1)]);
    }

    #[test]
    fn hyperparams_log_roundtrip() {
        let h = hp(0.25, &[1.5, 0.3, 2.0]);
        let back = HyperParams::from_log(&h.to_log()).unwrap();
        assert_relative_eq!(back.eta(), h.eta(), max_relative = 1e-15);
        for (a, b) in back.alphas().iter().zip(h.alphas()) {
            assert_relative_eq!(a, b, max_relative = 1e-15);
        }
    }

    #[test]
    fn zero_alpha_q_is_allowed_direct_but_positive_required_for_alpha0() {
        assert!(HyperParams::new(0.1, vec![1.0, 0.0]).is_ok());
        assert!(HyperParams::new(0.1, vec![0.0, 1.0]).is_err());
        assert!(HyperParams::new(0.0, vec![1.0]).is_err());
    }
}
