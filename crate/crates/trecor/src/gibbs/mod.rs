//! Blocked Gibbs sampler for the covariance-regression model.
//!
//! One sweep updates, in order: residuals and the sufficient statistic `S`,
//! the covariance `Σ` column by column (jointly with the shrinkage weights
//! `τ` and the global rate `λ`), the factor scores `γ`, the coefficient
//! matrices `B_1..B_R` and `B_0`, the column scales `ν` and `ω`, the latent
//! log-odds `φ`, and the Polya-Gamma auxiliaries `g`.  The `φ` update uses
//! the `g` values from the previous sweep; `g` is refreshed last.
//!
//! Within the `Σ` block each column draw needs the submatrix inverse
//! `H = (Σ_{-k,-k})^{-1}` and the sandwich `H S_{-k,-k} H`.  Both are
//! obtained in O(q^2) per column from running copies of `Ω = Σ^{-1}`,
//! `P = ΩS` and `T = ΩSΩ` that are downdated after every column write, so a
//! full sweep costs O(q^3) plus one O(q^3/3) Cholesky per column for the
//! conditional draw.  The running copies are rebuilt from scratch at the
//! start of every sweep, which bounds round-off drift.

pub mod geweke;
mod persist;

pub use persist::{load_posterior_draws, save_posterior_draws};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{latent_layer_loglik, Design, Hyper, LatentState, ModelError, ModelParams};
use crate::phylo::{node_log_odds, NodeCounts, PhyloTree, PhyloError};
use crate::randdist::{
    cholesky_pd, draw_gamma, draw_gig, draw_inverse_gamma, draw_inverse_gaussian,
    draw_matrix_normal_col_prec, draw_polya_gamma, DistError, RngStream,
};

/// Errors raised while configuring or running a chain.
#[derive(Debug, thiserror::Error)]
pub enum GibbsError {
    #[error("invalid fit configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Phylo(#[from] PhyloError),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error("numerical failure at sweep {iteration}: {what}")]
    Numerical { iteration: usize, what: String },
    #[error("draw store i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("draw store encoding: {0}")]
    Encode(#[from] serde_json::Error),
}

/// What the sampler treats the latent log-odds as.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum FitMode {
    /// Joint sampling of `φ` and `g` with all other blocks.
    Full,
    /// `φ` frozen at the pseudo-count log-odds transform of the counts;
    /// `φ` and `g` updates are skipped.
    FixedPhi { pseudocount: f64 },
    /// `φ` frozen at a supplied matrix; the count data are ignored.
    Oracle { phi_true: DMatrix<f64> },
    /// Fixed-`φ` fit with rank forced to zero and an intercept-only design.
    NoCovariates { pseudocount: f64 },
}

impl FitMode {
    pub fn label(&self) -> &'static str {
        match self {
            FitMode::Full => "full",
            FitMode::FixedPhi { .. } => "fixed_phi",
            FitMode::Oracle { .. } => "oracle",
            FitMode::NoCovariates { .. } => "no_covariates",
        }
    }
}

/// Chain length, rank, hyperparameters and mode for one fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    /// Total Gibbs sweeps per chain.
    pub iterations: usize,
    /// Sweeps discarded before any draw is retained.
    pub burn_in: usize,
    /// Keep every `thin`-th post-burn-in sweep.
    pub thin: usize,
    /// Number of covariance factors `R`.
    pub rank: usize,
    pub hyper: Hyper,
    pub seed: u64,
    /// Independent chains run with the same seed on separate RNG streams.
    pub n_chains: usize,
    pub mode: FitMode,
}

impl FitConfig {
    /// Defaults used throughout: 10 000 sweeps, half burn-in, thin 5.
    pub fn new(rank: usize) -> Self {
        FitConfig {
            iterations: 10_000,
            burn_in: 5_000,
            thin: 5,
            rank,
            hyper: Hyper::default(),
            seed: 0,
            n_chains: 1,
            mode: FitMode::Full,
        }
    }

    pub fn validate(&self) -> Result<(), GibbsError> {
        if self.iterations == 0 || self.burn_in >= self.iterations {
            return Err(GibbsError::Config(format!(
                "burn_in ({}) must be < iterations ({})",
                self.burn_in, self.iterations
            )));
        }
        if self.thin == 0 {
            return Err(GibbsError::Config("thin must be >= 1".into()));
        }
        if self.n_chains == 0 {
            return Err(GibbsError::Config("n_chains must be >= 1".into()));
        }
        match &self.mode {
            FitMode::FixedPhi { pseudocount } | FitMode::NoCovariates { pseudocount } => {
                if !(*pseudocount > 0.0) {
                    return Err(GibbsError::Config("pseudocount must be > 0".into()));
                }
            }
            FitMode::Oracle { phi_true } => {
                if phi_true.iter().any(|v| !v.is_finite()) {
                    return Err(GibbsError::Config("oracle phi contains non-finite values".into()));
                }
            }
            FitMode::Full => {}
        }
        self.hyper.validate().map_err(GibbsError::Model)
    }

    /// SHA-256 of the serialized configuration, recorded with every draw set.
    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        let mut hex = String::with_capacity(64);
        for byte in hasher.finalize() {
            let _ = std::fmt::Write::write_fmt(&mut hex, format_args!("{byte:02x}"));
        }
        hex
    }
}

/// Reusable buffers for one sweep; nothing here carries state between sweeps.
///
/// The per-column quantities (`h`, `theta`, the sandwich `H S_{-k,-k} H`,
/// `u_k`, `χ_k`) are overwritten for each column of the `Σ` block; the rest
/// are refilled at the steps that use them.
struct SweepScratch {
    /// Residuals `φ_i - B_0 x_i - Σ_r γ_ir B_r x_i`, one row per sample.
    resid: DMatrix<f64>,
    /// Sufficient statistic `S` for the `Σ` block.
    s_stat: DMatrix<f64>,
    /// Running `Ω = Σ^{-1}`.
    omega: DMatrix<f64>,
    /// Running `P = ΩS`.
    p_run: DMatrix<f64>,
    /// Running `T = ΩSΩ`.
    t_run: DMatrix<f64>,
    /// Per-column `H = (Σ_{-k,-k})^{-1}`.
    h: DMatrix<f64>,
    /// Per-column sandwich `H S_{-k,-k} H`.
    msand: DMatrix<f64>,
    /// Per-column conditional precision `Θ_k`.
    theta: DMatrix<f64>,
    /// Fitted mean rows `B_0 x_i + Σ_r γ_ir B_r x_i`, maintained through
    /// the γ and B updates so later blocks read current values.
    mean_all: DMatrix<f64>,
    /// `X B_rᵀ` for r = 1..R (values from the start of the γ loop).
    xb: Vec<DMatrix<f64>>,
    /// `X B_rᵀ Ω` for r = 1..R.
    xbo: Vec<DMatrix<f64>>,
    /// Per-sample conditional precision `O_i = Σ^{-1} + diag(g_i)`.
    o_i: DMatrix<f64>,
    /// Per-sample conditional mean work vector `μ_i`.
    mu_i: DVector<f64>,
}

impl SweepScratch {
    fn new(n: usize, q: usize, rank: usize) -> Self {
        SweepScratch {
            resid: DMatrix::zeros(n, q),
            s_stat: DMatrix::zeros(q, q),
            omega: DMatrix::zeros(q, q),
            p_run: DMatrix::zeros(q, q),
            t_run: DMatrix::zeros(q, q),
            h: DMatrix::zeros(q.saturating_sub(1), q.saturating_sub(1)),
            msand: DMatrix::zeros(q.saturating_sub(1), q.saturating_sub(1)),
            theta: DMatrix::zeros(q.saturating_sub(1), q.saturating_sub(1)),
            mean_all: DMatrix::zeros(n, q),
            xb: vec![DMatrix::zeros(n, q); rank],
            xbo: vec![DMatrix::zeros(n, q); rank],
            o_i: DMatrix::zeros(q, q),
            mu_i: DVector::zeros(q),
        }
    }
}

/// Thinned post-burn-in draws from one chain, plus summaries used by the
/// selection and network layers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorDraws {
    /// Full parameter states, one per retained sweep.
    pub params: Vec<ModelParams>,
    /// Posterior mean of `φ` over retained sweeps (n x q).
    pub phi_mean: DMatrix<f64>,
    /// Posterior standard deviation of `φ` (n x q).
    pub phi_sd: DMatrix<f64>,
    /// Posterior mean of `γ` (n x R).
    pub gamma_mean: DMatrix<f64>,
    /// Posterior standard deviation of `γ` (n x R).
    pub gamma_sd: DMatrix<f64>,
    /// Per-draw, per-sample log-likelihood of the latent Gaussian layer with
    /// `γ` integrated out (draws x n); input to WAIC.
    pub loglik_latent: DMatrix<f64>,
    /// Per-draw, per-sample binomial log-likelihood at the current `φ`
    /// (draws x n); empty when the mode carries no count data.
    pub loglik_binomial: DMatrix<f64>,
    /// Configuration the chain ran with (after mode-specific reductions).
    pub config: FitConfig,
    /// RNG stream index of this chain.
    pub stream: u64,
    /// SHA-256 of the effective configuration.
    pub config_hash: String,
    /// Crate version that produced the draws.
    pub code_version: String,
    /// Non-fatal notes (clamped values, retried factorizations).
    pub warnings: Vec<String>,
}

impl PosteriorDraws {
    pub fn n_draws(&self) -> usize {
        self.params.len()
    }

    pub fn lambda_draws(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.lambda).collect()
    }

    /// Trace of the covariance effect norm for covariate `j`.
    pub fn cov_effect_draws(&self, j: usize) -> Vec<f64> {
        self.params
            .iter()
            .map(|p| crate::model::covariate_cov_effect(p, j))
            .collect()
    }

    /// Trace of the squared mean effect norm for covariate `j`.
    pub fn mean_effect_draws(&self, j: usize) -> Vec<f64> {
        self.params
            .iter()
            .map(|p| crate::model::covariate_mean_effect(p, j))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Σ block
// ---------------------------------------------------------------------------

/// Copy `m` without row and column `k` into `out` ((q-1) x (q-1)).
fn minor_into(m: &DMatrix<f64>, k: usize, out: &mut DMatrix<f64>) {
    let q = m.nrows();
    for j in 0..q {
        if j == k {
            continue;
        }
        let jj = j - usize::from(j > k);
        for i in 0..q {
            if i == k {
                continue;
            }
            let ii = i - usize::from(i > k);
            out[(ii, jj)] = m[(i, j)];
        }
    }
}

/// Copy column `k` of `m` without entry `k` into `out` (length q-1).
fn col_minor_into(m: &DMatrix<f64>, k: usize, out: &mut DVector<f64>) {
    let q = m.nrows();
    for i in 0..q {
        if i == k {
            continue;
        }
        out[i - usize::from(i > k)] = m[(i, k)];
    }
}

/// Embed a (q-1)-vector as a q-vector with zero at position `k`.
fn embed(v: &DVector<f64>, k: usize, out: &mut DVector<f64>) {
    out.fill(0.0);
    for i in 0..v.len() {
        out[i + usize::from(i >= k)] = v[i];
    }
}

/// Per-column quantities for the `Σ` block, derived from the running
/// `Ω`, `P = ΩS`, `T = ΩSΩ` without touching `Σ` itself.
///
/// Fills `scratch.h` with `H` and `scratch.msand` with `H S_{-k,-k} H` and
/// returns `u_old = Σ_kk - Σ_{k,-k}ᵀ H Σ_{k,-k} = 1/Ω_kk`.
fn column_quantities(
    k: usize,
    s: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    p_run: &DMatrix<f64>,
    t_run: &DMatrix<f64>,
    h: &mut DMatrix<f64>,
    msand: &mut DMatrix<f64>,
) -> f64 {
    let q = s.nrows();
    let qm = q - 1;
    let c = omega[(k, k)];

    let mut a = DVector::zeros(qm);
    col_minor_into(omega, k, &mut a);
    let mut s_col = DVector::zeros(qm);
    col_minor_into(s, k, &mut s_col);
    let s_kk = s[(k, k)];

    // H = Ω_{-k,-k} - a aᵀ / c
    minor_into(omega, k, h);
    h.ger(-1.0 / c, &a, &a, 1.0);

    // v = Ω_{-k,-k} s_col = P_{-k,k} - S_kk a
    let mut v = DVector::zeros(qm);
    col_minor_into(p_run, k, &mut v);
    v.axpy(-s_kk, &a, 1.0);

    // w = S_{-k,-k} a  via the embedded product S â
    let mut a_emb = DVector::zeros(q);
    embed(&a, k, &mut a_emb);
    let w_full = s * &a_emb;
    let mut w = DVector::zeros(qm);
    for i in 0..q {
        if i != k {
            w[i - usize::from(i > k)] = w_full[i];
        }
    }

    // m = Ω_{-k,-k} S_{-k,-k} a = P_{-k,-k} a - (s_colᵀ a) a
    let p_a_full = p_run * &a_emb;
    let mut m_vec = DVector::zeros(qm);
    for i in 0..q {
        if i != k {
            m_vec[i - usize::from(i > k)] = p_a_full[i];
        }
    }
    m_vec.axpy(-s_col.dot(&a), &a, 1.0);

    // H S_{-k,-k} H assembled from T_{-k,-k} and rank-one corrections.
    minor_into(t_run, k, msand);
    msand.ger(-1.0, &a, &v, 1.0);
    msand.ger(-1.0, &v, &a, 1.0);
    msand.ger(-s_kk, &a, &a, 1.0);
    msand.ger(-1.0 / c, &m_vec, &a, 1.0);
    msand.ger(-1.0 / c, &a, &m_vec, 1.0);
    msand.ger(a.dot(&w) / (c * c), &a, &a, 1.0);

    1.0 / c
}

/// Exact refresh of the running products after column `k` of `Σ` changed.
///
/// `h_beta = H β` and `u` are the just-drawn quantities; `omega` still holds
/// the pre-update inverse on entry and the post-update inverse on exit.
fn refresh_running(
    k: usize,
    s: &DMatrix<f64>,
    omega: &mut DMatrix<f64>,
    p_run: &mut DMatrix<f64>,
    t_run: &mut DMatrix<f64>,
    h: &DMatrix<f64>,
    h_beta: &DVector<f64>,
    u: f64,
) {
    let q = s.nrows();
    let qm = q - 1;
    let c = omega[(k, k)];
    let mut a = DVector::zeros(qm);
    col_minor_into(omega, k, &mut a);

    // ΔΩ as a short list of rank-one terms (α, x, y) with ΔΩ = Σ α x yᵀ;
    // x and y index into `vecs`, with `svecs[i] = S vecs[i]` cached.
    let mut hb_emb = DVector::zeros(q);
    embed(h_beta, k, &mut hb_emb);
    let mut a_emb = DVector::zeros(q);
    embed(&a, k, &mut a_emb);
    let mut e_k = DVector::zeros(q);
    e_k[k] = 1.0;
    // New column k of Ω is -Hβ/u off-diagonal, 1/u on the diagonal.
    let mut delta_col = DVector::zeros(q);
    delta_col.axpy(-1.0 / u, &hb_emb, 0.0);
    delta_col.axpy(-1.0, &a_emb, 1.0);
    let delta_kk = 1.0 / u - c;

    let s_hb = s * &hb_emb;
    let s_a = s * &a_emb;
    let s_ek = s.column(k).clone_owned();
    let s_delta = s * &delta_col;
    let vecs = [&hb_emb, &a_emb, &e_k, &delta_col];
    let svecs = [&s_hb, &s_a, &s_ek, &s_delta];
    let terms: [(f64, usize, usize); 5] = [
        (1.0 / u, 0, 0),
        (-1.0 / c, 1, 1),
        (1.0, 2, 3),
        (1.0, 3, 2),
        (delta_kk, 2, 2),
    ];

    // T += ΔΩ S Ω + Ω S ΔΩ + ΔΩ S ΔΩ, all against the pre-update Ω.
    for &(alpha, xi, yi) in &terms {
        let z = &*omega * svecs[yi];
        t_run.ger(alpha, vecs[xi], &z, 1.0);
        t_run.ger(alpha, &z, vecs[xi], 1.0);
    }
    for &(ai, xi, yi) in &terms {
        for &(aj, xj, yj) in &terms {
            let g = vecs[yi].dot(svecs[xj]);
            t_run.ger(ai * aj * g, vecs[xi], vecs[yj], 1.0);
        }
    }
    // P += ΔΩ S.
    for &(alpha, xi, yi) in &terms {
        p_run.ger(alpha, vecs[xi], svecs[yi], 1.0);
    }

    // Finally write Ω itself: Ω_{-k,-k} = H + (Hβ)(Hβ)ᵀ/u, column k from β, u.
    for i in 0..q {
        if i == k {
            continue;
        }
        let ii = i - usize::from(i > k);
        for j in 0..q {
            if j == k {
                continue;
            }
            let jj = j - usize::from(j > k);
            omega[(i, j)] = h[(ii, jj)] + hb_emb[i] * hb_emb[j] / u;
        }
    }
    for i in 0..q {
        omega[(i, k)] = -hb_emb[i] / u;
        omega[(k, i)] = -hb_emb[i] / u;
    }
    omega[(k, k)] = 1.0 / u;
}

/// One full pass over the columns of `Σ`, then the collapsed `λ` draw and
/// the `τ` refresh.  `n` is the number of latent rows contributing to `s`.
///
/// Returns the new `(Σ, τ, λ)`.
pub fn update_sigma_block<R: Rng + ?Sized>(
    s: &DMatrix<f64>,
    params: &ModelParams,
    n: usize,
    rng: &mut R,
) -> Result<(DMatrix<f64>, DMatrix<f64>, f64), GibbsError> {
    let q = params.sigma.nrows();
    if s.nrows() != q || s.ncols() != q {
        return Err(GibbsError::Dimension(format!(
            "S is {}x{}, sigma is {}x{}",
            s.nrows(),
            s.ncols(),
            q,
            q
        )));
    }
    let mut sigma = params.sigma.clone();
    let mut scratch = SweepScratch::new(1, q, 0);
    let d = params.b[0].ncols();
    let rank = params.rank();
    let mut warnings = Vec::new();
    sigma_columns(
        s,
        &mut sigma,
        &params.tau,
        params.lambda,
        n,
        d,
        rank,
        &mut scratch,
        &mut warnings,
        rng,
    )?;
    let lambda = draw_lambda(&sigma, &params.hyper, rng)?;
    let tau = draw_tau(&sigma, lambda, rng)?;
    Ok((sigma, tau, lambda))
}

/// Collapsed rate draw: `λ | Σ ~ Gamma(v + q(q+1)/2, s + ||Σ||_1 / 2)`.
///
/// Integrating the `τ` mixture out of the off-diagonal prior leaves Laplace
/// terms `(λ/2) exp(-λ|σ_kl|)`, so all q(q+1)/2 free entries of `Σ`
/// contribute to the shape and the rate gains half the elementwise l1 norm.
/// Drawing `λ` before `τ` keeps the pair a valid partially collapsed step.
fn draw_lambda<R: Rng + ?Sized>(
    sigma: &DMatrix<f64>,
    hyper: &Hyper,
    rng: &mut R,
) -> Result<f64, GibbsError> {
    let q = sigma.nrows();
    let shape = hyper.v + 0.5 * (q * (q + 1)) as f64;
    let l1: f64 = sigma.iter().map(|v| v.abs()).sum();
    let rate = hyper.s + 0.5 * l1;
    Ok(draw_gamma(shape, rate, rng)?)
}

/// Mixture weights given `Σ` and `λ`: `1/τ_kl ~ InvGauss(λ/|σ_kl|, λ²)`.
fn draw_tau<R: Rng + ?Sized>(
    sigma: &DMatrix<f64>,
    lambda: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>, GibbsError> {
    let q = sigma.nrows();
    let scale = (sigma.trace() / q as f64).max(f64::MIN_POSITIVE);
    let mut tau = DMatrix::zeros(q, q);
    for k in 0..q {
        for l in (k + 1)..q {
            let abs_s = sigma[(k, l)].abs().max(1e-12 * scale);
            let inv = draw_inverse_gaussian(lambda / abs_s, lambda * lambda, rng)?
                .max(1e-300);
            let t = (1.0 / inv).min(1e300);
            tau[(k, l)] = t;
            tau[(l, k)] = t;
        }
    }
    Ok(tau)
}

/// The column loop shared by the public op and the sweep engine. `sigma` is
/// updated in place; the caller refreshes `Ω` afterwards if it needs it.
#[allow(clippy::too_many_arguments)]
fn sigma_columns<R: Rng + ?Sized>(
    s: &DMatrix<f64>,
    sigma: &mut DMatrix<f64>,
    tau: &DMatrix<f64>,
    lambda: f64,
    n: usize,
    d: usize,
    rank: usize,
    scratch: &mut SweepScratch,
    warnings: &mut Vec<String>,
    rng: &mut R,
) -> Result<(), GibbsError> {
    let q = sigma.nrows();
    if q == 1 {
        // Degenerate tree with a single internal node: Σ is the scalar u.
        let chi = s[(0, 0)].max(1e-12);
        let p_gig = 1.0 - 0.5 * (n + d * (rank + 1)) as f64;
        sigma[(0, 0)] = draw_gig(p_gig, lambda, chi, rng)?;
        return Ok(());
    }

    // A whisper of ridge on S. When q exceeds rank(S) = n + d(rank+1) the
    // Gram statistic is singular, every column system is underdetermined and
    // the conditionals concentrate on singular Σ; the ridge gives each column
    // genuine curvature (χ ≥ ρ(1 + |Hβ|²), so the feedback between u and Ω
    // is self-limiting). At 1e-8 relative it is far below Monte Carlo
    // resolution in full-rank regimes.
    let trace_mean = (0..q).map(|i| s[(i, i)]).sum::<f64>() / q as f64;
    let rho = 1e-8 * (trace_mean + 1.0);
    let mut s_ridged = s.clone();
    for i in 0..q {
        s_ridged[(i, i)] += rho;
    }
    let s = &s_ridged;

    // Fresh running products for this pass.
    let chol = cholesky_pd(sigma).map_err(|e| {
        let diag: Vec<f64> = (0..q).map(|i| sigma[(i, i)]).collect();
        let dmin = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        let dmax = diag.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        eprintln!("[dbg] sigma entry chol failed: diag [{dmin:.3e}, {dmax:.3e}], lambda {lambda:.3e}: {e}");
        e
    })?;
    scratch.omega = chol.inverse();
    scratch.p_run = &scratch.omega * s;
    scratch.t_run = &scratch.p_run * &scratch.omega;

    let qm = q - 1;
    let p_gig = 1.0 - 0.5 * (n + d * (rank + 1)) as f64;
    let mut s_col = DVector::zeros(qm);
    let mut tau_col = DVector::zeros(qm);

    for k in 0..q {
        let mut u_old = column_quantities(
            k,
            s,
            &scratch.omega,
            &scratch.p_run,
            &scratch.t_run,
            &mut scratch.h,
            &mut scratch.msand,
        );
        // Past-column draws write fitted off-diagonal entries into rows the
        // pass has not reached yet, and in the underdetermined regime that
        // can squeeze an unvisited column's Schur complement toward zero. A
        // collapsed complement poisons Ω and the running products with its
        // reciprocal, so lift the whole spectrum with a small diagonal bump
        // and rebuild before drawing this column.
        let sigma_scale = (0..q).map(|i| sigma[(i, i)]).sum::<f64>() / q as f64;
        if u_old < 1e-4 * sigma_scale {
            warnings.push(format!(
                "Schur complement {u_old:.3e} at column {k}: sigma diagonal lifted"
            ));
            let bump = 1e-3 * sigma_scale;
            for i in 0..q {
                sigma[(i, i)] += bump;
            }
            let chol = cholesky_pd(sigma)?;
            scratch.omega = chol.inverse();
            scratch.p_run = &scratch.omega * s;
            scratch.t_run = &scratch.p_run * &scratch.omega;
            u_old = column_quantities(
                k,
                s,
                &scratch.omega,
                &scratch.p_run,
                &scratch.t_run,
                &mut scratch.h,
                &mut scratch.msand,
            );
        }
        col_minor_into(s, k, &mut s_col);
        col_minor_into(tau, k, &mut tau_col);
        let s_kk = s[(k, k)];

        // Θ_k = u⁻¹ H S_{-k,-k} H + λ H + diag(1/τ).
        scratch.theta.copy_from(&scratch.msand);
        scratch.theta *= 1.0 / u_old;
        scratch
            .theta
            .iter_mut()
            .zip(scratch.h.iter())
            .for_each(|(t, h)| *t += lambda * h);
        for i in 0..qm {
            scratch.theta[(i, i)] += 1.0 / tau_col[i].max(1e-300);
        }

        let chol_theta = cholesky_pd(&scratch.theta).map_err(|e| {
            let diag: Vec<f64> = (0..qm).map(|i| scratch.theta[(i, i)]).collect();
            let dmin = diag.iter().cloned().fold(f64::INFINITY, f64::min);
            let dmax = diag.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let tmin = tau_col.iter().cloned().fold(f64::INFINITY, f64::min);
            eprintln!(
                "[dbg] theta chol failed at k {k}: theta diag [{dmin:.3e}, {dmax:.3e}], u_old {u_old:.3e}, lambda {lambda:.3e}, tau min {tmin:.3e}: {e}"
            );
            e
        })?;
        // mean = u⁻¹ Θ⁻¹ H s_col
        let h_s = &scratch.h * &s_col;
        let mut mean = h_s.clone();
        chol_theta.solve_mut(&mut mean);
        mean *= 1.0 / u_old;
        // β = mean + L⁻ᵀ z
        let mut z = DVector::zeros(qm);
        for v in z.iter_mut() {
            *v = rng.sample(rand_distr::StandardNormal);
        }
        let beta = &mean
            + chol_theta
                .l()
                .tr_solve_lower_triangular(&z)
                .ok_or_else(|| GibbsError::Numerical {
                    iteration: 0,
                    what: "singular Θ factor in Σ column draw".into(),
                })?;

        // χ = βᵀ H S_{-k,-k} H β - 2 s_colᵀ H β + S_kk, nonnegative because it
        // is a quadratic form in the PSD statistic S; clamp to a small floor
        // before the GIG draw, which needs χ > 0.
        let h_beta = &scratch.h * &beta;
        let chi_raw = beta.dot(&(&scratch.msand * &beta)) - 2.0 * s_col.dot(&h_beta) + s_kk;
        let floor = 1e-10 * (s_kk.abs() + 1.0);
        if chi_raw < -floor {
            warnings.push(format!("negative chi {chi_raw:.3e} clamped at column {k}"));
        }
        let chi = chi_raw.max(floor);
        // When q exceeds the rank of S (= n + d(rank+1)) the column system is
        // underdetermined: β can fit its target exactly, χ collapses to the
        // floor and the GIG concentrates u near χ / (n + d(rank+1)), driving
        // Σ numerically singular and every later factorization with it. Keep
        // u above a small multiple of the column's per-degree-of-freedom
        // scale; in full-rank regimes the draw sits orders of magnitude
        // higher and the floor is inert.
        let dof = (n + d * (rank + 1)) as f64;
        let u_floor = 1e-4 * (s_kk.abs() + 1.0) / dof;
        let mut u_new = draw_gig(p_gig, lambda, chi, rng)?;
        if u_new < u_floor {
            warnings.push(format!(
                "Schur complement {u_new:.3e} floored at column {k}"
            ));
            u_new = u_floor;
        }

        refresh_running(
            k,
            s,
            &mut scratch.omega,
            &mut scratch.p_run,
            &mut scratch.t_run,
            &scratch.h,
            &h_beta,
            u_new,
        );
        for i in 0..q {
            if i == k {
                continue;
            }
            let ii = i - usize::from(i > k);
            sigma[(i, k)] = beta[ii];
            sigma[(k, i)] = beta[ii];
        }
        sigma[(k, k)] = u_new + beta.dot(&h_beta);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Coefficient, score and scale updates
// ---------------------------------------------------------------------------

/// Matrix-normal draw shared by the `B_0` and `B_r` updates.
///
/// `weights` are the per-sample scalars multiplying `B x_i` in the mean
/// (all ones for `B_0`, the scores `γ_{·r}` for `B_r`); `targets` holds the
/// rows the regression explains; `col_var` is the prior column variance
/// vector (`ω` or `ν`).
fn draw_coeff_matrix<R: Rng + ?Sized>(
    targets: &DMatrix<f64>,
    weights: &DVector<f64>,
    design: &Design,
    sigma_chol_l: &DMatrix<f64>,
    col_var: &DVector<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>, GibbsError> {
    let (mean, chol_s) = coeff_conditional(targets, weights, design, col_var)?;
    Ok(draw_matrix_normal_col_prec(
        &mean,
        sigma_chol_l,
        &chol_s.l(),
        rng,
    ))
}

/// Posterior mean and column-precision factor for a coefficient matrix.
fn coeff_conditional(
    targets: &DMatrix<f64>,
    weights: &DVector<f64>,
    design: &Design,
    col_var: &DVector<f64>,
) -> Result<(DMatrix<f64>, nalgebra::Cholesky<f64, nalgebra::Dyn>), GibbsError> {
    let x = &design.x;
    let d = x.ncols();
    // S = Σ_i w_i² x_i x_iᵀ + D⁻¹
    let mut s_post = DMatrix::zeros(d, d);
    let mut xi = DVector::zeros(d);
    for i in 0..x.nrows() {
        xi.copy_from(&x.row(i).transpose());
        s_post.ger(weights[i] * weights[i], &xi, &xi, 1.0);
    }
    for j in 0..d {
        s_post[(j, j)] += 1.0 / col_var[j].max(1e-300);
    }
    // A = Σ_i w_i t_i x_iᵀ  (q x d)
    let mut a = DMatrix::zeros(targets.ncols(), d);
    let mut ti = DVector::zeros(targets.ncols());
    for i in 0..x.nrows() {
        ti.copy_from(&targets.row(i).transpose());
        xi.copy_from(&x.row(i).transpose());
        a.ger(weights[i], &ti, &xi, 1.0);
    }
    let chol_s = cholesky_pd(&s_post)?;
    // mean = A S⁻¹ via solving S Mᵀ = Aᵀ.
    let mut mt = a.transpose();
    chol_s.solve_mut(&mut mt);
    Ok((mt.transpose(), chol_s))
}

/// Draw `B_0 | ·` given current scores and factor matrices.
pub fn update_b0<R: Rng + ?Sized>(
    state: &LatentState,
    params: &ModelParams,
    design: &Design,
    rng: &mut R,
) -> Result<DMatrix<f64>, GibbsError> {
    let n = state.phi.nrows();
    let mut targets = state.phi.clone();
    for r in 1..=params.rank() {
        let xb = &design.x * params.b[r].transpose();
        for i in 0..n {
            let g = state.gamma[(i, r - 1)];
            for c in 0..targets.ncols() {
                targets[(i, c)] -= g * xb[(i, c)];
            }
        }
    }
    let weights = DVector::from_element(n, 1.0);
    let l_sigma = cholesky_pd(&params.sigma)?.l();
    draw_coeff_matrix(&targets, &weights, design, &l_sigma, &params.omega, rng)
}

/// Draw `B_r | ·` for one factor index `r` in `1..=R`.
pub fn update_br<R: Rng + ?Sized>(
    r: usize,
    state: &LatentState,
    params: &ModelParams,
    design: &Design,
    rng: &mut R,
) -> Result<DMatrix<f64>, GibbsError> {
    if r == 0 || r > params.rank() {
        return Err(GibbsError::Dimension(format!(
            "factor index {r} out of range 1..={}",
            params.rank()
        )));
    }
    let n = state.phi.nrows();
    // W_ir = φ_i - B_0 x_i - Σ_{r'≠r} γ_ir' B_r' x_i
    let mut targets = &state.phi - &design.x * params.b[0].transpose();
    for rp in 1..=params.rank() {
        if rp == r {
            continue;
        }
        let xb = &design.x * params.b[rp].transpose();
        for i in 0..n {
            let g = state.gamma[(i, rp - 1)];
            for c in 0..targets.ncols() {
                targets[(i, c)] -= g * xb[(i, c)];
            }
        }
    }
    let weights = state.gamma.column(r - 1).clone_owned();
    let l_sigma = cholesky_pd(&params.sigma)?.l();
    draw_coeff_matrix(&targets, &weights, design, &l_sigma, &params.nu, rng)
}

/// Draw the scalar score `γ_ir | ·`.
///
/// The conditional is `N(s⁻¹ V_irᵀ Σ⁻¹ B_r x_i, s⁻¹)` with
/// `s = 1 + x_iᵀ B_rᵀ Σ⁻¹ B_r x_i`, so the posterior variance never
/// exceeds the prior's 1 and `B_r x_i = 0` returns a pure N(0,1) draw.
pub fn update_gamma<R: Rng + ?Sized>(
    i: usize,
    r: usize,
    state: &LatentState,
    params: &ModelParams,
    design: &Design,
    rng: &mut R,
) -> Result<f64, GibbsError> {
    if r == 0 || r > params.rank() {
        return Err(GibbsError::Dimension(format!(
            "factor index {r} out of range 1..={}",
            params.rank()
        )));
    }
    let chol = cholesky_pd(&params.sigma)?;
    let x_i = design.x.row(i).transpose();
    let b_r_x = &params.b[r] * &x_i;
    let mut v_ir = state.phi.row(i).transpose() - &params.b[0] * &x_i;
    for rp in 1..=params.rank() {
        if rp == r {
            continue;
        }
        v_ir -= (&params.b[rp] * &x_i) * state.gamma[(i, rp - 1)];
    }
    let mut sinv_brx = b_r_x.clone();
    chol.solve_mut(&mut sinv_brx);
    let s_ir = 1.0 + b_r_x.dot(&sinv_brx);
    let mean = v_ir.dot(&sinv_brx) / s_ir;
    let z: f64 = rng.sample(rand_distr::StandardNormal);
    Ok(mean + z / s_ir.sqrt())
}

/// Draw the latent log-odds row `φ_i | ·` from its Gaussian conditional
/// `N(O⁻¹(κ_i + Σ⁻¹ μ_i), O⁻¹)` with `O = Σ⁻¹ + diag(g_i)` and
/// `κ_ik = y_ik - N_ik/2`.
pub fn update_phi<R: Rng + ?Sized>(
    i: usize,
    state: &LatentState,
    params: &ModelParams,
    design: &Design,
    nodes: &NodeCounts,
    rng: &mut R,
) -> Result<DVector<f64>, GibbsError> {
    let omega = cholesky_pd(&params.sigma)?.inverse();
    let x_i = design.x.row(i).transpose();
    let mut mu = &params.b[0] * &x_i;
    for r in 1..=params.rank() {
        mu += (&params.b[r] * &x_i) * state.gamma[(i, r - 1)];
    }
    draw_phi_row(i, &omega, &mu, &state.g, nodes, rng)
}

fn draw_phi_row<R: Rng + ?Sized>(
    i: usize,
    omega: &DMatrix<f64>,
    mu: &DVector<f64>,
    g: &DMatrix<f64>,
    nodes: &NodeCounts,
    rng: &mut R,
) -> Result<DVector<f64>, GibbsError> {
    let q = omega.nrows();
    let mut prec = omega.clone();
    for k in 0..q {
        prec[(k, k)] += g[(i, k)];
    }
    let mut rhs = omega * mu;
    for k in 0..q {
        rhs[k] += nodes.y_left[(i, k)] as f64 - 0.5 * nodes.n_total[(i, k)] as f64;
    }
    let chol = cholesky_pd(&prec)?;
    let mut mean = rhs;
    chol.solve_mut(&mut mean);
    let mut z = DVector::zeros(q);
    for v in z.iter_mut() {
        *v = rng.sample(rand_distr::StandardNormal);
    }
    let draw = chol
        .l()
        .tr_solve_lower_triangular(&z)
        .ok_or_else(|| GibbsError::Numerical {
            iteration: 0,
            what: "singular O_i factor in φ draw".into(),
        })?;
    Ok(mean + draw)
}

/// Refresh the Polya-Gamma auxiliaries for sample `i`:
/// `g_ik ~ PG(N_ik, φ_ik)`, exactly zero where `N_ik = 0`.
pub fn update_pg<R: Rng + ?Sized>(
    i: usize,
    state: &LatentState,
    nodes: &NodeCounts,
    rng: &mut R,
) -> Result<DVector<f64>, GibbsError> {
    let q = state.phi.ncols();
    let mut g = DVector::zeros(q);
    for k in 0..q {
        let n_ik = nodes.n_total[(i, k)];
        if n_ik > 0 {
            g[k] = draw_polya_gamma(n_ik, state.phi[(i, k)], rng)?;
        }
    }
    Ok(g)
}

/// Conjugate inverse-gamma draws for the column scales `ν` and `ω`.
///
/// `ν_j | · ~ IG(a_ν + qR/2, b_ν + ½ Σ_r b_jrᵀ Σ⁻¹ b_jr)` and
/// `ω_j | · ~ IG(a_ω + q/2, b_ω + ½ b_j0ᵀ Σ⁻¹ b_j0)`, where `b_jr` is
/// column `j` of `B_r`.
pub fn update_scales<R: Rng + ?Sized>(
    params: &ModelParams,
    rng: &mut R,
) -> Result<(DVector<f64>, DVector<f64>), GibbsError> {
    let chol = cholesky_pd(&params.sigma)?;
    let q = params.sigma.nrows() as f64;
    let d = params.b[0].ncols();
    let rank = params.rank();
    let h = &params.hyper;

    let quad = |col: &DVector<f64>| -> f64 {
        let mut v = col.clone();
        chol.solve_mut(&mut v);
        col.dot(&v)
    };

    let mut nu = DVector::zeros(d);
    for j in 0..d {
        let mut ssq = 0.0;
        for r in 1..=rank {
            ssq += quad(&params.b[r].column(j).clone_owned());
        }
        nu[j] = draw_inverse_gamma(h.a_nu + 0.5 * q * rank as f64, h.b_nu + 0.5 * ssq, rng)?;
    }
    let mut omega_s = DVector::zeros(d);
    for j in 0..d {
        let ssq = quad(&params.b[0].column(j).clone_owned());
        omega_s[j] = draw_inverse_gamma(h.a_omega + 0.5 * q, h.b_omega + 0.5 * ssq, rng)?;
    }
    Ok((nu, omega_s))
}

// ---------------------------------------------------------------------------
// Sweep engine and chain driver
// ---------------------------------------------------------------------------

/// Everything a sweep needs besides parameters and RNG.
struct ChainData<'a> {
    nodes: Option<&'a NodeCounts>,
    design: Design,
    /// κ_ik = y_ik - N_ik/2, zero rows where counts are absent.
    kappa: DMatrix<f64>,
    update_latent: bool,
}

/// One full Gibbs sweep over all blocks, in the documented order.
fn gibbs_sweep<R: Rng + ?Sized>(
    params: &mut ModelParams,
    state: &mut LatentState,
    data: &ChainData<'_>,
    scratch: &mut SweepScratch,
    warnings: &mut Vec<String>,
    rng: &mut R,
) -> Result<(), GibbsError> {
    let n = state.phi.nrows();
    let q = state.phi.ncols();
    let d = data.design.x.ncols();
    let rank = params.rank();
    let x = &data.design.x;

    // Residuals and the sufficient statistic from the incoming state.
    scratch.mean_all = x * params.b[0].transpose();
    for r in 1..=rank {
        let xb = x * params.b[r].transpose();
        for i in 0..n {
            let g = state.gamma[(i, r - 1)];
            for c in 0..q {
                scratch.mean_all[(i, c)] += g * xb[(i, c)];
            }
        }
    }
    scratch.resid = &state.phi - &scratch.mean_all;
    scratch.s_stat = scratch.resid.transpose() * &scratch.resid;
    for r in 0..=rank {
        let var = if r == 0 { &params.omega } else { &params.nu };
        let mut col = DVector::zeros(q);
        for j in 0..d {
            col.copy_from(&params.b[r].column(j));
            scratch
                .s_stat
                .ger(1.0 / var[j].max(1e-300), &col, &col, 1.0);
        }
    }

    // Σ block, then λ collapsed over τ, then τ.
    let s_stat = scratch.s_stat.clone();
    sigma_columns(
        &s_stat,
        &mut params.sigma,
        &params.tau,
        params.lambda,
        n,
        d,
        rank,
        scratch,
        warnings,
        rng,
    )?;
    params.lambda = draw_lambda(&params.sigma, &params.hyper, rng)?;
    params.tau = draw_tau(&params.sigma, params.lambda, rng)?;

    if q >= 100 {
        static SWEEP: std::sync::atomic::AtomicUsize = std::sync::atomic::AtomicUsize::new(0);
        let sw = SWEEP.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let diag: Vec<f64> = (0..q).map(|i| params.sigma[(i, i)]).collect();
        let dmin = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        let dmax = diag.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let l1: f64 = params.sigma.iter().map(|v| v.abs()).sum();
        eprintln!(
            "[dbg] sweep {sw}: lambda {:.3e}, |sigma|_1 {l1:.3e}, diag [{dmin:.3e}, {dmax:.3e}]",
            params.lambda
        );
    }

    let sigma_chol = cholesky_pd(&params.sigma).map_err(|e| {
        eprintln!("[dbg] post-column sigma chol failed: {e}");
        e
    })?;
    let omega_mat = sigma_chol.inverse();
    let l_sigma = sigma_chol.l();

    // γ scores, sequentially over (i, r) with current values.
    if rank > 0 {
        for r in 0..rank {
            scratch.xb[r] = x * params.b[r + 1].transpose();
            scratch.xbo[r] = &scratch.xb[r] * &omega_mat;
        }
        for i in 0..n {
            for r in 0..rank {
                let brx = scratch.xb[r].row(i);
                let brx_o = scratch.xbo[r].row(i);
                let s_ir = 1.0 + brx.dot(&brx_o);
                // V_ir = φ_i - (mean_i - γ_ir B_r x_i)
                let g_old = state.gamma[(i, r)];
                let mut num = 0.0;
                for c in 0..q {
                    let v = state.phi[(i, c)] - (scratch.mean_all[(i, c)] - g_old * brx[c]);
                    num += v * brx_o[c];
                }
                let mean = num / s_ir;
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                let g_new = mean + z / s_ir.sqrt();
                state.gamma[(i, r)] = g_new;
                let delta = g_new - g_old;
                for c in 0..q {
                    scratch.mean_all[(i, c)] += delta * brx[c];
                }
            }
        }
    }

    // Factor matrices B_r, then the mean matrix B_0, current values throughout.
    for r in 1..=rank {
        let xb_old = x * params.b[r].transpose();
        let mut targets = DMatrix::zeros(n, q);
        for i in 0..n {
            let g = state.gamma[(i, r - 1)];
            for c in 0..q {
                targets[(i, c)] =
                    state.phi[(i, c)] - (scratch.mean_all[(i, c)] - g * xb_old[(i, c)]);
            }
        }
        let weights = state.gamma.column(r - 1).clone_owned();
        let b_new = draw_coeff_matrix(&targets, &weights, &data.design, &l_sigma, &params.nu, rng)?;
        let xb_new = x * b_new.transpose();
        for i in 0..n {
            let g = state.gamma[(i, r - 1)];
            for c in 0..q {
                scratch.mean_all[(i, c)] += g * (xb_new[(i, c)] - xb_old[(i, c)]);
            }
        }
        params.b[r] = b_new;
    }
    {
        let xb_old = x * params.b[0].transpose();
        let targets = &state.phi - (&scratch.mean_all - &xb_old);
        let weights = DVector::from_element(n, 1.0);
        let b_new =
            draw_coeff_matrix(&targets, &weights, &data.design, &l_sigma, &params.omega, rng)?;
        let xb_new = x * b_new.transpose();
        scratch.mean_all += xb_new - xb_old;
        params.b[0] = b_new;
    }

    // Column scales.
    let (nu, omega_s) = update_scales(params, rng)?;
    params.nu = nu;
    params.omega = omega_s;

    // Latent log-odds and Polya-Gamma refresh; φ sees the g values carried
    // over from the previous sweep.
    if data.update_latent {
        let nodes = data.nodes.expect("latent updates require counts");
        for i in 0..n {
            scratch.o_i.copy_from(&omega_mat);
            for k in 0..q {
                scratch.o_i[(k, k)] += state.g[(i, k)];
            }
            scratch.mu_i.copy_from(&scratch.mean_all.row(i).transpose());
            let mut rhs = &omega_mat * &scratch.mu_i;
            for k in 0..q {
                rhs[k] += data.kappa[(i, k)];
            }
            let chol = cholesky_pd(&scratch.o_i).map_err(|e| {
                eprintln!("[dbg] o_i chol failed at sample {i}: {e}");
                e
            })?;
            let mut mean = rhs;
            chol.solve_mut(&mut mean);
            let mut z = DVector::zeros(q);
            for v in z.iter_mut() {
                *v = rng.sample(rand_distr::StandardNormal);
            }
            let step =
                chol.l()
                    .tr_solve_lower_triangular(&z)
                    .ok_or_else(|| GibbsError::Numerical {
                        iteration: 0,
                        what: "singular O_i factor in φ draw".into(),
                    })?;
            for k in 0..q {
                state.phi[(i, k)] = mean[k] + step[k];
            }
        }
        for i in 0..n {
            for k in 0..q {
                let n_ik = nodes.n_total[(i, k)];
                state.g[(i, k)] = if n_ik > 0 {
                    draw_polya_gamma(n_ik, state.phi[(i, k)], rng)?
                } else {
                    0.0
                };
            }
        }
    }
    Ok(())
}

fn check_finite(params: &ModelParams, state: &LatentState, iteration: usize) -> Result<(), GibbsError> {
    let bad = |name: &str| GibbsError::Numerical {
        iteration,
        what: format!("non-finite value in {name}"),
    };
    if params.sigma.iter().any(|v| !v.is_finite()) {
        return Err(bad("sigma"));
    }
    if !params.lambda.is_finite() {
        return Err(bad("lambda"));
    }
    if params.b.iter().any(|b| b.iter().any(|v| !v.is_finite())) {
        return Err(bad("B"));
    }
    if state.phi.iter().any(|v| !v.is_finite()) {
        return Err(bad("phi"));
    }
    if state.gamma.iter().any(|v| !v.is_finite()) {
        return Err(bad("gamma"));
    }
    Ok(())
}

/// Initial state shared by all modes: pseudo-count log-odds (jittered per
/// chain stream), identity `Σ`, zero coefficients except the intercept
/// column of `B_0` at the column means of `φ⁰`, unit scales and weights.
fn initial_state<R: Rng + ?Sized>(
    config: &FitConfig,
    phi0: &DMatrix<f64>,
    design: &Design,
    nodes: Option<&NodeCounts>,
    jitter: bool,
    rng: &mut R,
) -> Result<(ModelParams, LatentState), GibbsError> {
    let n = phi0.nrows();
    let q = phi0.ncols();
    let d = design.x.ncols();

    let mut phi = phi0.clone();
    if jitter {
        for v in phi.iter_mut() {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            *v += 0.1 * z;
        }
    }

    let mut b = vec![DMatrix::zeros(q, d); config.rank + 1];
    if let Some(j) = design.intercept_index() {
        for k in 0..q {
            b[0][(k, j)] = phi.column(k).mean();
        }
    }
    let mut tau = DMatrix::zeros(q, q);
    for i in 0..q {
        for j in 0..q {
            if i != j {
                tau[(i, j)] = 1.0;
            }
        }
    }
    let params = ModelParams {
        sigma: DMatrix::identity(q, q),
        b,
        tau,
        lambda: 1.0,
        nu: DVector::from_element(d, 1.0),
        omega: DVector::from_element(d, 1.0),
        hyper: config.hyper.clone(),
    };

    let mut gamma = DMatrix::zeros(n, config.rank);
    for v in gamma.iter_mut() {
        *v = rng.sample(rand_distr::StandardNormal);
    }
    let mut g = DMatrix::zeros(n, q);
    if let Some(nodes) = nodes {
        for i in 0..n {
            for k in 0..q {
                let n_ik = nodes.n_total[(i, k)];
                if n_ik > 0 {
                    g[(i, k)] = draw_polya_gamma(n_ik, phi[(i, k)], rng)?;
                }
            }
        }
    }
    let state = LatentState { phi, gamma, g };
    params.validate()?;
    state.validate(n, q, config.rank).map_err(GibbsError::Model)?;
    Ok((params, state))
}

/// Binomial log-likelihood of sample `i` at log-odds row `φ_i`.
fn binomial_loglik_row(nodes: &NodeCounts, phi: &DMatrix<f64>, i: usize) -> f64 {
    use statrs::function::gamma::ln_gamma;
    let mut total = 0.0;
    for k in 0..phi.ncols() {
        let n_ik = nodes.n_total[(i, k)] as f64;
        if n_ik == 0.0 {
            continue;
        }
        let y = nodes.y_left[(i, k)] as f64;
        let p = phi[(i, k)];
        let log1pe = if p > 35.0 { p } else { (1.0 + p.exp()).ln() };
        total += ln_gamma(n_ik + 1.0) - ln_gamma(y + 1.0) - ln_gamma(n_ik - y + 1.0)
            + y * p
            - n_ik * log1pe;
    }
    total
}

/// Run a single chain on RNG stream `stream` of `config.seed`.
pub fn run_chain(
    config: &FitConfig,
    nodes: &NodeCounts,
    design: &Design,
    tree: &PhyloTree,
    stream: u64,
) -> Result<PosteriorDraws, GibbsError> {
    config.validate()?;
    design.validate().map_err(GibbsError::Model)?;

    // Mode-specific reductions: the effective design, rank and φ source.
    let mut effective = config.clone();
    let design_eff: Design;
    match &config.mode {
        FitMode::NoCovariates { .. } => {
            effective.rank = 0;
            design_eff = Design::intercept_only(design.x.nrows());
        }
        _ => design_eff = design.clone(),
    }

    let oracle_phi = match &config.mode {
        FitMode::Oracle { phi_true } => Some(phi_true.clone()),
        _ => None,
    };
    let uses_counts = oracle_phi.is_none();
    if uses_counts {
        nodes.validate(tree).map_err(GibbsError::Phylo)?;
        if nodes.n_total.nrows() != design_eff.x.nrows() {
            return Err(GibbsError::Dimension(format!(
                "counts have {} samples, design has {}",
                nodes.n_total.nrows(),
                design_eff.x.nrows()
            )));
        }
    } else if let Some(phi) = &oracle_phi {
        if phi.nrows() != design_eff.x.nrows() {
            return Err(GibbsError::Dimension(format!(
                "oracle phi has {} rows, design has {}",
                phi.nrows(),
                design_eff.x.nrows()
            )));
        }
    }

    let update_latent = matches!(config.mode, FitMode::Full);
    let phi0 = match &config.mode {
        FitMode::Full => node_log_odds(nodes, 0.5)?,
        FitMode::FixedPhi { pseudocount } | FitMode::NoCovariates { pseudocount } => {
            node_log_odds(nodes, *pseudocount)?
        }
        FitMode::Oracle { phi_true } => phi_true.clone(),
    };

    let n = phi0.nrows();
    let q = phi0.ncols();
    let rank = effective.rank;
    let mut rng = RngStream::new(config.seed, stream).rng();
    let mut warnings = Vec::new();

    let (mut params, mut state) = initial_state(
        &effective,
        &phi0,
        &design_eff,
        if update_latent { Some(nodes) } else { None },
        update_latent,
        &mut rng,
    )?;

    let mut kappa = DMatrix::zeros(n, q);
    if uses_counts {
        for i in 0..n {
            for k in 0..q {
                kappa[(i, k)] =
                    nodes.y_left[(i, k)] as f64 - 0.5 * nodes.n_total[(i, k)] as f64;
            }
        }
    }
    let data = ChainData {
        nodes: if uses_counts { Some(nodes) } else { None },
        design: design_eff.clone(),
        kappa,
        update_latent,
    };

    let retained = (effective.iterations - effective.burn_in) / effective.thin;
    let mut draws = PosteriorDraws {
        params: Vec::with_capacity(retained),
        phi_mean: DMatrix::zeros(n, q),
        phi_sd: DMatrix::zeros(n, q),
        gamma_mean: DMatrix::zeros(n, rank),
        gamma_sd: DMatrix::zeros(n, rank),
        loglik_latent: DMatrix::zeros(retained, n),
        loglik_binomial: if uses_counts {
            DMatrix::zeros(retained, n)
        } else {
            DMatrix::zeros(0, 0)
        },
        config: effective.clone(),
        stream,
        config_hash: effective.config_hash(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        warnings: Vec::new(),
    };
    let mut phi_sq = DMatrix::zeros(n, q);
    let mut gamma_sq = DMatrix::zeros(n, rank);

    let mut scratch = SweepScratch::new(n, q, rank);
    for t in 1..=effective.iterations {
        gibbs_sweep(&mut params, &mut state, &data, &mut scratch, &mut warnings, &mut rng)?;
        check_finite(&params, &state, t)?;
        #[cfg(debug_assertions)]
        if t % 100 == 0 {
            assert!(
                nalgebra::Cholesky::new(params.sigma.clone()).is_some(),
                "sigma lost positive definiteness at sweep {t}"
            );
        }
        if t > effective.burn_in && (t - effective.burn_in) % effective.thin == 0 {
            let s = draws.params.len();
            if s >= retained {
                continue;
            }
            for i in 0..n {
                let x_i = design_eff.x.row(i).transpose();
                let phi_i = state.phi.row(i).transpose();
                draws.loglik_latent[(s, i)] =
                    latent_layer_loglik(&params, &x_i, &phi_i).map_err(GibbsError::Model)?;
                if uses_counts {
                    draws.loglik_binomial[(s, i)] =
                        binomial_loglik_row(nodes, &state.phi, i);
                }
            }
            draws.phi_mean += &state.phi;
            phi_sq += state.phi.component_mul(&state.phi);
            draws.gamma_mean += &state.gamma;
            gamma_sq += state.gamma.component_mul(&state.gamma);
            draws.params.push(params.clone());
        }
    }

    let m = draws.params.len().max(1) as f64;
    draws.phi_mean /= m;
    draws.gamma_mean /= m;
    for i in 0..n {
        for k in 0..q {
            let var = (phi_sq[(i, k)] / m - draws.phi_mean[(i, k)].powi(2)).max(0.0);
            draws.phi_sd[(i, k)] = var.sqrt();
        }
        for r in 0..rank {
            let var = (gamma_sq[(i, r)] / m - draws.gamma_mean[(i, r)].powi(2)).max(0.0);
            draws.gamma_sd[(i, r)] = var.sqrt();
        }
    }
    draws.warnings = warnings;
    Ok(draws)
}

/// Run `config.n_chains` chains in parallel on independent RNG streams.
pub fn run_chains(
    config: &FitConfig,
    nodes: &NodeCounts,
    design: &Design,
    tree: &PhyloTree,
) -> Result<Vec<PosteriorDraws>, GibbsError> {
    use rayon::prelude::*;
    (0..config.n_chains as u64)
        .into_par_iter()
        .map(|stream| run_chain(config, nodes, design, tree, stream))
        .collect()
}

#[cfg(test)]
mod tests;
