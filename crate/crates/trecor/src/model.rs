//! Parameter state, the covariance function, prior densities, and the
//! rotation-invariant effect summaries.
//!
//! The sampled-node balances follow
//! `phi_i ~ N_q(B_0 x_i, Sigma + sum_r (B_r x_i)(B_r x_i)')`. Only the
//! Frobenius norm of the stacked per-covariate columns `B^(j)` is identified
//! (the {B_r} can be rotated jointly without changing the covariance), so
//! effect reporting works through [`covariate_cov_effect`] and
//! [`covariate_mean_effect`] rather than raw coefficients.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::randdist::{cholesky_logdet, DistError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid parameter state: {0}")]
    Invalid(String),
    #[error(transparent)]
    Dist(#[from] DistError),
}

/// Fixed hyperparameters of the prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    /// Gamma shape for the global shrinkage rate `lambda`.
    pub v: f64,
    /// Gamma rate for `lambda`.
    pub s: f64,
    /// Inverse-gamma shape for the covariance-coefficient column scales `nu`.
    pub a_nu: f64,
    /// Inverse-gamma scale for `nu`.
    pub b_nu: f64,
    /// Inverse-gamma shape for the mean-coefficient column scales `omega`.
    pub a_omega: f64,
    /// Inverse-gamma scale for `omega`.
    pub b_omega: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            v: 1.0,
            s: 0.01,
            a_nu: 5.0,
            b_nu: 0.5,
            a_omega: 5.0,
            b_omega: 0.5,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [
            ("v", self.v),
            ("s", self.s),
            ("a_nu", self.a_nu),
            ("b_nu", self.b_nu),
            ("a_omega", self.a_omega),
            ("b_omega", self.b_omega),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(ModelError::Invalid(format!("hyperparameter {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Full parameter state of the model. A value object: the sampler emits a
/// fresh snapshot per sweep and never mutates a published one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Baseline covariance, `q x q` symmetric positive definite.
    pub sigma: DMatrix<f64>,
    /// Coefficient matrices, each `q x d`; index 0 holds the mean
    /// coefficients `B_0`, indices `1..=R` the covariance factors.
    pub b: Vec<DMatrix<f64>>,
    /// Off-diagonal scale-mixture variances of the graphical-LASSO prior,
    /// `q x q` symmetric with positive off-diagonals; the diagonal is unused
    /// and kept at zero.
    pub tau: DMatrix<f64>,
    /// Global shrinkage rate of the graphical-LASSO prior.
    pub lambda: f64,
    /// Column variances of the `B_r` prior (diagonal of `D_nu`), length `d`.
    pub nu: DVector<f64>,
    /// Column variances of the `B_0` prior (diagonal of `D_omega`), length `d`.
    pub omega: DVector<f64>,
    pub hyper: Hyper,
}

impl ModelParams {
    pub fn q(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn d(&self) -> usize {
        self.nu.len()
    }

    /// Number of covariance factors `R` (excludes the mean block).
    pub fn rank(&self) -> usize {
        self.b.len() - 1
    }

    /// Structural validation: shapes, symmetry, positivity. PD of `sigma` is
    /// defined by Cholesky success and checked where it matters (density
    /// evaluations), not here.
    pub fn validate(&self) -> Result<(), ModelError> {
        let (q, d) = (self.q(), self.d());
        if self.sigma.ncols() != q {
            return Err(ModelError::Dimension("sigma must be square".into()));
        }
        if self.b.is_empty() {
            return Err(ModelError::Invalid("b must contain at least B_0".into()));
        }
        for (r, b) in self.b.iter().enumerate() {
            if b.nrows() != q || b.ncols() != d {
                return Err(ModelError::Dimension(format!(
                    "B_{r} is {}x{}, expected {q}x{d}",
                    b.nrows(),
                    b.ncols()
                )));
            }
        }
        if self.tau.nrows() != q || self.tau.ncols() != q {
            return Err(ModelError::Dimension("tau must be q x q".into()));
        }
        for i in 0..q {
            for j in 0..q {
                if (self.sigma[(i, j)] - self.sigma[(j, i)]).abs() > 1e-9 * (1.0 + self.sigma[(i, j)].abs()) {
                    return Err(ModelError::Invalid(format!("sigma not symmetric at ({i},{j})")));
                }
                if i != j {
                    if (self.tau[(i, j)] - self.tau[(j, i)]) != 0.0 {
                        return Err(ModelError::Invalid(format!("tau not symmetric at ({i},{j})")));
                    }
                    if !(self.tau[(i, j)] > 0.0) {
                        return Err(ModelError::Invalid(format!("tau must be positive off-diagonal at ({i},{j})")));
                    }
                }
            }
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(ModelError::Invalid(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.omega.len() != d {
            return Err(ModelError::Dimension("omega length must equal d".into()));
        }
        if self.nu.iter().chain(self.omega.iter()).any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(ModelError::Invalid("nu and omega must be positive".into()));
        }
        self.hyper.validate()
    }
}

/// Latent chain state: node balances, covariance factors, and Polya-Gamma
/// auxiliaries. Immutable snapshot like [`ModelParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    /// `n x q` latent Gaussian balances.
    pub phi: DMatrix<f64>,
    /// `n x R` factor scores.
    pub gamma: DMatrix<f64>,
    /// `n x q` Polya-Gamma auxiliaries; zero exactly where the clade total
    /// `N_ij` is zero.
    pub g: DMatrix<f64>,
}

impl LatentState {
    pub fn validate(&self, n: usize, q: usize, rank: usize) -> Result<(), ModelError> {
        if self.phi.nrows() != n || self.phi.ncols() != q {
            return Err(ModelError::Dimension(format!(
                "phi is {}x{}, expected {n}x{q}",
                self.phi.nrows(),
                self.phi.ncols()
            )));
        }
        if self.gamma.nrows() != n || self.gamma.ncols() != rank {
            return Err(ModelError::Dimension(format!(
                "gamma is {}x{}, expected {n}x{rank}",
                self.gamma.nrows(),
                self.gamma.ncols()
            )));
        }
        if self.g.nrows() != n || self.g.ncols() != q {
            return Err(ModelError::Dimension(format!(
                "g is {}x{}, expected {n}x{q}",
                self.g.nrows(),
                self.g.ncols()
            )));
        }
        if self.g.iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(ModelError::Invalid("g must be nonnegative and finite".into()));
        }
        Ok(())
    }
}

/// Covariate design. Column 0 is the intercept when `has_intercept` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub x: DMatrix<f64>,
    pub covariate_names: Vec<String>,
    pub has_intercept: bool,
}

impl Design {
    pub fn new(x: DMatrix<f64>, covariate_names: Vec<String>, has_intercept: bool) -> Result<Self, ModelError> {
        if x.ncols() != covariate_names.len() {
            return Err(ModelError::Dimension(format!(
                "design has {} columns but {} names",
                x.ncols(),
                covariate_names.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Invalid("design entries must be finite".into()));
        }
        if has_intercept {
            if x.ncols() == 0 {
                return Err(ModelError::Invalid("intercept declared on empty design".into()));
            }
            if (0..x.nrows()).any(|i| x[(i, 0)] != 1.0) {
                return Err(ModelError::Invalid("intercept column must be all ones".into()));
            }
        }
        Ok(Design {
            x,
            covariate_names,
            has_intercept,
        })
    }

    /// All-ones single-column design for intercept-only fits.
    pub fn intercept_only(n: usize) -> Self {
        Design {
            x: DMatrix::from_element(n, 1, 1.0),
            covariate_names: vec!["intercept".to_string()],
            has_intercept: true,
        }
    }

    /// Re-run the construction checks (useful after deserialization).
    pub fn validate(&self) -> Result<(), ModelError> {
        Design::new(
            self.x.clone(),
            self.covariate_names.clone(),
            self.has_intercept,
        )
        .map(|_| ())
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    /// Column index of the intercept, if the design declares one.
    pub fn intercept_index(&self) -> Option<usize> {
        self.has_intercept.then_some(0)
    }

    /// Covariate vector of sample `i` as a column.
    pub fn row(&self, i: usize) -> DVector<f64> {
        self.x.row(i).transpose()
    }
}

/// Covariance of the balances at covariate value `x`:
/// `Sigma + sum_{r>=1} (B_r x)(B_r x)'`.
pub fn covariance_at(params: &ModelParams, x: &DVector<f64>) -> DMatrix<f64> {
    let mut cov = params.sigma.clone();
    for b_r in &params.b[1..] {
        let v = b_r * x;
        cov.syger(1.0, &v, &v, 1.0);
    }
    // syger fills one triangle; reflect for an exactly symmetric result.
    for i in 0..cov.nrows() {
        for j in 0..i {
            cov[(j, i)] = cov[(i, j)];
        }
    }
    cov
}

/// Covariance effect of covariate `j` (0-based): `||B^(j)||_F` where
/// `B^(j)` stacks column `j` of each `B_r`, `r >= 1`. Invariant to joint
/// rotation of the factors, which is exactly the identified quantity.
pub fn covariate_cov_effect(params: &ModelParams, j: usize) -> f64 {
    params.b[1..]
        .iter()
        .map(|b_r| b_r.column(j).norm_squared())
        .sum::<f64>()
        .sqrt()
}

/// Mean effect of covariate `j` (0-based): `||b_{j0}||_2^2`, the squared
/// norm of column `j` of `B_0`. Squared by convention, unlike the unsquared
/// Frobenius norm used for the covariance effect.
pub fn covariate_mean_effect(params: &ModelParams, j: usize) -> f64 {
    params.b[0].column(j).norm_squared()
}

/// Log density of `N_q(B_0 x, covariance_at(params, x))` at `phi`, via
/// Cholesky (no explicit inverse).
pub fn latent_layer_loglik(
    params: &ModelParams,
    x: &DVector<f64>,
    phi: &DVector<f64>,
) -> Result<f64, ModelError> {
    let q = params.q();
    if phi.len() != q || x.len() != params.d() {
        return Err(ModelError::Dimension(format!(
            "latent_layer_loglik: phi len {}, x len {}, expected q = {q}, d = {}",
            phi.len(),
            x.len(),
            params.d()
        )));
    }
    let cov = covariance_at(params, x);
    let ch = crate::randdist::cholesky_pd(&cov)?;
    let resid = phi - &params.b[0] * x;
    let half = ch
        .l_dirty()
        .solve_lower_triangular(&resid)
        .expect("cholesky factor has nonzero diagonal");
    Ok(-0.5 * (q as f64 * (2.0 * std::f64::consts::PI).ln() + cholesky_logdet(&ch) + half.norm_squared()))
}

/// Additive decomposition of [`prior_logdensity`], for term-level testing
/// and diagnostics. All values are log densities; `C_tau`, the joint
/// normalizer of the (Sigma, tau) pair, is omitted throughout because every
/// use in the sampler cancels it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorTerms {
    /// Normal terms on off-diagonal `sigma_ij` with variances `tau_ij`.
    pub sigma_off_diagonal: f64,
    /// Exponential(rate lambda/2) terms on the diagonal of Sigma.
    pub sigma_diagonal: f64,
    /// Exponential(rate lambda^2/2) terms on the off-diagonal scales `tau`.
    pub tau_scales: f64,
    /// Gamma(v, rate s) term on lambda.
    pub lambda_rate: f64,
    /// Matrix-normal `MN(0, Sigma, D_nu)` terms, summed over `B_r`, `r >= 1`.
    pub factor_coefficients: f64,
    /// Matrix-normal `MN(0, Sigma, D_omega)` term for `B_0`.
    pub mean_coefficients: f64,
    /// Inverse-gamma terms on `nu`.
    pub nu_scales: f64,
    /// Inverse-gamma terms on `omega`.
    pub omega_scales: f64,
}

impl PriorTerms {
    pub fn total(&self) -> f64 {
        self.sigma_off_diagonal
            + self.sigma_diagonal
            + self.tau_scales
            + self.lambda_rate
            + self.factor_coefficients
            + self.mean_coefficients
            + self.nu_scales
            + self.omega_scales
    }
}

/// Per-term log prior density. Returns `None` when Sigma fails its Cholesky,
/// which is the PD indicator of the prior.
pub fn prior_terms(params: &ModelParams) -> Option<PriorTerms> {
    let (q, d) = (params.q(), params.d());
    let ch = Cholesky::new(params.sigma.clone())?;
    let logdet_sigma = cholesky_logdet(&ch);
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let lambda = params.lambda;

    let mut sigma_off_diagonal = 0.0;
    let mut tau_scales = 0.0;
    for i in 0..q {
        for j in (i + 1)..q {
            let (sij, tij) = (params.sigma[(i, j)], params.tau[(i, j)]);
            sigma_off_diagonal += -0.5 * sij * sij / tij - 0.5 * (2.0 * std::f64::consts::PI * tij).ln();
            tau_scales += (lambda * lambda / 2.0).ln() - lambda * lambda / 2.0 * tij;
        }
    }
    let sigma_diagonal = (0..q)
        .map(|i| (lambda / 2.0).ln() - lambda / 2.0 * params.sigma[(i, i)])
        .sum();

    let h = &params.hyper;
    let lambda_rate =
        h.v * h.s.ln() - ln_gamma(h.v) + (h.v - 1.0) * lambda.ln() - h.s * lambda;

    // MN(B | 0, Sigma, D): -(qd/2) ln 2pi - (d/2) ln|Sigma| - (q/2) ln|D|
    //                      - tr(D^{-1} B' Sigma^{-1} B)/2.
    let mn_term = |b: &DMatrix<f64>, col_var: &DVector<f64>| -> f64 {
        let half = ch
            .l_dirty()
            .solve_lower_triangular(b)
            .expect("cholesky factor has nonzero diagonal");
        let mut trace = 0.0;
        let mut logdet_d = 0.0;
        for j in 0..d {
            trace += half.column(j).norm_squared() / col_var[j];
            logdet_d += col_var[j].ln();
        }
        -0.5 * (q * d) as f64 * ln2pi - 0.5 * d as f64 * logdet_sigma - 0.5 * q as f64 * logdet_d
            - 0.5 * trace
    };
    let factor_coefficients = params.b[1..].iter().map(|b_r| mn_term(b_r, &params.nu)).sum();
    let mean_coefficients = mn_term(&params.b[0], &params.omega);

    let ig_term = |x: f64, shape: f64, scale: f64| -> f64 {
        shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - scale / x
    };
    let nu_scales = params.nu.iter().map(|&x| ig_term(x, h.a_nu, h.b_nu)).sum();
    let omega_scales = params.omega.iter().map(|&x| ig_term(x, h.a_omega, h.b_omega)).sum();

    Some(PriorTerms {
        sigma_off_diagonal,
        sigma_diagonal,
        tau_scales,
        lambda_rate,
        factor_coefficients,
        mean_coefficients,
        nu_scales,
        omega_scales,
    })
}

/// Joint log prior density of the parameter state, up to the `C_tau`
/// normalizer. `-inf` when Sigma is not positive definite.
pub fn prior_logdensity(params: &ModelParams) -> f64 {
    prior_terms(params).map_or(f64::NEG_INFINITY, |t| t.total())
}

fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}
