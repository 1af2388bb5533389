//! Random-number plumbing and the samplers the Gibbs engine is built on.
//!
//! Everything here draws from an explicit `&mut` RNG so that a fit is a pure
//! function of `(data, config, seed)`. The workhorse samplers are multivariate
//! normal draws in covariance or precision form, matrix-normal draws for the
//! coefficient blocks, Polya-Gamma draws for the binomial augmentation, and
//! generalized-inverse-Gaussian draws for the graphical-LASSO column blocks.

mod gig;
mod polya_gamma;

pub use gig::draw_gig;
pub use polya_gamma::{draw_polya_gamma, draw_polya_gamma_with, pg_mean, pg_var, PG_EXACT_LIMIT};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use thiserror::Error;

/// Errors from the samplers in this module.
#[derive(Debug, Error)]
pub enum DistError {
    /// A matrix that must be positive definite failed its Cholesky
    /// factorization even after a single jitter retry. `pivot` is the first
    /// nonpositive pivot encountered (the smallest seen before failure) and
    /// `index` is its position on the diagonal.
    #[error("matrix is not positive definite: pivot {pivot:.6e} at diagonal index {index}")]
    NotPositiveDefinite { pivot: f64, index: usize },
    /// A scalar parameter was outside the distribution's domain.
    #[error("parameter out of domain: {0}")]
    Domain(String),
}

/// Relative jitter used for the single Cholesky retry: `1e-8 * trace / q`
/// added to every diagonal entry.
pub const CHOL_JITTER_REL: f64 = 1e-8;

/// Reproducible RNG handle: a base seed plus a stream id, mapped onto
/// ChaCha8's independent stream mechanism. Distinct stream ids give
/// non-overlapping sequences for the same seed, which is how parallel
/// replicates stay both independent and reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// Instantiate the generator for this (seed, stream) pair.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// Cholesky of a symmetric positive-definite matrix with one jitter retry.
///
/// If the initial factorization fails, `1e-8 * trace/q` is added to the
/// diagonal and the factorization is attempted once more; a second failure is
/// reported as `NotPositiveDefinite` with the offending pivot of the
/// unjittered matrix.
pub fn cholesky_pd(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>, DistError> {
    debug_assert_eq!(m.nrows(), m.ncols());
    if let Some(ch) = Cholesky::new(m.clone()) {
        return Ok(ch);
    }
    let q = m.nrows().max(1);
    let jitter = CHOL_JITTER_REL * m.trace() / q as f64;
    let mut mj = m.clone();
    for i in 0..m.nrows() {
        mj[(i, i)] += jitter;
    }
    Cholesky::new(mj).ok_or_else(|| {
        let (pivot, index) = failing_pivot(m);
        DistError::NotPositiveDefinite { pivot, index }
    })
}

/// Locate the first nonpositive pivot of a naive Cholesky pass, for error
/// reporting only. Returns the pivot value before the square root.
fn failing_pivot(m: &DMatrix<f64>) -> (f64, usize) {
    let n = m.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    let mut min_pivot = f64::INFINITY;
    let mut min_index = 0;
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < min_pivot {
            min_pivot = d;
            min_index = j;
        }
        if d <= 0.0 {
            return (d, j);
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / dj;
        }
    }
    (min_pivot, min_index)
}

/// Log-determinant of the factored matrix: `2 * sum(ln L_ii)`.
pub fn cholesky_logdet(ch: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Which parameterization the second argument of [`draw_mvn`] is in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MvnForm {
    /// The matrix is the covariance of the draw.
    Covariance,
    /// The matrix is the precision (inverse covariance) of the draw.
    Precision,
}

/// Draw one vector from `N(mean, M)` or `N(mean, M^{-1})` depending on `form`.
pub fn draw_mvn<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    m: &DMatrix<f64>,
    form: MvnForm,
    rng: &mut R,
) -> Result<DVector<f64>, DistError> {
    let ch = cholesky_pd(m)?;
    Ok(draw_mvn_factored(mean, &ch, form, rng))
}

/// Same as [`draw_mvn`] but reusing an existing Cholesky factor.
pub fn draw_mvn_factored<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    ch: &Cholesky<f64, Dyn>,
    form: MvnForm,
    rng: &mut R,
) -> DVector<f64> {
    let n = mean.len();
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    match form {
        // x = mean + L z has covariance L L' = M.
        MvnForm::Covariance => mean + ch.l_dirty().lower_triangle() * z,
        // Solve L' x0 = z: x0 has covariance L^{-T} L^{-1} = M^{-1}.
        MvnForm::Precision => {
            let l = ch.l_dirty().lower_triangle();
            let x0 = l
                .tr_solve_lower_triangular(&z)
                .expect("cholesky factor has nonzero diagonal");
            mean + x0
        }
    }
}

/// Draw one `q x d` matrix from the matrix-normal distribution
/// `MN(mean, row_cov, col_cov)`, i.e. `vec(X) ~ N(vec(mean), col_cov (x) row_cov)`.
pub fn draw_matrix_normal<R: Rng + ?Sized>(
    mean: &DMatrix<f64>,
    row_cov: &DMatrix<f64>,
    col_cov: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>, DistError> {
    if mean.nrows() != row_cov.nrows() || mean.ncols() != col_cov.nrows() {
        return Err(DistError::Domain(format!(
            "matrix normal shape mismatch: mean {}x{}, row_cov {}, col_cov {}",
            mean.nrows(),
            mean.ncols(),
            row_cov.nrows(),
            col_cov.nrows()
        )));
    }
    let lr = cholesky_pd(row_cov)?;
    let lc = cholesky_pd(col_cov)?;
    let z = DMatrix::from_fn(mean.nrows(), mean.ncols(), |_, _| {
        rng.sample::<f64, _>(StandardNormal)
    });
    // X = M + L_r Z L_c'.
    Ok(mean + lr.l_dirty().lower_triangle() * z * lc.l_dirty().lower_triangle().transpose())
}

/// Matrix-normal draw with the column structure given as a *precision*
/// factor: `col_prec = L L'` with `l_colprec` the lower factor. The draw has
/// column covariance `col_prec^{-1}`. Row covariance is given by its lower
/// Cholesky factor `l_rowcov`. This is the form the coefficient-block Gibbs
/// updates produce naturally.
pub fn draw_matrix_normal_col_prec<R: Rng + ?Sized>(
    mean: &DMatrix<f64>,
    l_rowcov: &DMatrix<f64>,
    l_colprec: &DMatrix<f64>,
    rng: &mut R,
) -> DMatrix<f64> {
    let z = DMatrix::from_fn(mean.nrows(), mean.ncols(), |_, _| {
        rng.sample::<f64, _>(StandardNormal)
    });
    // Want X = M + L_r Z C' with C C' = (L L')^{-1}, so C' = L^{-1} and
    // Z C' = Z L^{-1}, computed by solving L' Y' = Z' for Y'.
    let yt = l_colprec
        .tr_solve_lower_triangular(&z.transpose())
        .expect("cholesky factor has nonzero diagonal");
    mean + l_rowcov * yt.transpose()
}

/// Gamma draw parameterized by shape and *rate* (density `x^{a-1} e^{-rate x}`).
pub fn draw_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64, DistError> {
    if !(shape > 0.0) || !(rate > 0.0) {
        return Err(DistError::Domain(format!(
            "gamma requires shape > 0 and rate > 0, got shape {shape}, rate {rate}"
        )));
    }
    let g = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| DistError::Domain(format!("gamma({shape}, rate {rate}): {e}")))?;
    Ok(g.sample(rng))
}

/// Inverse-gamma draw parameterized by shape and scale
/// (density `x^{-a-1} e^{-scale/x}`; mean `scale/(shape-1)` for shape > 1).
pub fn draw_inverse_gamma<R: Rng + ?Sized>(
    shape: f64,
    scale: f64,
    rng: &mut R,
) -> Result<f64, DistError> {
    if !(shape > 0.0) || !(scale > 0.0) {
        return Err(DistError::Domain(format!(
            "inverse gamma requires shape > 0 and scale > 0, got shape {shape}, scale {scale}"
        )));
    }
    // If G ~ Gamma(shape, rate scale) then 1/G ~ InvGamma(shape, scale).
    Ok(1.0 / draw_gamma(shape, scale, rng)?.max(f64::MIN_POSITIVE))
}

/// Inverse-Gaussian draw by the Michael-Schucany-Haas transform.
///
/// `mean` is the distribution mean and `shape` the usual lambda parameter;
/// the density is `sqrt(shape/(2 pi x^3)) exp(-shape (x-mean)^2 / (2 mean^2 x))`.
pub fn draw_inverse_gaussian<R: Rng + ?Sized>(
    mean: f64,
    shape: f64,
    rng: &mut R,
) -> Result<f64, DistError> {
    if !(mean > 0.0) || !(shape > 0.0) {
        return Err(DistError::Domain(format!(
            "inverse gaussian requires mean > 0 and shape > 0, got mean {mean}, shape {shape}"
        )));
    }
    let nu: f64 = rng.sample(StandardNormal);
    let y = nu * nu;
    // Larger root of the defining quadratic is cancellation-free; the smaller
    // root is mean^2 / x_plus.
    let x_plus = mean + mean * mean * y / (2.0 * shape)
        + (mean / (2.0 * shape)) * (4.0 * mean * shape * y + mean * mean * y * y).sqrt();
    let x_minus = mean * mean / x_plus;
    let u: f64 = rng.random();
    if u <= mean / (mean + x_minus) {
        Ok(x_minus)
    } else {
        Ok(x_plus)
    }
}
