//! Polya-Gamma sampler.
//!
//! `PG(b, c)` draws power the binomial data augmentation: conditional on the
//! latent log-odds, each augmented variable is `PG(N, phi)`. Integer shapes up
//! to [`PG_EXACT_LIMIT`] use the exact alternating-series rejection sampler
//! for `PG(1, c)` summed `b` times; larger shapes use a moment-matched normal
//! truncated to the positive axis, which is accurate because `PG(b, c)` is a
//! sum of `b` iid terms.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use statrs::function::erf::erfc;

use super::DistError;

/// Largest shape drawn exactly as a sum of `PG(1, c)` variables.
pub const PG_EXACT_LIMIT: u64 = 200;

/// Crossover point of the two series expansions of the `PG(1, 0)` density.
const T_BOUNDARY: f64 = 0.64;

/// Mean of `PG(b, c)`: `b/(2c) tanh(c/2)`, continuous at `c = 0` where it is
/// `b/4`.
pub fn pg_mean(b: f64, c: f64) -> f64 {
    let c = c.abs();
    if c < 1e-4 {
        // tanh(c/2)/(2c) = 1/4 - c^2/48 + O(c^4)
        b * (0.25 - c * c / 48.0)
    } else {
        b / (2.0 * c) * (c / 2.0).tanh()
    }
}

/// Variance of `PG(b, c)`: `b (sinh(c) - c) / (4 c^3 cosh^2(c/2))`,
/// continuous at `c = 0` where it is `b/24`.
pub fn pg_var(b: f64, c: f64) -> f64 {
    let c = c.abs();
    if c < 1e-3 {
        // (sinh c - c) sech^2(c/2) / (4c^3) = 1/24 - c^2/120 + O(c^4)
        b * (1.0 / 24.0 - c * c / 120.0)
    } else if c > 500.0 {
        // sinh(c) sech^2(c/2) -> 2 as c -> inf; avoids overflow of sinh.
        b / (2.0 * c * c * c)
    } else {
        let sech = 1.0 / (c / 2.0).cosh();
        b * (c.sinh() - c) * sech * sech / (4.0 * c * c * c)
    }
}

/// Draw from `PG(b, c)` with the default exact-shape limit.
pub fn draw_polya_gamma<R: Rng + ?Sized>(b: u64, c: f64, rng: &mut R) -> Result<f64, DistError> {
    draw_polya_gamma_with(b, c, PG_EXACT_LIMIT, rng)
}

/// Draw from `PG(b, c)`, summing exact `PG(1, c)` draws while `b <= b_exact`
/// and switching to the truncated moment-matched normal above that.
pub fn draw_polya_gamma_with<R: Rng + ?Sized>(
    b: u64,
    c: f64,
    b_exact: u64,
    rng: &mut R,
) -> Result<f64, DistError> {
    if !c.is_finite() {
        return Err(DistError::Domain(format!("polya gamma tilt must be finite, got {c}")));
    }
    if b == 0 {
        return Ok(0.0);
    }
    if b <= b_exact {
        let mut acc = 0.0;
        for _ in 0..b {
            acc += pg1_devroye(c, rng);
        }
        Ok(acc)
    } else {
        let m = pg_mean(b as f64, c);
        let sd = pg_var(b as f64, c).sqrt();
        // PG mass sits many standard deviations above zero at large b, so the
        // truncation loop almost never iterates more than once.
        for _ in 0..100 {
            let x = m + sd * rng.sample::<f64, _>(StandardNormal);
            if x > 0.0 {
                return Ok(x);
            }
        }
        Ok(m)
    }
}

/// Exact `PG(1, c)` via alternating-series rejection on the tilted
/// Jacobi-theta density, returning `X/4` in PG units.
fn pg1_devroye<R: Rng + ?Sized>(c: f64, rng: &mut R) -> f64 {
    let z = c.abs() / 2.0;
    let k = PI * PI / 8.0 + z * z / 2.0;
    // Mixture masses of the two proposal pieces: truncated exponential on
    // (t, inf) and truncated inverse-Gaussian on (0, t].
    let p = (PI / (2.0 * k)) * (-k * T_BOUNDARY).exp();
    let q = 2.0 * (-z).exp() * inverse_gaussian_cdf_unit(T_BOUNDARY, z);
    loop {
        let u: f64 = rng.random();
        let x = if u < p / (p + q) {
            T_BOUNDARY + rng.sample::<f64, _>(Exp1) / k
        } else {
            truncated_inverse_gaussian(z, rng)
        };
        // Squeeze on the alternating partial sums: odd terms bound from
        // below (accept), even terms from above (reject and restart).
        let mut s = piece_coef(0, x);
        let y = rng.random::<f64>() * s;
        let mut n = 0usize;
        loop {
            n += 1;
            if n % 2 == 1 {
                s -= piece_coef(n, x);
                if y <= s {
                    return x / 4.0;
                }
            } else {
                s += piece_coef(n, x);
                if y > s {
                    break;
                }
            }
            // The series terms decay doubly exponentially; reaching this many
            // terms means y is pinned on a partial sum to machine precision.
            if n > 1000 {
                return x / 4.0;
            }
        }
    }
}

/// `a_n(x)`: series coefficients of the Jacobi-theta density, with the
/// left/right expansion switched at the boundary `t`.
fn piece_coef(n: usize, x: f64) -> f64 {
    let h = n as f64 + 0.5;
    if x <= T_BOUNDARY {
        PI * h * (2.0 / (PI * x)).powf(1.5) * (-2.0 * h * h / x).exp()
    } else {
        PI * h * (-h * h * PI * PI * x / 2.0).exp()
    }
}

/// Standard normal CDF.
fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// CDF at `t` of the inverse Gaussian with mean `1/z` and shape 1. The
/// `z -> 0` limit (mean -> inf) is `2 Phi(-1/sqrt(t))`, and the
/// `exp(2z) Phi(.)` term is computed in log space to dodge overflow times
/// underflow at large `z`.
fn inverse_gaussian_cdf_unit(t: f64, z: f64) -> f64 {
    let rt = t.sqrt();
    if z < 1e-12 {
        return 2.0 * normal_cdf(-1.0 / rt);
    }
    let w1 = (t * z - 1.0) / rt;
    let w2 = (t * z + 1.0) / rt;
    let first = normal_cdf(w1);
    let log_second = 2.0 * z + log_normal_cdf_neg(w2);
    first + log_second.exp()
}

/// `ln Phi(-w)` for `w > 0`, switching to the asymptotic expansion where
/// `erfc` underflows.
fn log_normal_cdf_neg(w: f64) -> f64 {
    if w < 36.0 {
        (0.5 * erfc(w / std::f64::consts::SQRT_2)).ln()
    } else {
        // Phi(-w) ~ phi(w)/w for large w.
        -0.5 * w * w - (w * (2.0 * PI).sqrt()).ln()
    }
}

/// Inverse Gaussian with mean `1/z`, shape 1, truncated to `(0, t]`.
fn truncated_inverse_gaussian<R: Rng + ?Sized>(z: f64, rng: &mut R) -> f64 {
    let t = T_BOUNDARY;
    if z < 1.0 / t {
        // Mean exceeds t: rejection from the one-sided stable law restricted
        // to (0, t], tilted by exp(-z^2 x / 2).
        loop {
            let x = loop {
                let e1: f64 = rng.sample(Exp1);
                let e2: f64 = rng.sample(Exp1);
                if e1 * e1 <= 2.0 * e2 / t {
                    break t / ((1.0 + t * e1) * (1.0 + t * e1));
                }
            };
            if rng.random::<f64>() <= (-z * z * x / 2.0).exp() {
                return x;
            }
        }
    } else {
        // Mean below t: plain inverse-Gaussian draws accepted once inside.
        let mean = 1.0 / z;
        loop {
            let nu: f64 = rng.sample(StandardNormal);
            let y = nu * nu;
            let x_plus =
                mean + mean * mean * y / 2.0 + (mean / 2.0) * (4.0 * mean * y + mean * mean * y * y).sqrt();
            let x_minus = mean * mean / x_plus;
            let u: f64 = rng.random();
            let x = if u <= mean / (mean + x_minus) { x_minus } else { x_plus };
            if x <= t {
                return x;
            }
        }
    }
}
