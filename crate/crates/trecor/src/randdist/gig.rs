//! Generalized inverse Gaussian sampler.
//!
//! Density `f(x) ~ x^{p-1} exp(-(a x + b/x)/2)` on `x > 0`. The interior case
//! `a > 0, b > 0` uses mode-shifted ratio-of-uniforms, which has a uniformly
//! bounded rejection rate over the whole parameter range; the boundary cases
//! reduce to gamma (`b = 0, p > 0`) and inverse gamma (`a = 0, p < 0`).

use rand::Rng;

use super::{draw_gamma, draw_inverse_gamma, DistError};

/// Relative widening of the ratio-of-uniforms box, so that root-finding noise
/// in the stationary points can never clip the acceptance region.
const BOX_INFLATE: f64 = 1.0 + 1e-10;

/// Draw from `GIG(p, a, b)`.
pub fn draw_gig<R: Rng + ?Sized>(p: f64, a: f64, b: f64, rng: &mut R) -> Result<f64, DistError> {
    if !p.is_finite() || !a.is_finite() || !b.is_finite() || a < 0.0 || b < 0.0 {
        return Err(DistError::Domain(format!(
            "gig requires finite p and a >= 0, b >= 0, got p {p}, a {a}, b {b}"
        )));
    }
    if a > 0.0 && b > 0.0 {
        if p < 0.0 {
            // X ~ GIG(p, a, b)  <=>  1/X ~ GIG(-p, b, a).
            return Ok(1.0 / draw_gig_positive(-p, b, a, rng));
        }
        return Ok(draw_gig_positive(p, a, b, rng));
    }
    if b == 0.0 && a > 0.0 {
        if p <= 0.0 {
            return Err(DistError::Domain(format!(
                "gig with b = 0 requires p > 0, got p {p}"
            )));
        }
        return draw_gamma(p, a / 2.0, rng);
    }
    if a == 0.0 && b > 0.0 {
        if p >= 0.0 {
            return Err(DistError::Domain(format!(
                "gig with a = 0 requires p < 0, got p {p}"
            )));
        }
        return draw_inverse_gamma(-p, b / 2.0, rng);
    }
    Err(DistError::Domain(
        "gig requires at least one of a, b strictly positive".into(),
    ))
}

/// Interior sampler for `p >= 0, a > 0, b > 0`: standardize to the
/// two-parameter form with `omega = sqrt(a b)` and rescale by `sqrt(b/a)`.
fn draw_gig_positive<R: Rng + ?Sized>(p: f64, a: f64, b: f64, rng: &mut R) -> f64 {
    let omega = (a * b).sqrt();
    let scale = (b / a).sqrt();
    scale * gig_rou(p, omega, rng)
}

/// Mode-shifted ratio-of-uniforms for `g(x) ~ x^{p-1} exp(-omega (x + 1/x)/2)`.
fn gig_rou<R: Rng + ?Sized>(p: f64, omega: f64, rng: &mut R) -> f64 {
    // Mode of g: positive root of omega x^2 - 2(p-1) x - omega = 0.
    let pm1 = p - 1.0;
    let m = (pm1 + (pm1 * pm1 + omega * omega).sqrt()) / omega;
    let lg = |x: f64| pm1 * x.ln() - 0.5 * omega * (x + 1.0 / x);
    let lgm = lg(m);
    // Stationary points of (x - m) sqrt(g(x)/g(m)) are the roots of
    //   x^3 - x^2 (2(p+1)/omega + m) + x (2(p-1) m/omega - 1) + m = 0
    // straddling the mode: f(0) = m > 0, f(m) = -4 m^2/omega < 0.
    let c2 = 2.0 * (p + 1.0) / omega + m;
    let c1 = 2.0 * pm1 * m / omega - 1.0;
    let c0 = m;
    let f = |x: f64| ((x - c2) * x + c1) * x + c0;
    let x_lo = bisect_root(&f, 0.0, m);
    let mut hi = 2.0 * m.max(1.0);
    while f(hi) <= 0.0 {
        hi *= 2.0;
    }
    let x_hi = bisect_root(&f, m, hi);
    let v_minus = (x_lo - m) * (0.5 * (lg(x_lo) - lgm)).exp() * BOX_INFLATE;
    let v_plus = (x_hi - m) * (0.5 * (lg(x_hi) - lgm)).exp() * BOX_INFLATE;
    loop {
        // u on (0, 1]; u+ = sqrt(g(m)/g(m)) = 1.
        let u = 1.0 - rng.random::<f64>();
        let v = v_minus + (v_plus - v_minus) * rng.random::<f64>();
        let x = m + v / u;
        if x > 0.0 && 2.0 * u.ln() <= lg(x) - lgm {
            return x;
        }
    }
}

/// Bisection for a sign change of `f` on `[lo, hi]` with `f(lo) > 0 > f(hi)`
/// or the reverse; only the sign of `f` is used, so cancellation in the cubic
/// costs accuracy no finer than the inflated box already absorbs.
fn bisect_root(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let (mut lo, mut hi) = (lo, hi);
    let rising = f(lo) < 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let positive = f(mid) > 0.0;
        if positive != rising {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
