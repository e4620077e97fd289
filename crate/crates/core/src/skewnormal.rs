//! Standard skew-normal distribution: density, CDF through Owen's T, and
//! quantiles by bisection.
//!
//! Standard means location 0 and scale 1; the density is
//! `2·φ(z)·Φ(a·z)` for shape `a`.

/// Absolute tolerance of [`quantile`].
pub const QUANTILE_TOL: f64 = 1e-12;

/// Standard normal CDF `Φ`.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal density `φ`.
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Shape `a` from a bounded skewness knob `δ ∈ (-1, 1)`: `a = δ/√(1-δ²)`.
pub fn shape_from_skew(delta: f64) -> f64 {
    delta / (1.0 - delta * delta).sqrt()
}

pub fn pdf(z: f64, shape: f64) -> f64 {
    2.0 * normal_pdf(z) * normal_cdf(shape * z)
}

pub fn cdf(z: f64, shape: f64) -> f64 {
    if z == f64::INFINITY {
        return 1.0;
    }
    if z == f64::NEG_INFINITY {
        return 0.0;
    }
    (normal_cdf(z) - 2.0 * owens_t(z, shape)).clamp(0.0, 1.0)
}

/// Owen's T function `T(h, a) = (1/2π)∫₀ᵃ exp(-h²(1+x²)/2)/(1+x²) dx`.
///
/// Evaluated in the angular form `(1/2π)∫₀^{atan a} exp(-h²/(2cos²θ)) dθ`,
/// whose integrand is smooth and bounded for every `a`.
pub fn owens_t(h: f64, a: f64) -> f64 {
    if a == 0.0 {
        return 0.0;
    }
    let half_h2 = 0.5 * h * h;
    let f = |theta: f64| {
        let c = theta.cos();
        if c <= 0.0 {
            0.0
        } else {
            (-half_h2 / (c * c)).exp()
        }
    };
    let upper = a.atan();
    adaptive_simpson(&f, 0.0, upper, 1e-15, 50) / (2.0 * std::f64::consts::PI)
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fm, fb, whole, tol, depth)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
}

/// Level-`gamma` quantile of the standard skew-normal, by bisection on [`cdf`].
pub fn quantile(gamma: f64, shape: f64) -> f64 {
    assert!(gamma > 0.0 && gamma < 1.0, "level {gamma} outside (0, 1)");
    let (mut lo, mut hi) = (-1.0, 1.0);
    while cdf(lo, shape) > gamma {
        lo *= 2.0;
    }
    while cdf(hi, shape) < gamma {
        hi *= 2.0;
    }
    for _ in 0..200 {
        if hi - lo <= QUANTILE_TOL {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if cdf(mid, shape) < gamma {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
