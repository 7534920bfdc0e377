//! Small quadrature helpers for radial integrals.

/// Composite Simpson rule with `panels` (rounded up to even) subintervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let n = (panels.max(2) + 1) & !1;
    let step = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + k as f64 * step);
    }
    acc * step / 3.0
}

/// Integral over `t in [0, inf)` of a nonnegative integrand that decays at
/// least geometrically in unit chunks, or `None` when the chunk masses stop
/// decaying (divergence).
pub fn half_line(g: impl Fn(f64) -> f64) -> Option<f64> {
    const MAX_CHUNKS: usize = 200_000;
    let mut total = 0.0;
    let mut prev = f64::NAN;
    for k in 0..MAX_CHUNKS {
        let t0 = k as f64;
        let chunk = simpson(&g, t0, t0 + 1.0, 256);
        if !chunk.is_finite() {
            return None;
        }
        total += chunk;
        if chunk == 0.0 {
            return Some(total);
        }
        if k >= 8 {
            let ratio = chunk / prev;
            if ratio >= 1.0 - 1e-9 {
                return None;
            }
            let remainder = chunk * ratio / (1.0 - ratio);
            if remainder <= 1e-15 * total {
                return Some(total + remainder);
            }
        }
        prev = chunk;
    }
    None
}

/// `int_0^r s / phi(s) ds` via `s = r e^{-t}`; `None` if it diverges.
pub fn core_integral(phi: impl Fn(f64) -> f64, r: f64) -> Option<f64> {
    half_line(|t| {
        let s = r * (-t).exp();
        s * s / phi(s)
    })
}

/// `int_r^inf ds / (s phi(s))` via `s = r e^{t}`; `None` if it diverges.
pub fn tail_integral(phi: impl Fn(f64) -> f64, r: f64) -> Option<f64> {
    half_line(|t| 1.0 / phi(r * t.exp()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_is_exact_for_cubics() {
        let v = simpson(|x| x * x * x - x, 0.0, 2.0, 2);
        assert!((v - 2.0).abs() < 1e-14);
    }

    #[test]
    fn power_integrals_match_closed_forms() {
        let alpha: f64 = 0.4;
        let phi = |s: f64| s.powf(2.0 * alpha);
        let core = core_integral(phi, 0.3).unwrap();
        let expect = 0.3f64.powf(2.0 - 2.0 * alpha) / (2.0 - 2.0 * alpha);
        assert!((core - expect).abs() < 1e-10 * expect);
        let tail = tail_integral(phi, 0.3).unwrap();
        let expect = 0.3f64.powf(-2.0 * alpha) / (2.0 * alpha);
        assert!((tail - expect).abs() < 1e-10 * expect);
    }

    #[test]
    fn borderline_exponent_diverges() {
        assert!(core_integral(|s| s * s, 1.0).is_none());
        assert!(tail_integral(|_| 1.0, 1.0).is_none());
    }
}
