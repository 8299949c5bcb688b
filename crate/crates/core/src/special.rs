//! Special functions: scaled Bessel I0, Poisson log-pmf and the Marcum Q1 function.

use std::f64::consts::PI;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// `exp(-x) * I0(x)` for `x >= 0`.
pub fn bessel_i0e(x: f64) -> f64 {
    let x = x.abs();
    if x <= 20.0 {
        // power series, all terms positive
        let q = 0.25 * x * x;
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 1.0;
        loop {
            term *= q / (k * k);
            sum += term;
            if term < 1e-17 * sum {
                break;
            }
            k += 1.0;
        }
        sum * (-x).exp()
    } else {
        // asymptotic expansion; terms shrink well past the needed precision for x > 20
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 1.0;
        loop {
            let odd = 2.0 * k - 1.0;
            term *= odd * odd / (8.0 * k * x);
            sum += term;
            if term < 1e-17 * sum || k > 60.0 {
                break;
            }
            k += 1.0;
        }
        sum / (2.0 * PI * x).sqrt()
    }
}

/// `ln I0(x)`, finite for all finite `x`.
pub fn ln_bessel_i0(x: f64) -> f64 {
    let x = x.abs();
    x + bessel_i0e(x).ln()
}

/// Error of Stirling's approximation: `ln n! - ((n + 1/2) ln n - n + ln √(2π))`.
fn stirling_error(n: f64) -> f64 {
    const S0: f64 = 1.0 / 12.0;
    const S1: f64 = 1.0 / 360.0;
    const S2: f64 = 1.0 / 1260.0;
    const S3: f64 = 1.0 / 1680.0;
    const S4: f64 = 1.0 / 1188.0;
    if n <= 15.0 {
        let mut ln_fact = 0.0;
        let mut k = 2.0;
        while k <= n {
            ln_fact += f64::ln(k);
            k += 1.0;
        }
        return ln_fact - (n + 0.5) * n.ln() + n - LN_SQRT_2PI;
    }
    let nn = n * n;
    if n > 500.0 {
        (S0 - S1 / nn) / n
    } else if n > 80.0 {
        (S0 - (S1 - S2 / nn) / nn) / n
    } else if n > 35.0 {
        (S0 - (S1 - (S2 - S3 / nn) / nn) / nn) / n
    } else {
        (S0 - (S1 - (S2 - (S3 - S4 / nn) / nn) / nn) / nn) / n
    }
}

/// Deviance term `x ln(x/m) + m - x`, accurate when `x ≈ m`.
fn deviance(x: f64, m: f64) -> f64 {
    if (x - m).abs() < 0.1 * (x + m) {
        let v = (x - m) / (x + m);
        let mut s = (x - m) * v;
        let mut ej = 2.0 * x * v;
        let v2 = v * v;
        let mut j = 1.0;
        loop {
            ej *= v2;
            let next = s + ej / (2.0 * j + 1.0);
            if next == s {
                return next;
            }
            s = next;
            j += 1.0;
        }
    }
    x * (x / m).ln() + m - x
}

/// Natural log of the Poisson pmf `P(N = k)` with mean `mean > 0`.
pub fn poisson_ln_pmf(k: u64, mean: f64) -> f64 {
    if k == 0 {
        return -mean;
    }
    let x = k as f64;
    -stirling_error(x) - deviance(x, mean) - 0.5 * (2.0 * PI * x).ln()
}

/// Largest Poisson mean for which the series is summed directly.
const SERIES_MEAN_LIMIT: f64 = 4.0e6;

/// Generalized Marcum Q function of order one, `Q1(a, b)`.
///
/// Evaluated as `P(Y ≤ X)` with `X ~ Poisson(a²/2)`, `Y ~ Poisson(b²/2)`,
/// summing positive terms only. Extremely large arguments fall back to
/// adaptive quadrature of the Rician density.
pub fn marcum_q1(a: f64, b: f64) -> f64 {
    let a = a.abs();
    let b = b.abs();
    if b == 0.0 {
        return 1.0;
    }
    let mu = 0.5 * b * b;
    if a == 0.0 {
        return (-mu).exp();
    }
    let lambda = 0.5 * a * a;
    if lambda > SERIES_MEAN_LIMIT || mu > SERIES_MEAN_LIMIT {
        return marcum_q1_quadrature(a, b);
    }
    // 12-sigma windows; tail mass beyond is far below 1e-16
    let window = |m: f64| (12.0 * m.sqrt() + 30.0).ceil();
    let k_lo = (lambda - window(lambda)).max(0.0) as u64;
    let k_hi = (lambda + window(lambda)) as u64;
    let j_lo = (mu - window(mu)).max(0.0) as u64;

    let start = k_lo.min(j_lo);
    let mut cdf_y = 0.0;
    let mut pmf_y = 0.0;
    let mut pmf_x = 0.0;
    let mut sum = 0.0;
    for k in start..=k_hi {
        if k == j_lo {
            pmf_y = poisson_ln_pmf(k, mu).exp();
        } else if k > j_lo {
            pmf_y *= mu / k as f64;
        }
        cdf_y += pmf_y;
        if k == k_lo {
            pmf_x = poisson_ln_pmf(k, lambda).exp();
        } else if k > k_lo {
            pmf_x *= lambda / k as f64;
        }
        if k >= k_lo {
            sum += pmf_x * cdf_y.min(1.0);
        }
    }
    sum.clamp(0.0, 1.0)
}

/// `Q1(a, b) = 1 - ∫_0^b x exp(-(x² + a²)/2) I0(a x) dx` by adaptive Simpson.
pub fn marcum_q1_quadrature(a: f64, b: f64) -> f64 {
    let pdf = |x: f64| {
        if x <= 0.0 {
            0.0
        } else {
            x * (-(x - a) * (x - a) / 2.0).exp() * bessel_i0e(a * x)
        }
    };
    // the density is negligible outside a ± 40
    let lo = (a - 40.0).max(0.0);
    let hi = b.min(a + 40.0);
    if hi <= lo {
        return if b <= lo { 1.0 } else { 0.0 };
    }
    let cdf = adaptive_simpson(&pdf, lo, hi, 1e-14, 50);
    (1.0 - cdf).clamp(0.0, 1.0)
}

/// Adaptive Simpson integration of `f` over `[lo, hi]`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, lo: f64, hi: f64, tol: f64, depth: u32) -> f64 {
    let mid = 0.5 * (lo + hi);
    let (flo, fmid, fhi) = (f(lo), f(mid), f(hi));
    let whole = (hi - lo) / 6.0 * (flo + 4.0 * fmid + fhi);
    simpson_step(f, lo, hi, flo, fmid, fhi, whole, tol, depth)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F: Fn(f64) -> f64>(
    f: &F,
    lo: f64,
    hi: f64,
    flo: f64,
    fmid: f64,
    fhi: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let mid = 0.5 * (lo + hi);
    let lm = 0.5 * (lo + mid);
    let rm = 0.5 * (mid + hi);
    let flm = f(lm);
    let frm = f(rm);
    let left = (mid - lo) / 6.0 * (flo + 4.0 * flm + fmid);
    let right = (hi - mid) / 6.0 * (fmid + 4.0 * frm + fhi);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_step(f, lo, mid, flo, flm, fmid, left, 0.5 * tol, depth - 1)
        + simpson_step(f, mid, hi, fmid, frm, fhi, right, 0.5 * tol, depth - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct power series for I0 without scaling; reference for moderate x.
    fn i0_series(x: f64) -> f64 {
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..400 {
            term *= (x / 2.0) * (x / 2.0) / (k as f64 * k as f64);
            sum += term;
        }
        sum
    }

    #[test]
    fn i0e_matches_series_on_both_branches() {
        for &x in &[0.0f64, 0.5, 3.0, 10.0, 19.9, 20.1, 25.0, 40.0, 80.0, 150.0] {
            let want = i0_series(x) * (-x).exp();
            let got = bessel_i0e(x);
            assert!(((got - want) / want).abs() < 1e-13, "x={x}: {got} vs {want}");
        }
        assert_eq!(bessel_i0e(0.0), 1.0);
    }

    #[test]
    fn poisson_pmf_matches_direct_product() {
        for &(k, m) in &[(0u64, 2.5f64), (1, 2.5), (7, 3.0), (15, 15.0), (16, 10.0), (40, 33.0)] {
            let mut direct = (-m).exp();
            for j in 1..=k {
                direct *= m / j as f64;
            }
            let got = poisson_ln_pmf(k, m).exp();
            assert!(((got - direct) / direct).abs() < 1e-13, "k={k} m={m}");
        }
        // normalization with a large mean
        let m = 5000.0;
        let total: f64 = (3000..7000).map(|k| poisson_ln_pmf(k, m).exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn marcum_limits() {
        assert_eq!(marcum_q1(3.0, 0.0), 1.0);
        let b: f64 = 2.7;
        assert!((marcum_q1(0.0, b) - (-b * b / 2.0).exp()).abs() < 1e-16);
        assert!(marcum_q1(40.0, 5.0) > 1.0 - 1e-15);
        assert!(marcum_q1(1.0, 30.0) < 1e-100);
    }

    #[test]
    fn marcum_series_agrees_with_quadrature_fallback() {
        for &(a, b) in &[(0.5, 1.0), (2.0, 2.0), (5.0, 5.63), (9.45, 5.63), (3.0, 6.0), (30.0, 28.0)] {
            let s = marcum_q1(a, b);
            let q = marcum_q1_quadrature(a, b);
            assert!((s - q).abs() < 1e-11, "a={a} b={b}: {s} vs {q}");
        }
    }
}
