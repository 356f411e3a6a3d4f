//! Bernstein, Serfling and Kato concentration bounds.
//!
//! Kato's inequality is applied in four forms: the direct upper/lower bounds
//! on a sum of conditional expectations given the observed sum, and the
//! inverted upper/lower bounds on the observed sum given the conditional
//! one. Each has a closed-form optimal `(a, b)` for a predicted sum.

use statrs::function::gamma::ln_gamma;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConcError {
    #[error("observed sum {sum} outside attainable range [{lo}, {hi}]")]
    SumOutOfRange { sum: f64, lo: f64, hi: f64 },
    #[error("invalid range: x_min {0} > x_max {1}")]
    BadRange(f64, f64),
    #[error("inverted Kato bound inadmissible: a = {a}, sqrt(N)/2 = {half}")]
    Inadmissible { a: f64, half: f64 },
}

/// Bernstein deviation `c ln(1/e)/(3n) + sqrt((c ln(1/e)/(3n))^2 + 2 v ln(1/e)/n)`.
pub fn bernstein_delta(n: f64, v: f64, c: f64, epsilon: f64) -> f64 {
    let l = (1.0 / epsilon).ln();
    let x = c * l / (3.0 * n);
    x + (x * x + 2.0 * v * l / n).sqrt()
}

/// Serfling deviation `sqrt((r+s)(s+1) ln(1/e^2) / (r s^2))`.
pub fn serfling_delta(r: f64, s: f64, epsilon: f64) -> f64 {
    ((r + s) * (s + 1.0) * (1.0 / (epsilon * epsilon)).ln() / (r * s * s)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Upper,
    Lower,
}

/// Direct forms bound the conditional sum from the observed sum; inverted
/// forms bound the observed sum from the conditional sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KatoForm {
    Direct,
    Inverted,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KatoParams {
    pub a: f64,
    pub b: f64,
    pub side: Side,
    pub form: KatoForm,
    pub n: f64,
    /// Predicted sum of the normalized variables (in `[0, n]`).
    pub guess: f64,
    pub epsilon: f64,
}

impl KatoParams {
    /// Sign `s` in the failure exponent `-2(b^2 - a^2)/(1 + s 4a/(3 sqrt N))^2`.
    fn denominator_sign(&self) -> f64 {
        match (self.form, self.side) {
            (KatoForm::Direct, Side::Upper) | (KatoForm::Inverted, Side::Lower) => 1.0,
            (KatoForm::Direct, Side::Lower) | (KatoForm::Inverted, Side::Upper) => -1.0,
        }
    }

    pub fn failure_probability(&self) -> f64 {
        let d = 1.0 + self.denominator_sign() * 4.0 * self.a / (3.0 * self.n.sqrt());
        (-2.0 * (self.b * self.b - self.a * self.a) / (d * d)).exp()
    }

    /// `[b + a(2S/N - 1)] sqrt(N)` for a normalized observed sum `s`.
    pub fn delta(&self, s: f64) -> f64 {
        (self.b + self.a * (2.0 * s / self.n - 1.0)) * self.n.sqrt()
    }

    /// Replaces `a` and recomputes `b` from the failure-probability equation.
    pub fn with_a(mut self, a: f64) -> Self {
        self.a = a;
        self.b = b_from_a(a, self.n, self.epsilon, self.denominator_sign());
        self
    }
}

fn b_from_a(a: f64, n: f64, epsilon: f64, sign: f64) -> f64 {
    let le = epsilon.ln();
    let sn = n.sqrt();
    ((18.0 * a * a * n - (16.0 * a * a + sign * 24.0 * a * sn + 9.0 * n) * le).max(0.0)).sqrt()
        / (3.0 * (2.0 * n).sqrt())
}

/// Optimal `(a, b)` for the direct bounds on the conditional sum.
pub fn kato_ab(n: f64, guess: f64, epsilon: f64, side: Side) -> KatoParams {
    let le = epsilon.ln();
    let s = guess.clamp(0.0, n);
    let sn = n.sqrt();
    let q = 9.0 * s * (n - s) - 2.0 * n * le;
    let root = 9.0 * 2f64.sqrt() * n * (-(n - 2.0 * s).powi(2) * le * q).max(0.0).sqrt();
    let t1 = 72.0 * sn * s * (n - s) * le;
    let t2 = -16.0 * n.powf(1.5) * le * le;
    let num = match side {
        Side::Upper => t1 + t2 + root,
        Side::Lower => -t1 - t2 + root,
    };
    let a = 3.0 * num / (4.0 * (9.0 * n - 8.0 * le) * q);
    let p = KatoParams { a, b: 0.0, side, form: KatoForm::Direct, n, guess: s, epsilon };
    p.with_a(a)
}

/// Optimal `(a, b)` for the inverted bounds on the observed sum, given a
/// predicted conditional sum. `a` is clamped inside the admissible region
/// (`a < sqrt(N)/2` upper, `a > -sqrt(N)/2` lower).
pub fn kato_tilde_ab(n: f64, guess: f64, epsilon: f64, side: Side) -> KatoParams {
    let le = epsilon.ln();
    let e = guess.clamp(0.0, n);
    let sn = n.sqrt();
    let root = 9.0 * ((n - 2.0 * e).powi(2) * n * le * (n * le + 18.0 * e * (e - n))).max(0.0).sqrt();
    let t2 = 4.0 * n * le * le;
    let t3 = 9.0 * le * (3.0 * n * n - 8.0 * n * e + 8.0 * e * e);
    let den = 36.0 * le * (n * n - 2.0 * n * e + 2.0 * e * e) + 4.0 * n * le * le + 81.0 * n * e * (n - e);
    let num = match side {
        Side::Upper => root + t2 + t3,
        Side::Lower => root - t2 - t3,
    };
    let mut a = 0.75 * sn * num / den;
    let limit = 0.5 * sn * (1.0 - 1e-12);
    a = match side {
        Side::Upper => a.min(limit),
        Side::Lower => a.max(-limit),
    };
    let p = KatoParams { a, b: 0.0, side, form: KatoForm::Inverted, n, guess: e, epsilon };
    p.with_a(a)
}

/// Attainable range of a single-round random variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RvRange {
    pub x_min: f64,
    pub x_max: f64,
}

impl RvRange {
    pub fn new(x_min: f64, x_max: f64) -> Result<Self, ConcError> {
        if x_min > x_max {
            return Err(ConcError::BadRange(x_min, x_max));
        }
        Ok(Self { x_min, x_max })
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    /// `(S - N x_min)/(x_max - x_min)`.
    pub fn normalize_sum(&self, s: f64, n: f64) -> f64 {
        (s - n * self.x_min) / self.width()
    }
}

/// `K^{+1}` (sign > 0) or `K^{-1}` (sign < 0): a bound on the sum of
/// conditional expectations of an unnormalized RV from its observed sum.
/// With `monotone`, `a_U` is replaced by `max(-sqrt(N)/2, a_U)` so that
/// `K^{+1}` is nondecreasing in its argument.
pub fn k_bound(
    sum: f64,
    range: RvRange,
    n: f64,
    guess: f64,
    epsilon: f64,
    sign: i8,
    monotone: bool,
) -> Result<f64, ConcError> {
    let w = range.width();
    if w == 0.0 {
        return Ok(sum);
    }
    let (lo, hi) = (n * range.x_min, n * range.x_max);
    let slack = 1e-9 * (hi - lo).abs().max(1.0);
    if sum < lo - slack || sum > hi + slack {
        return Err(ConcError::SumOutOfRange { sum, lo, hi });
    }
    let s = range.normalize_sum(sum, n).clamp(0.0, n);
    let g = range.normalize_sum(guess, n).clamp(0.0, n);
    if sign >= 0 {
        let mut p = kato_ab(n, g, epsilon, Side::Upper);
        if monotone && p.a < -0.5 * n.sqrt() {
            p = p.with_a(-0.5 * n.sqrt());
        }
        Ok(sum + w * p.delta(s))
    } else {
        let p = kato_ab(n, g, epsilon, Side::Lower);
        Ok(sum - w * p.delta(s))
    }
}

/// Upper bound on an observed sum of normalized RVs from an upper bound on
/// its conditional sum: `N/(sqrt N - 2a)(E/sqrt N + b - a)`.
pub fn inverted_upper(cond_sum: f64, p: &KatoParams) -> Result<f64, ConcError> {
    let sn = p.n.sqrt();
    if p.a >= 0.5 * sn {
        return Err(ConcError::Inadmissible { a: p.a, half: 0.5 * sn });
    }
    Ok(p.n / (sn - 2.0 * p.a) * (cond_sum / sn + p.b - p.a))
}

/// Lower bound on an observed sum from a lower bound on its conditional
/// sum: `N/(sqrt N + 2a)(E/sqrt N - b + a)`.
pub fn inverted_lower(cond_sum: f64, p: &KatoParams) -> Result<f64, ConcError> {
    let sn = p.n.sqrt();
    if p.a <= -0.5 * sn {
        return Err(ConcError::Inadmissible { a: p.a, half: 0.5 * sn });
    }
    Ok(p.n / (sn + 2.0 * p.a) * (cond_sum / sn - p.b + p.a))
}

/// `ln P[X = i]` for `X ~ Binom(m, d)`.
fn ln_binom_pmf(m: u64, i: u64, d: f64) -> f64 {
    let (mf, fi) = (m as f64, i as f64);
    let lc = ln_gamma(mf + 1.0) - ln_gamma(fi + 1.0) - ln_gamma(mf - fi + 1.0);
    let lp = if i == 0 { 0.0 } else { fi * d.ln() };
    let lq = if i == m { 0.0 } else { (mf - fi) * (-d).ln_1p() };
    lc + lp + lq
}

/// `P[X >= k]` for `X ~ Binom(m, d)`, summed exactly in log space with
/// termination once terms stop contributing.
pub fn binom_upper_tail(m: u64, d: f64, k: u64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > m {
        return 0.0;
    }
    if d <= 0.0 {
        return 0.0;
    }
    if d >= 1.0 {
        return 1.0;
    }
    let mean = m as f64 * d;
    if (k as f64) <= mean {
        // Complement is the shorter, more accurate sum below the mode.
        return (1.0 - binom_lower_tail(m, d, k - 1)).clamp(0.0, 1.0);
    }
    let first = ln_binom_pmf(m, k, d);
    let mut total = 0.0;
    let mut i = k;
    let mut lt = first;
    loop {
        let term = (lt - first).exp();
        total += term;
        if term < 1e-18 * total || i == m {
            break;
        }
        // pmf(i+1)/pmf(i) = (m-i)/(i+1) * d/(1-d)
        lt += ((m - i) as f64 / (i + 1) as f64).ln() + d.ln() - (-d).ln_1p();
        i += 1;
    }
    (first.exp() * total).min(1.0)
}

fn binom_lower_tail(m: u64, d: f64, k: u64) -> f64 {
    let first = ln_binom_pmf(m, k, d);
    let mut total = 0.0;
    let mut i = k;
    let mut lt = first;
    loop {
        let term = (lt - first).exp();
        total += term;
        if term < 1e-18 * total || i == 0 {
            break;
        }
        lt += (i as f64 / (m - i + 1) as f64).ln() - d.ln() + (-d).ln_1p();
        i -= 1;
    }
    (first.exp() * total).min(1.0)
}

/// Smallest `x >= 0` on the `1/M` grid such that the binomial upper tail
/// from `floor(M (delta + x))` is at most `epsilon^2`.
pub fn gamma_bin(m: u64, delta: f64, epsilon: f64) -> f64 {
    let target = epsilon * epsilon;
    // Smallest k whose tail is <= target; tails are nonincreasing in k.
    let (mut lo, mut hi) = (0u64, m + 1);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if binom_upper_tail(m, delta, mid) <= target {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    (lo as f64 / m as f64 - delta).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bernstein_zero_variance() {
        let d = bernstein_delta(2.0, 0.0, 1.0, (-3f64).exp());
        assert!((d - 1.0).abs() < 1e-14);
        assert!(bernstein_delta(10.0, 0.3, 1.0, 1.0) == 0.0);
    }

    #[test]
    fn serfling_basic() {
        assert_eq!(serfling_delta(10.0, 5.0, 1.0), 0.0);
        assert!(serfling_delta(100.0, 20.0, 0.01) > serfling_delta(100.0, 40.0, 0.01));
    }

    #[test]
    fn kato_zero_a_reduction() {
        let eps = (-2f64).exp();
        let p = kato_ab(100.0, 10.0, eps, Side::Upper).with_a(0.0);
        assert!((p.b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kato_symmetric_guess() {
        // At S = N/2 only the square-root term drops out; the remaining
        // stationarity condition gives a = 2 ln(e)/(3 sqrt N) / (1 - 8 ln(e)/(9N)).
        let (n, eps) = (1e6f64, 1e-10f64);
        let le = eps.ln();
        let p = kato_ab(n, n / 2.0, eps, Side::Upper);
        let expect = 2.0 * le / (3.0 * n.sqrt()) / (1.0 - 8.0 * le / (9.0 * n));
        assert!((p.a - expect).abs() < 1e-12 * expect.abs().max(1.0));
        assert!(p.a.abs() < 0.1);
        let t = kato_tilde_ab(1e6, 5e5, 1e-10, Side::Upper);
        assert!(t.a.is_finite() && t.b.is_finite());
    }

    #[test]
    fn kato_residual_paper_point() {
        let p = kato_ab(1e6, 1e4, 1e-10, Side::Upper);
        assert!(((p.failure_probability() - 1e-10) / 1e-10).abs() < 1e-9);
        assert!(p.b >= p.a.abs());
    }

    #[test]
    fn k_bound_identity_on_zero_range() {
        let r = RvRange::new(1.0, 1.0).unwrap();
        assert_eq!(k_bound(5.0, r, 5.0, 5.0, 0.1, 1, false).unwrap(), 5.0);
    }

    #[test]
    fn k_bound_rejects_out_of_range() {
        let r = RvRange::new(0.0, 1.0).unwrap();
        assert!(k_bound(11.0, r, 10.0, 5.0, 0.1, 1, false).is_err());
    }

    #[test]
    fn gamma_bin_at_zero_delta() {
        for m in [1u64, 7, 100, 12345] {
            assert!((gamma_bin(m, 0.0, 1e-5) - 1.0 / m as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn gamma_bin_bounded() {
        for &d in &[0.1, 0.5, 0.9, 0.99] {
            let g = gamma_bin(20, d, 1e-3);
            // An empty tail (k = M + 1) is the only way to exceed 1 - d.
            assert!(g <= 1.0 - d + 1.0 / 20.0 + 1e-12, "{d} {g}");
        }
    }

    #[test]
    fn tail_large_m_is_consistent() {
        let m = 100_000_000u64;
        let d = 0.1;
        let k = (m as f64 * d + 7.0 * (m as f64 * d * 0.9).sqrt()) as u64;
        let t = binom_upper_tail(m, d, k);
        // 7 sigma normal tail is about 1.3e-12; allow a wide skew factor.
        assert!(t > 1e-14 && t < 1e-10, "{t}");
    }
}
