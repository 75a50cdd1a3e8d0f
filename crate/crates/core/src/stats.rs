//! Summary statistics and goodness-of-fit helpers.

use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Streaming mean and variance (Welford).
#[derive(Debug, Clone, Copy, Default)]
pub struct Welford {
    pub count: u64,
    pub mean: f64,
    m2: f64,
}

impl Welford {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Unbiased sample variance; zero for fewer than two observations.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn std_error(&self) -> f64 {
        if self.count == 0 {
            return f64::NAN;
        }
        (self.variance() / self.count as f64).sqrt()
    }

    /// Combine two accumulators (Chan et al. pairwise update).
    pub fn merge(&self, other: &Welford) -> Welford {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let n = self.count + other.count;
        let delta = other.mean - self.mean;
        let mean = self.mean + delta * other.count as f64 / n as f64;
        let m2 = self.m2 + other.m2 + delta * delta * (self.count as f64 * other.count as f64) / n as f64;
        Welford { count: n, mean, m2 }
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn variance(v: &[f64]) -> f64 {
    let mut w = Welford::new();
    v.iter().for_each(|&x| w.push(x));
    w.variance()
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Kish effective sample size of a weight vector.
pub fn effective_sample_size(w: &[f64]) -> f64 {
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|x| x * x).sum();
    if s2 > 0.0 {
        s * s / s2
    } else {
        0.0
    }
}

/// Upper tail probability of the chi-square distribution.
pub fn chi_square_sf(stat: f64, dof: f64) -> f64 {
    let dist = ChiSquared::new(dof).expect("positive degrees of freedom");
    dist.sf(stat)
}

/// Pearson statistic and p-value for observed counts against equal
/// expected frequencies.
pub fn chi_square_uniform(observed: &[f64]) -> (f64, f64) {
    let total: f64 = observed.iter().sum();
    let e = total / observed.len() as f64;
    let stat: f64 = observed.iter().map(|o| (o - e) * (o - e) / e).sum();
    (stat, chi_square_sf(stat, (observed.len() - 1) as f64))
}

/// Asymptotic Kolmogorov tail probability for a KS distance `d` observed
/// with effective sample size `n`.
pub fn ks_pvalue(d: f64, n: f64) -> f64 {
    let sn = n.sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=200 {
        let jf = j as f64;
        let term = (-2.0 * jf * jf * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-16 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Weighted KS distance between the empirical law of `x` (weights `w`) and
/// a continuous CDF.
pub fn weighted_ks_to_cdf(x: &[f64], w: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let total: f64 = w.iter().sum();
    let mut acc = 0.0;
    let mut worst: f64 = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let xv = x[idx[i]];
        let f = cdf(xv);
        worst = worst.max((f - acc / total).abs());
        while i < idx.len() && x[idx[i]] == xv {
            acc += w[idx[i]];
            i += 1;
        }
        worst = worst.max((acc / total - f).abs());
    }
    worst
}

/// Weighted two-sample KS distance sup |F_a − F_b|.
pub fn weighted_ks_two_sample(a: &[f64], wa: &[f64], b: &[f64], wb: &[f64]) -> f64 {
    let mut pts: Vec<(f64, f64, bool)> = a
        .iter()
        .zip(wa)
        .map(|(&x, &w)| (x, w, true))
        .chain(b.iter().zip(wb).map(|(&x, &w)| (x, w, false)))
        .collect();
    pts.sort_by(|p, q| p.0.total_cmp(&q.0));
    let ta: f64 = wa.iter().sum();
    let tb: f64 = wb.iter().sum();
    let (mut ca, mut cb, mut worst) = (0.0, 0.0, 0.0f64);
    let mut i = 0;
    while i < pts.len() {
        let x = pts[i].0;
        while i < pts.len() && pts[i].0 == x {
            if pts[i].2 {
                ca += pts[i].1;
            } else {
                cb += pts[i].1;
            }
            i += 1;
        }
        worst = worst.max((ca / ta - cb / tb).abs());
    }
    worst
}

/// Lag-1 autocorrelation of a series.
pub fn lag1_autocorrelation(v: &[f64]) -> f64 {
    let m = mean(v);
    let num: f64 = v.windows(2).map(|p| (p[0] - m) * (p[1] - m)).sum();
    let den: f64 = v.iter().map(|x| (x - m) * (x - m)).sum();
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Standard error of a binomial proportion.
pub fn binomial_se(p: f64, n: f64) -> f64 {
    (p * (1.0 - p) / n).sqrt()
}

/// Linear least-squares slope of y against x.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let mx = mean(x);
    let my = mean(y);
    let num: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welford_matches_two_pass() {
        let v = [1.0, 4.0, 2.5, -3.0, 8.0];
        let m = mean(&v);
        let direct = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 4.0;
        assert!((variance(&v) - direct).abs() < 1e-12);
        let mut a = Welford::new();
        let mut b = Welford::new();
        v[..2].iter().for_each(|&x| a.push(x));
        v[2..].iter().for_each(|&x| b.push(x));
        let c = a.merge(&b);
        assert!((c.variance() - direct).abs() < 1e-12);
        assert!((c.mean - m).abs() < 1e-15);
    }

    #[test]
    fn chi_square_tail_reference() {
        // P(chi2_1 > 3.841458820694124) = 0.05
        assert!((chi_square_sf(3.841458820694124, 1.0) - 0.05).abs() < 1e-9);
    }

    #[test]
    fn ks_tail_reference() {
        // Kolmogorov limit: P(sqrt(n) D > 1.3581) ≈ 0.05
        let n: f64 = 1e8;
        let p = ks_pvalue(1.3581 / n.sqrt(), n);
        assert!((p - 0.05).abs() < 1e-3, "{p}");
    }

    #[test]
    fn two_sample_ks_identical_is_zero() {
        let a = [0.1, 0.5, 0.9];
        let w = [1.0, 2.0, 1.0];
        assert_eq!(weighted_ks_two_sample(&a, &w, &a, &w), 0.0);
        let b = [2.0, 3.0];
        assert!((weighted_ks_two_sample(&a, &w, &b, &[1.0, 1.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn median_even_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
