//! Reference limit laws and empirical distribution tools.
//!
//! The stable law of index `s` is sampled through its Poisson series
//! `sum_n Theta_n (Gamma_n - eps_s)`, where `Theta_n` are the points of a
//! Poisson process with intensity `s theta^{-s-1}` and `Gamma_n` are i.i.d.
//! standard exponentials.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Exp1, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Parameters of the Poisson-series stable sampler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StableSpec {
    s: f64,
    theta_min: f64,
}

impl StableSpec {
    /// Index `s` in `(0, 2)` without `1`, with the default cutoff
    /// `theta_min = 10^{-4/s}` (about `10^4` points per sample).
    pub fn new(s: f64) -> Result<Self> {
        Self::with_theta_min(s, 10f64.powf(-4.0 / s))
    }

    pub fn with_theta_min(s: f64, theta_min: f64) -> Result<Self> {
        if !(s > 0.0 && s < 2.0) || s == 1.0 {
            return Err(Error::Range(format!("stable index {s} not in (0, 2) \\ {{1}}")));
        }
        if !(theta_min > 0.0) || !theta_min.is_finite() {
            return Err(Error::Range(format!("theta_min = {theta_min} must be positive")));
        }
        Ok(Self { s, theta_min })
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn theta_min(&self) -> f64 {
        self.theta_min
    }

    /// Compensation `eps_s`: `0` for `s < 1`, `1` for `s > 1`.
    pub fn eps_s(&self) -> f64 {
        if self.s < 1.0 {
            0.0
        } else {
            1.0
        }
    }

    /// Expected number of points above `theta_min`.
    pub fn expected_points(&self) -> f64 {
        self.theta_min.powf(-self.s)
    }

    /// For `s < 1`, the mean of the dropped small jumps, `s theta^{1-s}/(1-s)`;
    /// for `s > 1`, the standard deviation of the Gaussian stand-in,
    /// `sqrt(s theta^{2-s}/(2-s))`.
    pub fn truncation_bound(&self) -> f64 {
        let (s, t) = (self.s, self.theta_min);
        if s < 1.0 {
            s * t.powf(1.0 - s) / (1.0 - s)
        } else {
            self.remainder_variance().sqrt()
        }
    }

    /// Variance of the compensated jumps below `theta_min` (`s > 1`).
    pub fn remainder_variance(&self) -> f64 {
        let (s, t) = (self.s, self.theta_min);
        s * t.powf(2.0 - s) / (2.0 - s)
    }
}

/// Points of the Poisson process above `theta_min`, unordered.
pub fn sample_points<R: Rng + ?Sized>(spec: &StableSpec, rng: &mut R) -> Vec<f64> {
    let count = poisson(spec.expected_points(), rng);
    let inv_s = -1.0 / spec.s;
    (0..count)
        .map(|_| spec.theta_min * (1.0 - rng.random::<f64>()).powf(inv_s))
        .collect()
}

fn poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|d| d.sample(rng) as u64).unwrap_or(0)
}

/// `sum Theta_n (Gamma_n - eps)` with fresh exponentials.
pub fn compensated_sum<R: Rng + ?Sized>(points: &[f64], eps: f64, rng: &mut R) -> f64 {
    points
        .iter()
        .map(|&th| {
            let g: f64 = Exp1.sample(rng);
            th * (g - eps)
        })
        .sum()
}

/// One draw of the stable variable. For `s > 1` the jumps below
/// `theta_min` are replaced by a centered Gaussian of matching variance;
/// for `s < 1` they are dropped.
pub fn sample_stable_t<R: Rng + ?Sized>(spec: &StableSpec, rng: &mut R) -> f64 {
    let count = poisson(spec.expected_points(), rng);
    let inv_s = -1.0 / spec.s;
    let eps = spec.eps_s();
    let mut acc = 0.0;
    for _ in 0..count {
        let th = spec.theta_min * (1.0 - rng.random::<f64>()).powf(inv_s);
        let g: f64 = Exp1.sample(rng);
        acc += th * (g - eps);
    }
    if spec.s > 1.0 {
        let z: f64 = StandardNormal.sample(rng);
        acc += z * spec.remainder_variance().sqrt();
    }
    acc
}

/// Sorted sample with CDF and quantile evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalCdf {
    sorted: Vec<f64>,
}

impl EmpiricalCdf {
    pub fn new(mut samples: Vec<f64>) -> Self {
        samples.sort_by(f64::total_cmp);
        Self { sorted: samples }
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn samples(&self) -> &[f64] {
        &self.sorted
    }

    /// Fraction of samples `<= t`.
    pub fn eval(&self, t: f64) -> f64 {
        if self.sorted.is_empty() {
            return 0.0;
        }
        self.sorted.partition_point(|&x| x <= t) as f64 / self.sorted.len() as f64
    }

    pub fn quantile(&self, q: f64) -> f64 {
        crate::stats::quantile_sorted(&self.sorted, q)
    }

    pub fn median(&self) -> f64 {
        self.quantile(0.5)
    }

    pub fn iqr(&self) -> f64 {
        self.quantile(0.75) - self.quantile(0.25)
    }

    /// Samples mapped through `f` (which should be monotone increasing).
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(self.sorted.iter().map(|&x| f(x)).collect())
    }

    /// One-sample Kolmogorov-Smirnov distance to a continuous CDF.
    pub fn ks_distance(&self, cdf: impl Fn(f64) -> f64) -> f64 {
        let n = self.sorted.len() as f64;
        let mut d = 0.0f64;
        for (i, &x) in self.sorted.iter().enumerate() {
            let f = cdf(x);
            d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
        }
        d
    }

    /// Two-sample Kolmogorov-Smirnov distance.
    pub fn ks_two_sample(&self, other: &EmpiricalCdf) -> f64 {
        let (a, b) = (&self.sorted, &other.sorted);
        let (na, nb) = (a.len() as f64, b.len() as f64);
        let (mut i, mut j) = (0, 0);
        let mut d = 0.0f64;
        while i < a.len() && j < b.len() {
            let x = a[i].min(b[j]);
            while i < a.len() && a[i] <= x {
                i += 1;
            }
            while j < b.len() && b[j] <= x {
                j += 1;
            }
            d = d.max((i as f64 / na - j as f64 / nb).abs());
        }
        d
    }

    /// Two-column CSV `t, F(t)` on `grid`.
    pub fn write_csv<W: Write>(&self, grid: &[f64], out: W) -> Result<()> {
        write_reference_csv(grid, |t| self.eval(t), out)
    }
}

/// Half-width of the two-sided DKW band at level `1 - alpha`.
pub fn dkw_band(n: usize, alpha: f64) -> f64 {
    ((2.0 / alpha).ln() / (2.0 * n as f64)).sqrt()
}

/// Asymptotic two-sample KS critical value `c(alpha) sqrt((n+m)/(nm))`.
pub fn ks_two_sample_critical(n: usize, m: usize, alpha: f64) -> f64 {
    let c = (-(alpha / 2.0).ln() / 2.0).sqrt();
    c * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
}

/// `M` independent draws of the stable variable.
pub fn empirical_ls(spec: &StableSpec, m: usize, seed: u64) -> Result<EmpiricalCdf> {
    if m < 10_000 {
        return Err(Error::Replicas(format!("need at least 10^4 samples, got {m}")));
    }
    let samples = crate::par::replicate(m, |k| {
        let mut r = rng::stream(seed, tag::STABLE, k as u64);
        sample_stable_t(spec, &mut r)
    });
    Ok(EmpiricalCdf::new(samples))
}

/// One draw of `sum Theta_n Gamma_n` compensated by its intensity mean
/// rather than point by point. For `s > 1` this is the one-sided stable
/// law with the same index: `sum_{Theta > theta_min} Theta Gamma` minus
/// `s theta_min^{1-s} / (s - 1)`, plus a centered Gaussian of variance
/// `2 s theta_min^{2-s} / (2 - s)` for the small jumps. For `s < 1` it
/// coincides with [`sample_stable_t`].
pub fn sample_mean_compensated<R: Rng + ?Sized>(spec: &StableSpec, rng: &mut R) -> f64 {
    if spec.s < 1.0 {
        return sample_stable_t(spec, rng);
    }
    let (s, t) = (spec.s, spec.theta_min);
    let acc = compensated_sum(&sample_points(spec, rng), 0.0, rng);
    let z: f64 = StandardNormal.sample(rng);
    acc - mean_compensator(spec) + z * (2.0 * s * t.powf(2.0 - s) / (2.0 - s)).sqrt()
}

/// `E sum_{Theta > theta_min} Theta Gamma = s theta_min^{1-s} / (s - 1)` for `s > 1`.
pub fn mean_compensator(spec: &StableSpec) -> f64 {
    let (s, t) = (spec.s, spec.theta_min);
    s * t.powf(1.0 - s) / (s - 1.0)
}

/// `M` draws of [`sample_mean_compensated`].
pub fn empirical_mean_compensated(spec: &StableSpec, m: usize, seed: u64) -> Result<EmpiricalCdf> {
    if m < 10_000 {
        return Err(Error::Replicas(format!("need at least 10^4 samples, got {m}")));
    }
    let samples = crate::par::replicate(m, |k| {
        let mut r = rng::stream(seed, tag::STABLE, k as u64);
        sample_mean_compensated(spec, &mut r)
    });
    Ok(EmpiricalCdf::new(samples))
}

/// Law of `sum Theta_n (Gamma_n - eps_s)` for a frozen point set.
pub fn conditional_ftheta(points: &[f64], s: f64, m: usize, seed: u64) -> Result<EmpiricalCdf> {
    let eps = StableSpec::with_theta_min(s, 1.0)?.eps_s();
    let samples = crate::par::replicate(m, |k| {
        let mut r = rng::stream(seed, tag::STABLE, k as u64);
        compensated_sum(points, eps, &mut r)
    });
    Ok(EmpiricalCdf::new(samples))
}

/// Standard normal CDF.
pub fn normal_cdf(t: f64) -> f64 {
    0.5 * libm::erfc(-t / std::f64::consts::SQRT_2)
}

/// Partial sum with the magnitude of the first omitted term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesValue {
    pub value: f64,
    pub bound: f64,
    pub terms: usize,
}

fn ks_rate(k: usize) -> f64 {
    let o = (2 * k + 1) as f64;
    o * o * PI * PI / 8.0
}

/// Kesten-Sinai density `(2/pi) sum_k (-1)^k/(2k+1) exp(-(2k+1)^2 pi^2 |t| / 8)`
/// truncated after `terms` terms. At `t = 0` the Leibniz value `1/2` is
/// returned exactly.
pub fn kesten_sinai_density(t: f64, terms: usize) -> SeriesValue {
    let terms = terms.max(1);
    let x = t.abs();
    if x == 0.0 {
        return SeriesValue {
            value: 0.5,
            bound: 0.0,
            terms: 0,
        };
    }
    let mut acc = 0.0;
    for k in 0..terms {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        acc += sign / (2 * k + 1) as f64 * (-ks_rate(k) * x).exp();
    }
    SeriesValue {
        value: 2.0 / PI * acc,
        bound: 2.0 / PI / (2 * terms + 1) as f64 * (-ks_rate(terms) * x).exp(),
        terms,
    }
}

/// Density with enough terms for an absolute error below `1e-15`.
pub fn kesten_sinai_pdf(t: f64) -> f64 {
    let x = t.abs();
    if x == 0.0 {
        return 0.5;
    }
    // first omitted term below 1e-16 once (2K+1)^2 pi^2 x / 8 > 37
    let k = (((37.0 * 8.0 / (PI * PI * x)).sqrt() - 1.0) / 2.0).ceil().max(0.0) as usize + 1;
    kesten_sinai_density(t, k).value
}

/// Kesten-Sinai CDF by term-wise integration of the density series.
/// Since `sum_k (-1)^k / ((2k+1) c_k) = pi/4` with `c_k = (2k+1)^2 pi^2/8`,
/// the upper tail is `(2/pi) sum_k (-1)^k exp(-c_k |t|) / ((2k+1) c_k)`,
/// which converges geometrically for `t != 0`.
pub fn kesten_sinai_cdf(t: f64) -> f64 {
    let x = t.abs();
    if x == 0.0 {
        return 0.5;
    }
    let mut tail = 0.0;
    let mut k = 0;
    loop {
        let c = ks_rate(k);
        let term = (-c * x).exp() / c / (2 * k + 1) as f64;
        tail += if k % 2 == 0 { term } else { -term };
        if term < 1e-17 {
            break;
        }
        k += 1;
    }
    let upper = (2.0 / PI * tail).clamp(0.0, 0.5);
    if t > 0.0 {
        1.0 - upper
    } else {
        upper
    }
}

/// Two-column CSV `t, F(t)`.
pub fn write_reference_csv<W: Write>(grid: &[f64], f: impl Fn(f64) -> f64, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "F"])?;
    for &t in grid {
        w.write_record(&[t.to_string(), f(t).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> StreamRng {
        StreamRng::seed_from_u64(seed)
    }

    /// Composite Simpson on `[0, sqrt(b)]` after `t = u^2`, which removes
    /// the square-root behaviour of the density at the origin.
    fn half_line_integral(f: impl Fn(f64) -> f64, b: f64, panels: usize) -> f64 {
        let ub = b.sqrt();
        let h = ub / panels as f64;
        let g = |u: f64| 2.0 * u * f(u * u);
        let mut acc = g(0.0) + g(ub);
        for i in 1..panels {
            acc += g(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    #[test]
    fn invalid_indices_are_rejected() {
        for s in [0.0, 1.0, 2.0, -0.5, 2.5, f64::NAN] {
            assert!(StableSpec::new(s).is_err());
        }
        assert!(StableSpec::with_theta_min(0.5, 0.0).is_err());
    }

    #[test]
    fn one_expected_point_above_one() {
        for s in [0.3, 0.7, 1.24, 1.8] {
            let spec = StableSpec::with_theta_min(s, 1.0).unwrap();
            assert_eq!(spec.expected_points(), 1.0);
            let mut r = rng(1);
            let n = 200_000;
            let total: usize = (0..n).map(|_| sample_points(&spec, &mut r).len()).sum();
            let mean = total as f64 / n as f64;
            assert!((mean - 1.0).abs() < 3.0 / (n as f64).sqrt(), "{mean}");
        }
        assert!((StableSpec::new(0.5).unwrap().expected_points() - 1e4).abs() < 1e-6);
    }

    #[test]
    fn small_index_samples_are_nonnegative() {
        let spec = StableSpec::with_theta_min(0.6, 1e-3).unwrap();
        let mut r = rng(2);
        assert!((0..20_000).all(|_| sample_stable_t(&spec, &mut r) >= 0.0));
    }

    #[test]
    fn compensated_sum_is_centered() {
        let spec = StableSpec::with_theta_min(1.5, 0.1).unwrap();
        let mut r = rng(3);
        let n = 1_000_000;
        let xs: Vec<f64> = (0..n).map(|_| sample_stable_t(&spec, &mut r)).collect();
        let (mean, se) = crate::stats::mean_and_stderr(&xs);
        assert!(mean.abs() <= 3.0 * se, "{mean} +- {se}");
    }

    #[test]
    fn independent_runs_agree() {
        let spec = StableSpec::with_theta_min(1.24, 0.01).unwrap();
        let m = 100_000;
        let a = empirical_ls(&spec, m, 10).unwrap();
        let b = empirical_ls(&spec, m, 11).unwrap();
        let d = a.ks_two_sample(&b);
        assert!(d < 1.36 * (2.0 / m as f64).sqrt() * 1.5, "{d}");
        assert!(matches!(empirical_ls(&spec, 100, 1), Err(Error::Replicas(_))));
    }

    #[test]
    fn half_index_has_positive_median_and_power_tail() {
        let spec = StableSpec::with_theta_min(0.5, 1e-4).unwrap();
        let cdf = empirical_ls(&spec, 200_000, 4).unwrap();
        assert!(cdf.median() > 0.0);
        let tail = |x: f64| (1.0 - cdf.eval(x)) * x.powf(0.5);
        let (lo, hi) = (tail(100.0), tail(1000.0));
        assert!((lo / hi - 1.0).abs() < 0.2, "{lo} vs {hi}");
    }

    #[test]
    fn refining_the_cutoff_moves_the_median_less_than_the_bound() {
        for s in [0.5, 1.5] {
            let fine = StableSpec::with_theta_min(s, 0.005).unwrap();
            let coarse = StableSpec::with_theta_min(s, 0.01).unwrap();
            let eps = fine.eps_s();
            let mut r = rng(5);
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for _ in 0..20_000 {
                // coarse sample is the fine realization restricted to points >= 0.01
                let pts = sample_points(&fine, &mut r);
                let (big, small): (Vec<f64>, Vec<f64>) = pts.into_iter().partition(|&t| t >= 0.01);
                let head = compensated_sum(&big, eps, &mut r);
                let mid = compensated_sum(&small, eps, &mut r);
                let (zf, zc): (f64, f64) = (StandardNormal.sample(&mut r), StandardNormal.sample(&mut r));
                if s > 1.0 {
                    a.push(head + mid + zf * fine.remainder_variance().sqrt());
                    b.push(head + zc * coarse.remainder_variance().sqrt());
                } else {
                    a.push(head + mid);
                    b.push(head);
                }
            }
            let shift = (EmpiricalCdf::new(a).median() - EmpiricalCdf::new(b).median()).abs();
            assert!(
                shift < coarse.truncation_bound(),
                "s={s}: {shift} vs {}",
                coarse.truncation_bound()
            );
        }
    }

    #[test]
    fn mean_compensation_bounds_the_left_tail() {
        let spec = StableSpec::new(1.5).unwrap();
        let c = mean_compensator(&spec);
        let sd = (2.0 * spec.remainder_variance()).sqrt();
        let one_sided = empirical_mean_compensated(&spec, 10_000, 4).unwrap();
        assert!(one_sided.samples()[0] > -c - 6.0 * sd);
        // the per-point compensation has a heavy left tail
        let two_sided = empirical_ls(&spec, 10_000, 4).unwrap();
        assert!(two_sided.samples()[0] < -c - 6.0 * sd);
        assert!(two_sided.quantile(0.01) < one_sided.quantile(0.01));
        assert!(one_sided.ks_two_sample(&two_sided) > 0.05);
    }

    #[test]
    fn normal_cdf_reference_values() {
        assert_eq!(normal_cdf(0.0), 0.5);
        assert!((normal_cdf(1.96) - 0.975_002_104_851_779_5).abs() < 1e-10);
        assert!((normal_cdf(-1.0) - 0.158_655_253_931_457_05).abs() < 1e-10);
        for t in [0.1, 0.7, 2.5, 5.0] {
            assert!((normal_cdf(-t) - (1.0 - normal_cdf(t))).abs() < 1e-12);
        }
    }

    #[test]
    fn kesten_sinai_density_basics() {
        assert_eq!(kesten_sinai_density(0.0, 5).value, 0.5);
        for t in [0.05, 0.3, 1.7] {
            assert_eq!(kesten_sinai_density(t, 20).value, kesten_sinai_density(-t, 20).value);
        }
        // mass outside [-10, 10] is about 4.5e-6, so normalization is
        // checked on [-30, 30] and the [-10, 10] mass against the CDF series
        let total = 2.0 * half_line_integral(kesten_sinai_pdf, 30.0, 8000);
        assert!((total - 1.0).abs() < 1e-6, "{total}");
        let inner = 2.0 * half_line_integral(kesten_sinai_pdf, 10.0, 4000);
        assert!((inner - (kesten_sinai_cdf(10.0) - kesten_sinai_cdf(-10.0))).abs() < 1e-9);
    }

    #[test]
    fn kesten_sinai_partial_sums_enclose_the_limit() {
        for t in [0.02, 0.2, 1.0] {
            let limit = kesten_sinai_pdf(t);
            for k in 1..12 {
                let s = kesten_sinai_density(t, k);
                let err = s.value - limit;
                let expected_sign = if k % 2 == 1 { 1.0 } else { -1.0 };
                assert!(err * expected_sign >= -1e-15, "t={t} k={k}");
                assert!(err.abs() <= s.bound + 1e-15);
            }
        }
    }

    #[test]
    fn kesten_sinai_cdf_matches_quadrature() {
        for t in [0.01, 0.1, 0.5, 1.0, 3.0] {
            let q = 0.5 + half_line_integral(kesten_sinai_pdf, t, 2000);
            assert!((kesten_sinai_cdf(t) - q).abs() < 1e-8, "t={t}");
            assert!((kesten_sinai_cdf(-t) - (1.0 - q)).abs() < 1e-8);
        }
        assert!(kesten_sinai_cdf(50.0) > 1.0 - 1e-15);
    }

    #[test]
    fn frozen_single_point_is_exponential() {
        let m = 100_000;
        let band = dkw_band(m, 0.01);
        let one = conditional_ftheta(&[1.0], 0.5, m, 7).unwrap();
        assert!(one.ks_distance(|x| if x <= 0.0 { 0.0 } else { 1.0 - (-x).exp() }) < band);
        let two = conditional_ftheta(&[1.0, 1.0], 0.5, m, 8).unwrap();
        let gamma2 = |x: f64| if x <= 0.0 { 0.0 } else { 1.0 - (-x).exp() * (1.0 + x) };
        assert!(two.ks_distance(gamma2) < band);
        let empty = conditional_ftheta(&[], 1.5, 1000, 9).unwrap();
        assert!(empty.samples().iter().all(|&x| x == 0.0));
        let again = conditional_ftheta(&[1.0], 0.5, m, 7).unwrap();
        assert_eq!(one, again);
    }

    #[test]
    fn two_sample_ks_matches_brute_force() {
        let a = EmpiricalCdf::new(vec![0.1, 0.4, 0.4, 2.0, 3.0]);
        let b = EmpiricalCdf::new(vec![0.2, 0.4, 1.0]);
        let pts = [0.1, 0.2, 0.4, 1.0, 2.0, 3.0];
        let brute = pts.iter().map(|&x| (a.eval(x) - b.eval(x)).abs()).fold(0.0, f64::max);
        assert!((a.ks_two_sample(&b) - brute).abs() < 1e-15);
        assert!((dkw_band(1_000_000, 0.01) - 1.628 / 1000.0).abs() < 1e-5);
    }

    #[test]
    fn reference_csv_has_a_header_and_one_row_per_point() {
        let mut buf = Vec::new();
        write_reference_csv(&[-1.0, 0.0, 1.0], normal_cdf, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("t,F"));
        assert_eq!(text.lines().count(), 4);
    }

    proptest! {
        #[test]
        fn cdfs_are_monotone_and_bounded(mut grid in proptest::collection::vec(-20.0f64..20.0, 2..40), data in proptest::collection::vec(-5.0f64..5.0, 1..50)) {
            grid.sort_by(f64::total_cmp);
            let emp = EmpiricalCdf::new(data);
            let fs: [&dyn Fn(f64) -> f64; 3] = [&normal_cdf, &kesten_sinai_cdf, &|t| emp.eval(t)];
            for f in fs {
                let vals: Vec<f64> = grid.iter().map(|&t| f(t)).collect();
                prop_assert!(vals.iter().all(|v| (0.0..=1.0).contains(v)));
                prop_assert!(vals.windows(2).all(|w| w[0] <= w[1] + 1e-15));
            }
        }
    }
}
