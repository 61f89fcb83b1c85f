//! Small numerical utilities shared across the crate: compensated summation,
//! quadrature, least-squares slope fits with confidence intervals, and
//! bootstrap percentiles.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

/// Neumaier-compensated sum. Used wherever long alternating sums would
/// otherwise lose digits (kernel convolutions, discrete Duhamel sums).
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Composite Simpson rule with `n` (even) subintervals.
pub fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, n: usize) -> f64 {
    assert!(n >= 2 && n % 2 == 0, "simpson needs an even panel count");
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Adaptive-by-doubling Simpson quadrature: doubles the panel count until two
/// consecutive refinements agree within `tol` (absolute), starting from 64
/// panels and giving up at ~10^6 panels.
pub fn integrate<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    let mut n = 64usize;
    let mut prev = simpson(f, a, b, n);
    loop {
        n *= 2;
        let next = simpson(f, a, b, n);
        if (next - prev).abs() <= tol || n >= (1 << 20) {
            return next;
        }
        prev = next;
    }
}

/// Ordinary least squares `y ≈ intercept + slope·x`.
#[derive(Debug, Clone, Copy)]
pub struct LinFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Standard error of the slope estimate.
    pub se_slope: f64,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> LinFit {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    assert!(n >= 2, "need at least two points for a line");
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for i in 0..n {
        let dx = xs[i] - mx;
        let dy = ys[i] - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    assert!(sxx > 0.0, "degenerate abscissae");
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = (0..n)
        .map(|i| {
            let r = ys[i] - intercept - slope * xs[i];
            r * r
        })
        .sum();
    let r2 = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    let se_slope = if n > 2 {
        (ss_res / (nf - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    LinFit {
        slope,
        intercept,
        r2,
        se_slope,
    }
}

/// A log-log rate fit with a two-sided 95% confidence interval on the slope.
///
/// `points` carries the original (abscissa, ordinate) pairs the fit was made
/// from, before taking logarithms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub r2: f64,
    pub points: Vec<(f64, f64)>,
}

impl RateFit {
    /// Fit `log y = c + slope · log x` through strictly positive data.
    ///
    /// The confidence interval uses the Student-t quantile with `n − 2`
    /// degrees of freedom when `n > 2`, and collapses to the point estimate
    /// for `n = 2`.
    pub fn log_log(points: &[(f64, f64)]) -> Self {
        assert!(points.iter().all(|&(x, y)| x > 0.0 && y > 0.0));
        let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
        let fit = linear_fit(&xs, &ys);
        let n = points.len();
        let half = if n > 2 {
            let t = StudentsT::new(0.0, 1.0, (n - 2) as f64)
                .expect("valid t distribution")
                .inverse_cdf(0.975);
            t * fit.se_slope
        } else {
            0.0
        };
        RateFit {
            slope: fit.slope,
            ci_lo: fit.slope - half,
            ci_hi: fit.slope + half,
            r2: fit.r2,
            points: points.to_vec(),
        }
    }
}

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().cdf(x)
}

/// Standard normal quantile function; clamps its argument into (0, 1).
///
/// The library inverse is only ~1e−11 accurate in probability; two Newton
/// corrections against the (machine-accurate) CDF push the roundtrip error
/// to the floating-point floor, which the coupling identity checks rely on.
pub fn std_normal_quantile(p: f64) -> f64 {
    let p = p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
    let n = Normal::new(0.0, 1.0).unwrap();
    let mut x = n.inverse_cdf(p);
    for _ in 0..2 {
        let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        if pdf <= f64::MIN_POSITIVE {
            break;
        }
        x -= (n.cdf(x) - p) / pdf;
    }
    x
}

/// Empirical quantile with linear interpolation; `q` in `[0, 1]`.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let w = pos - lo as f64;
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    }
}

fn median_of(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    quantile(&values, 0.5)
}

/// Percentile-bootstrap quantile of the sample median.
///
/// Resamples `values` with replacement `resamples` times, computes the median
/// of each resample, and returns the requested quantile of those medians. A
/// one-sided 95% lower confidence bound for the median is `q = 0.05`.
pub fn bootstrap_median_quantile<R: Rng>(
    values: &[f64],
    resamples: usize,
    q: f64,
    rng: &mut R,
) -> f64 {
    assert!(!values.is_empty());
    let mut medians = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let draw: Vec<f64> = (0..values.len())
            .map(|_| values[rng.gen_range(0..values.len())])
            .collect();
        medians.push(median_of(draw));
    }
    medians.sort_by(|a, b| a.partial_cmp(b).unwrap());
    quantile(&medians, q)
}

/// Sample median (by copy).
pub fn median(values: &[f64]) -> f64 {
    median_of(values.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn compensated_sum_beats_naive_on_cancellation() {
        // 1 + 1e16 alternating pairs cancel exactly; the compensated sum keeps
        // the residual 1.0 that naive summation may lose.
        let values = vec![1.0, 1e16, -1e16];
        assert_abs_diff_eq!(compensated_sum(values), 1.0);
    }

    #[test]
    fn simpson_is_exact_on_cubics() {
        let f = |x: f64| 3.0 * x * x * x - x + 2.0;
        // ∫_0^2 (3x³ − x + 2) dx = 12 − 2 + 4 = 14.
        assert_abs_diff_eq!(simpson(&f, 0.0, 2.0, 2), 14.0, epsilon = 1e-12);
    }

    #[test]
    fn integrate_hits_tolerance_on_gaussian() {
        let f = |x: f64| (-x * x / 2.0).exp();
        let v = integrate(&f, -8.0, 8.0, 1e-12);
        assert_abs_diff_eq!(v, (2.0 * std::f64::consts::PI).sqrt(), epsilon = 1e-10);
    }

    #[test]
    fn linear_fit_recovers_exact_line() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [0.5, 2.5, 4.5, 6.5];
        let fit = linear_fit(&xs, &ys);
        assert_abs_diff_eq!(fit.slope, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.intercept, -1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.r2, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.se_slope, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn log_log_fit_recovers_power_law() {
        let points: Vec<(f64, f64)> = (1..=6)
            .map(|k| {
                let x = 2f64.powi(-k);
                (x, 3.0 * x.powf(1.5))
            })
            .collect();
        let fit = RateFit::log_log(&points);
        assert_abs_diff_eq!(fit.slope, 1.5, epsilon = 1e-10);
        assert!(fit.ci_lo <= 1.5 && 1.5 <= fit.ci_hi);
    }

    #[test]
    fn normal_cdf_quantile_roundtrip() {
        for &p in &[0.01, 0.25, 0.5, 0.9, 0.999] {
            assert_abs_diff_eq!(std_normal_cdf(std_normal_quantile(p)), p, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(std_normal_cdf(0.0), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn quantile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_abs_diff_eq!(quantile(&v, 0.0), 1.0);
        assert_abs_diff_eq!(quantile(&v, 1.0), 4.0);
        assert_abs_diff_eq!(quantile(&v, 0.5), 2.5);
    }

    #[test]
    fn bootstrap_median_brackets_true_median() {
        use rand::SeedableRng;
        let values: Vec<f64> = (0..64).map(|i| (i % 7) as f64).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let lo = bootstrap_median_quantile(&values, 2000, 0.05, &mut rng);
        let hi = bootstrap_median_quantile(&values, 2000, 0.95, &mut rng);
        let med = median(&values);
        assert!(lo <= med && med <= hi);
    }
}
