//! Discrete heat kernels for the lazy symmetric walk and their Gaussian
//! counterparts.
//!
//! [`KernelTable`] holds the exact n-step transition probabilities
//! `p^d_n(k)` of the walk that stays put with probability `ε` and steps `±1`
//! with probability `(1−ε)/2` each, built by repeated convolution with the
//! one-step law. The rescaled copy `p̂^δ_t(x) = δ^{−1} p^d_{t/δ²}(x/δ)` lives
//! on the parabolic grid `δ²ℕ × δℤ` and satisfies the discrete heat equation
//! `∇_t^δ p̂ = (σ²/2) ∇^{2,δ} p̂` identically. The scan routines quantify the
//! local-CLT error for discrete gradients and the uniform Gaussian envelope
//! `|∇^m p^d_n(k)| ≤ a n^{−(m+1)/2} e^{−b k²/n}`.

use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::numerics::compensated_sum;
use crate::{Error, Result};

/// Exact n-step transition probabilities of the lazy symmetric walk.
///
/// Rows are stored on their support `|k| ≤ n`; entries outside the support
/// are exactly zero and are materialized only on export.
#[derive(Debug, Clone)]
pub struct KernelTable {
    epsilon: f64,
    n_max: usize,
    k_max: usize,
    /// `rows[n]` has length `2n+1` and holds `p^d_n(−n..=n)`.
    rows: Vec<Vec<f64>>,
}

/// Builds the transition table up to time `n_max` on the window `|k| ≤ k_max`.
///
/// Requires `k_max ≥ n_max` so that no row is ever truncated; the row at
/// time `n+1` is the exact convolution of the row at time `n` with the
/// one-step law `{ε at 0, (1−ε)/2 at ±1}`.
pub fn build_kernel_table(epsilon: f64, n_max: usize, k_max: usize) -> Result<KernelTable> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "laziness must satisfy 0 < epsilon < 1, got {epsilon}"
        )));
    }
    if n_max < 1 {
        return Err(Error::InvalidParameter(
            "kernel table needs n_max >= 1".into(),
        ));
    }
    if k_max < n_max {
        return Err(Error::InvalidParameter(format!(
            "k_max = {k_max} < n_max = {n_max} would truncate the walk's support"
        )));
    }
    let half = (1.0 - epsilon) / 2.0;
    let mut rows = Vec::with_capacity(n_max + 1);
    rows.push(vec![1.0]);
    for n in 0..n_max {
        let prev = &rows[n];
        // Row n+1 has support |k| <= n+1; index i stores k = i - (n+1).
        let mut next = vec![0.0; 2 * (n + 1) + 1];
        for (i, slot) in next.iter_mut().enumerate() {
            let k = i as i64 - (n as i64 + 1);
            let at = |kk: i64| {
                if kk.unsigned_abs() as usize <= n {
                    prev[(kk + n as i64) as usize]
                } else {
                    0.0
                }
            };
            *slot = epsilon * at(k) + half * (at(k - 1) + at(k + 1));
        }
        rows.push(next);
    }
    Ok(KernelTable {
        epsilon,
        n_max,
        k_max,
        rows,
    })
}

#[derive(Serialize, Deserialize)]
struct TableSidecar {
    epsilon: f64,
    #[serde(rename = "N")]
    n_max: usize,
    #[serde(rename = "K")]
    k_max: usize,
}

impl KernelTable {
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Diffusive variance `σ² = 1 − ε` of the one-step law.
    pub fn sigma_sq(&self) -> f64 {
        1.0 - self.epsilon
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    /// `p^d_n(k)`; exactly zero outside the support `|k| ≤ n`.
    ///
    /// Panics if `n` exceeds the table depth.
    pub fn value(&self, n: usize, k: i64) -> f64 {
        let row = &self.rows[n];
        if k.unsigned_abs() as usize > n {
            0.0
        } else {
            row[(k + n as i64) as usize]
        }
    }

    /// The support slice `p^d_n(−n..=n)` of row `n`.
    pub fn support_row(&self, n: usize) -> &[f64] {
        &self.rows[n]
    }

    /// Compensated sum of row `n` (should be 1 up to rounding).
    pub fn row_sum(&self, n: usize) -> f64 {
        compensated_sum(self.rows[n].iter().copied())
    }

    /// Exports the dense table as row-major little-endian `f64` (rows
    /// `n = 0..=N`, columns `k = −K..=K`, zeros off-support) plus a JSON
    /// sidecar `{epsilon, N, K}`.
    pub fn write_binary(&self, data_path: &Path, sidecar_path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(data_path)?);
        for n in 0..=self.n_max {
            for k in -(self.k_max as i64)..=(self.k_max as i64) {
                out.write_all(&self.value(n, k).to_le_bytes())?;
            }
        }
        out.flush()?;
        let sidecar = TableSidecar {
            epsilon: self.epsilon,
            n_max: self.n_max,
            k_max: self.k_max,
        };
        std::fs::write(sidecar_path, serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }
}

/// The continuous heat kernel `p_t(x) = (2πσ²t)^{−1/2} exp(−x²/(2σ²t))`.
pub fn gaussian_kernel(t: f64, x: f64, sigma_sq: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "gaussian kernel needs t > 0, got {t}"
        )));
    }
    if !(sigma_sq > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "gaussian kernel needs sigma_sq > 0, got {sigma_sq}"
        )));
    }
    Ok(gauss(t, x, sigma_sq))
}

#[inline]
fn gauss(t: f64, x: f64, sigma_sq: f64) -> f64 {
    let v = sigma_sq * t;
    (-x * x / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
}

/// Discrete gradient stencils on a `δ`-grid.
///
/// Orders follow the rescaled discrete derivatives used throughout:
/// `m = 1` is the forward difference `(f(x+δ) − f(x))/δ`, `m = 2` the
/// centered second difference, `m = 3` the forward difference of the second
/// difference, and `m = 4` the five-point fourth difference. `m = 0` returns
/// `f(x)` so scan code can treat the kernel itself uniformly.
pub fn discrete_gradient<F: Fn(f64) -> f64>(f: &F, order: u32, delta: f64, x: f64) -> f64 {
    let d = delta;
    match order {
        0 => f(x),
        1 => (f(x + d) - f(x)) / d,
        2 => (f(x + d) - 2.0 * f(x) + f(x - d)) / (d * d),
        3 => (f(x + 2.0 * d) - 3.0 * f(x + d) + 3.0 * f(x) - f(x - d)) / (d * d * d),
        4 => {
            (f(x + 2.0 * d) - 4.0 * f(x + d) + 6.0 * f(x) - 4.0 * f(x - d) + f(x - 2.0 * d))
                / (d * d * d * d)
        }
        _ => panic!("discrete gradient order must be in 0..=4, got {order}"),
    }
}

/// The symmetric first difference `∇̂^δ f(x) = (f(x+δ) − f(x−δ))/(2δ)`.
pub fn central_diff<F: Fn(f64) -> f64>(f: &F, delta: f64, x: f64) -> f64 {
    (f(x + delta) - f(x - delta)) / (2.0 * delta)
}

/// A discrete gradient of fixed order applied to a source function on a
/// `δ`-grid (use `δ = 1` for unrescaled tables).
pub struct GradientView<F> {
    source: F,
    order: u32,
    delta: f64,
}

impl<F: Fn(f64) -> f64> GradientView<F> {
    pub fn new(source: F, order: u32, delta: f64) -> Result<Self> {
        if !(1..=4).contains(&order) {
            return Err(Error::InvalidParameter(format!(
                "gradient order must be in 1..=4, got {order}"
            )));
        }
        if !(delta > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "gradient grid step must be positive, got {delta}"
            )));
        }
        Ok(GradientView {
            source,
            order,
            delta,
        })
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn eval(&self, x: f64) -> f64 {
        discrete_gradient(&self.source, self.order, self.delta, x)
    }
}

/// The rescaled kernel `p̂^δ_t(x) = δ^{−1} p^d_{t/δ²}(x/δ)` as a grid
/// function on `δ²ℕ × δℤ`.
pub struct RescaledKernel<'a> {
    table: &'a KernelTable,
    delta: f64,
}

pub fn rescaled_kernel(table: &KernelTable, delta: f64) -> Result<RescaledKernel<'_>> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "rescaled kernel needs 0 < delta <= 1, got {delta}"
        )));
    }
    Ok(RescaledKernel { table, delta })
}

impl RescaledKernel<'_> {
    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Evaluates `p̂^δ_t(x)`; both coordinates must sit on the grid and the
    /// time index `t/δ²` must not exceed the table depth.
    pub fn eval(&self, t: f64, x: f64) -> Result<f64> {
        let d = self.delta;
        let d2 = d * d;
        let n = (t / d2).round();
        if n < 0.0 || (t - n * d2).abs() > 1e-9 * d2.max(t.abs()) {
            return Err(Error::GridMismatch(format!(
                "time {t} is not on the grid delta^2 * N with delta = {d}"
            )));
        }
        let n = n as usize;
        if n > self.table.n_max {
            return Err(Error::GridMismatch(format!(
                "time index {n} exceeds table depth {}",
                self.table.n_max
            )));
        }
        let k = (x / d).round();
        if (x - k * d).abs() > 1e-9 * d {
            return Err(Error::GridMismatch(format!(
                "site {x} is not on the grid delta * Z with delta = {d}"
            )));
        }
        Ok(self.table.value(n, k as i64) / d)
    }
}

/// `sup_{|k| ≤ n} |∇^m p^d_n(k) − ∇^m p_n(k)|` with the same discrete
/// stencil applied to the table row and to the variance-`σ²` Gaussian.
///
/// Supported orders are `m ∈ {0, 2, 4}`; the decay rate in `n` is the
/// quantitative local CLT exponent `(m+3)/2`.
pub fn lclt_error(table: &KernelTable, n: usize, m: u32) -> Result<f64> {
    if !matches!(m, 0 | 2 | 4) {
        return Err(Error::InvalidParameter(format!(
            "lclt_error supports m in {{0, 2, 4}}, got {m}"
        )));
    }
    if n < 1 || n > table.n_max {
        return Err(Error::InvalidParameter(format!(
            "lclt_error needs 1 <= n <= {}, got {n}",
            table.n_max
        )));
    }
    let sigma_sq = table.sigma_sq();
    let disc = |x: f64| table.value(n, x.round() as i64);
    let cont = |x: f64| gauss(n as f64, x, sigma_sq);
    let mut sup = 0.0f64;
    for k in -(n as i64)..=(n as i64) {
        let kf = k as f64;
        let diff = (discrete_gradient(&disc, m, 1.0, kf) - discrete_gradient(&cont, m, 1.0, kf))
            .abs();
        sup = sup.max(diff);
    }
    Ok(sup)
}

/// Result of [`gaussian_bound_scan`]: the scanned supremum of
/// `n^{(m+1)/2} e^{bk²/n} |∇^m p^d_n(k)|`, its argmax, the per-`n` profile,
/// and how much the running sup still grew over the last octave of `n`.
#[derive(Debug, Clone, Serialize)]
pub struct BoundScan {
    pub m: u32,
    pub b: f64,
    /// The scanned sup; `+∞` when a term overflows, certifying blow-up.
    pub sup: f64,
    pub arg_n: usize,
    pub arg_k: i64,
    /// `sup_{n ≤ N} / sup_{n ≤ N/2} − 1`; near zero when the bound has
    /// stabilized, `+∞` when the second half overflows.
    pub last_octave_growth: f64,
    /// `sup_k` value for each `n = 1..=N` (CSV column `sup_k_value`).
    pub per_n: Vec<f64>,
}

/// Scans `sup_{n ≤ N, k} n^{(m+1)/2} e^{bk²/n} |∇^m p^d_n(k)|` in log space.
///
/// A finite result certifies the uniform Gaussian bound with constant
/// `a = sup` at exponent `b`; exponents too close to (or beyond) the
/// Gaussian rate `1/(2σ²)` make the scan blow up, which is reported as
/// `+∞` together with the violating `(n, k)`.
pub fn gaussian_bound_scan(table: &KernelTable, m: u32, b: f64) -> Result<BoundScan> {
    if m > 4 {
        return Err(Error::InvalidParameter(format!(
            "gaussian_bound_scan supports m in 0..=4, got {m}"
        )));
    }
    if !(b > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "gaussian_bound_scan needs b > 0, got {b}"
        )));
    }
    let ln_max = f64::MAX.ln();
    let half_order = 0.5 * (m as f64 + 1.0);
    // Per-row sup in log space; the stencil reaches two sites past the
    // support, so scan |k| <= n + 2.
    let per_row: Vec<(f64, i64)> = (1..=table.n_max)
        .into_par_iter()
        .map(|n| {
            let disc = |x: f64| table.value(n, x.round() as i64);
            let nf = n as f64;
            let mut best = f64::NEG_INFINITY;
            let mut best_k = 0i64;
            let reach = n as i64 + 2;
            for k in -reach..=reach {
                let g = discrete_gradient(&disc, m, 1.0, k as f64).abs();
                if g == 0.0 {
                    continue;
                }
                let log_term = half_order * nf.ln() + b * (k * k) as f64 / nf + g.ln();
                if log_term > best {
                    best = log_term;
                    best_k = k;
                }
            }
            (best, best_k)
        })
        .collect();

    let per_n: Vec<f64> = per_row
        .iter()
        .map(|&(log_sup, _)| {
            if log_sup > ln_max {
                f64::INFINITY
            } else {
                log_sup.exp()
            }
        })
        .collect();
    let mut sup = f64::NEG_INFINITY;
    let mut arg_n = 1usize;
    let mut arg_k = 0i64;
    for (i, &(log_sup, k)) in per_row.iter().enumerate() {
        if log_sup > sup {
            sup = log_sup;
            arg_n = i + 1;
            arg_k = k;
        }
    }
    let sup_value = if sup > ln_max { f64::INFINITY } else { sup.exp() };
    let half = per_n.len() / 2;
    let sup_half = per_n[..half.max(1)]
        .iter()
        .fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
    let growth = if sup_value.is_infinite() && sup_half.is_finite() {
        f64::INFINITY
    } else {
        sup_value / sup_half - 1.0
    };
    Ok(BoundScan {
        m,
        b,
        sup: sup_value,
        arg_n,
        arg_k,
        last_octave_growth: growth,
        per_n,
    })
}

/// Writes a scan profile as CSV with header `n,sup_k_value`.
pub fn write_scan_csv(scan: &BoundScan, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["n", "sup_k_value"])?;
    for (i, v) in scan.per_n.iter().enumerate() {
        writer.write_record([(i + 1).to_string(), format!("{v:.17e}")])?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::linear_fit;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const EPS: f64 = 0.25;

    fn table(n: usize) -> KernelTable {
        build_kernel_table(EPS, n, n).unwrap()
    }

    /// Max residual of the discrete heat equation over the whole table.
    fn heat_equation_residual(t: &KernelTable) -> f64 {
        let half_var = t.sigma_sq() / 2.0;
        let mut worst = 0.0f64;
        for n in 0..t.n_max() {
            for k in -(n as i64 + 1)..=(n as i64 + 1) {
                let lap = t.value(n, k + 1) - 2.0 * t.value(n, k) + t.value(n, k - 1);
                let res = t.value(n + 1, k) - t.value(n, k) - half_var * lap;
                worst = worst.max(res.abs());
            }
        }
        worst
    }

    #[test]
    fn one_step_law() {
        let t = table(4);
        assert_eq!(t.value(1, 0), EPS);
        assert_eq!(t.value(1, 1), (1.0 - EPS) / 2.0);
        assert_eq!(t.value(1, -1), (1.0 - EPS) / 2.0);
    }

    #[test]
    fn two_step_value_matches_hand_convolution() {
        let t = table(4);
        let expected = EPS * EPS + (1.0 - EPS) * (1.0 - EPS) / 2.0;
        assert_abs_diff_eq!(t.value(2, 0), expected, epsilon = 1e-15);
    }

    #[test]
    fn rows_are_stochastic_symmetric_and_supported() {
        let t = table(200);
        for n in 0..=200usize {
            assert_abs_diff_eq!(t.row_sum(n), 1.0, epsilon = 1e-12);
            for k in 0..=(n as i64) {
                assert_eq!(t.value(n, k), t.value(n, -k));
                if n >= 1 {
                    assert!(t.value(n, k) > 0.0, "lazy walk row {n} vanished at {k}");
                }
            }
            assert_eq!(t.value(n, n as i64 + 1), 0.0);
            assert_eq!(t.value(n, -(n as i64) - 1), 0.0);
        }
    }

    #[test]
    fn chapman_kolmogorov_spot_check() {
        let t = table(16);
        let (n, m) = (7usize, 9usize);
        for k in -16i64..=16 {
            let mut conv = 0.0;
            for j in -(n as i64)..=(n as i64) {
                conv += t.value(n, j) * t.value(m, k - j);
            }
            assert_abs_diff_eq!(t.value(n + m, k), conv, epsilon = 1e-12);
        }
    }

    #[test]
    fn build_rejects_bad_parameters() {
        assert!(build_kernel_table(0.0, 4, 4).is_err());
        assert!(build_kernel_table(1.0, 4, 4).is_err());
        assert!(build_kernel_table(0.25, 0, 4).is_err());
        assert!(build_kernel_table(0.25, 8, 4).is_err());
    }

    #[test]
    fn gaussian_kernel_normalizes_and_solves_heat_equation() {
        let s2 = 0.75;
        let t = 0.7;
        let mass = crate::numerics::integrate(
            &|x| gaussian_kernel(t, x, s2).unwrap(),
            -30.0,
            30.0,
            1e-12,
        );
        assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-10);

        let peak = gaussian_kernel(1.0, 0.0, s2).unwrap();
        assert_abs_diff_eq!(
            peak,
            1.0 / (2.0 * std::f64::consts::PI * s2).sqrt(),
            epsilon = 1e-15
        );

        // Central finite differences at (t, x) = (1, 0.5).
        let h = 1e-4;
        let (tt, x) = (1.0, 0.5);
        let p = |t: f64, x: f64| gaussian_kernel(t, x, s2).unwrap();
        let dt = (p(tt + h, x) - p(tt - h, x)) / (2.0 * h);
        let dxx = (p(tt, x + h) - 2.0 * p(tt, x) + p(tt, x - h)) / (h * h);
        assert!((dt - 0.5 * s2 * dxx).abs() < 1e-6);

        assert!(gaussian_kernel(0.0, 0.0, s2).is_err());
        assert!(gaussian_kernel(-1.0, 0.0, s2).is_err());
    }

    #[test]
    fn rescaled_kernel_matches_table_and_heat_equation() {
        let t = table(32);
        let delta = 0.125;
        let d2 = delta * delta;
        let hat = rescaled_kernel(&t, delta).unwrap();

        assert_abs_diff_eq!(hat.eval(0.0, 0.0).unwrap(), 1.0 / delta, epsilon = 1e-15);

        // delta * sum_x hat{p}(t, x) = 1.
        let n = 20usize;
        let mut mass = 0.0;
        for k in -(n as i64)..=(n as i64) {
            mass += delta * hat.eval(n as f64 * d2, k as f64 * delta).unwrap();
        }
        assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-12);

        // Discrete heat equation on the rescaled grid, checked to 1e-12.
        let half_var = t.sigma_sq() / 2.0;
        for n in 0..20usize {
            for k in -(n as i64 + 1)..=(n as i64 + 1) {
                let tt = n as f64 * d2;
                let x = k as f64 * delta;
                let time = (hat.eval(tt + d2, x).unwrap() - hat.eval(tt, x).unwrap()) / d2;
                let lap = (hat.eval(tt, x + delta).unwrap() - 2.0 * hat.eval(tt, x).unwrap()
                    + hat.eval(tt, x - delta).unwrap())
                    / d2;
                assert!((time - half_var * lap).abs() <= 1e-12 / delta);
            }
        }

        // delta = 1 reproduces the raw table.
        let unit = rescaled_kernel(&t, 1.0).unwrap();
        for k in -5i64..=5 {
            assert_eq!(unit.eval(5.0, k as f64).unwrap(), t.value(5, k));
        }

        assert!(matches!(
            hat.eval(0.3 * d2, 0.0),
            Err(Error::GridMismatch(_))
        ));
        assert!(matches!(
            hat.eval(0.0, 0.4 * delta),
            Err(Error::GridMismatch(_))
        ));
        assert!(matches!(
            hat.eval(33.0 * d2, 0.0),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn unrescaled_table_heat_equation_is_exact() {
        assert!(heat_equation_residual(&table(64)) <= 1e-16);
    }

    #[test]
    fn lclt_error_decays_with_n() {
        let t = table(1024);
        let coarse = lclt_error(&t, 64, 0).unwrap();
        let fine = lclt_error(&t, 1024, 0).unwrap();
        assert!(fine < coarse, "LCLT sup error failed to decay: {coarse} -> {fine}");
        assert!(lclt_error(&t, 64, 1).is_err());
        assert!(lclt_error(&t, 2048, 0).is_err());
    }

    #[test]
    fn lclt_second_gradient_slope_is_roughly_minus_five_halves() {
        let t = table(512);
        let mut pts = Vec::new();
        for n in [64usize, 128, 256, 512] {
            let err = lclt_error(&t, n, 2).unwrap();
            pts.push(((n as f64).ln(), err.ln()));
        }
        let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let fit = linear_fit(&xs, &ys);
        assert!(
            (-3.0..=-2.0).contains(&fit.slope),
            "m=2 LCLT slope {} out of range",
            fit.slope
        );
    }

    #[test]
    fn bound_scan_is_finite_for_small_b_and_blows_up_for_large_b() {
        let t = table(256);
        let b_ok = 1.0 / (8.0 * t.sigma_sq());
        let finite = gaussian_bound_scan(&t, 0, b_ok).unwrap();
        assert!(finite.sup.is_finite());
        assert!(finite.sup > 0.0);

        let blow = gaussian_bound_scan(&t, 2, 10.0).unwrap();
        assert!(blow.sup.is_infinite());
        assert!(blow.arg_n >= 1);
        assert!(blow.arg_k.unsigned_abs() as usize <= blow.arg_n + 2);
    }

    #[test]
    fn scan_csv_and_binary_export_round_trip() {
        let t = table(8);
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("table.bin");
        let sidecar = dir.path().join("table.json");
        t.write_binary(&data, &sidecar).unwrap();

        let meta: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&sidecar).unwrap()).unwrap();
        assert_eq!(meta["N"], 8);
        assert_eq!(meta["K"], 8);
        assert_abs_diff_eq!(meta["epsilon"].as_f64().unwrap(), EPS, epsilon = 0.0);

        let bytes = std::fs::read(&data).unwrap();
        let width = 2 * t.k_max() + 1;
        assert_eq!(bytes.len(), (t.n_max() + 1) * width * 8);
        // Spot-check p^d_1(0) at row 1, column k = 0.
        let off = (width + t.k_max()) * 8;
        let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        assert_eq!(v, EPS);

        let scan = gaussian_bound_scan(&t, 0, 0.05).unwrap();
        let csv_path = dir.path().join("scan.csv");
        write_scan_csv(&scan, &csv_path).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert!(text.starts_with("n,sup_k_value\n"));
        assert_eq!(text.lines().count(), 1 + t.n_max());
    }

    #[test]
    fn gradient_view_validates_and_differentiates() {
        let quad = |x: f64| x * x;
        let view = GradientView::new(quad, 2, 0.5).unwrap();
        // Second difference of x^2 is exactly 2 at any point.
        assert_abs_diff_eq!(view.eval(1.25), 2.0, epsilon = 1e-12);
        assert!(GradientView::new(quad, 0, 0.5).is_err());
        assert!(GradientView::new(quad, 5, 0.5).is_err());
        assert!(GradientView::new(quad, 2, 0.0).is_err());

        let cubic = |x: f64| x * x * x;
        // Four-point third difference of x^3 is exactly 6.
        assert_abs_diff_eq!(
            discrete_gradient(&cubic, 3, 0.25, -0.75),
            6.0,
            epsilon = 1e-10
        );
        let quartic = |x: f64| x * x * x * x;
        // Five-point fourth difference of x^4 is exactly 24.
        assert_abs_diff_eq!(
            discrete_gradient(&quartic, 4, 0.5, 0.5),
            24.0,
            epsilon = 1e-9
        );
    }

    proptest! {
        #[test]
        fn random_tables_keep_kernel_invariants(
            eps in 0.05f64..0.95,
            n_max in 2usize..32,
        ) {
            let t = build_kernel_table(eps, n_max, n_max).unwrap();
            for n in 0..=n_max {
                prop_assert!((t.row_sum(n) - 1.0).abs() < 1e-12);
                for k in 0..=(n as i64) {
                    prop_assert_eq!(t.value(n, k), t.value(n, -k));
                }
                prop_assert_eq!(t.value(n, n as i64 + 1), 0.0);
            }
            // Chapman-Kolmogorov for a random split of n_max.
            let a = n_max / 2;
            let b = n_max - a;
            for k in -(n_max as i64)..=(n_max as i64) {
                let mut conv = 0.0;
                for j in -(a as i64)..=(a as i64) {
                    conv += t.value(a, j) * t.value(b, k - j);
                }
                prop_assert!((t.value(n_max, k) - conv).abs() < 1e-12);
            }
            prop_assert!(heat_equation_residual(&t) <= 1e-15);
        }
    }
}
