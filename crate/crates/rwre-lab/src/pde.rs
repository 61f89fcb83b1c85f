//! The quenched parabolic difference equation on the rescaled lattice.
//!
//! Everything in this module lives on the space grid `δℤ` and the time grid
//! `t_j = jδ²`. The quenched transition operator of the rescaled lazy walk is
//!
//! ```text
//! T^δ f(x) = ω^{+,δ}(x) f(x+δ) + ω^{−,δ}(x) f(x−δ) + ε f(x),
//! ω^{±,δ}(x) = (σ² ± U̇^δ(x)) / 2,
//! ```
//!
//! and the Cauchy problem marched here is the forward recursion
//!
//! ```text
//! f_{t_{j+1}} = T^δ f_{t_j} + δ² g_{t_j},            f_{t_0} = f_0.
//! ```
//!
//! [`solve_direct`] runs that recursion literally. [`solve_mild`] instead
//! evaluates the Duhamel (mild) form driven by the *free* lazy kernel
//! `p^δ_t(x−y) = p^d_{t/δ²}((x−y)/δ)`:
//!
//! ```text
//! f_{t_k}(x) = Σ_y p^δ_{t_k}(x−y) f_0(y)
//!            + δ² Σ_{j<k} Σ_y p^δ_{t_{k−1}−t_j}(x−y) g_{t_j}(y)
//!            + δ  Σ_{j<k} Σ_y p^δ_{t_{k−1}−t_j}(x−y) U̇^δ(y) ∇̂^δ f_{t_j}(y),
//! ```
//!
//! with the central stencil `∇̂^δ f(y) = (f(y+δ) − f(y−δ))/(2δ)`. The two
//! solvers share no code path, so their agreement is a genuine consistency
//! check of the splitting `T^δ = T̄^δ + δ U̇^δ ∇̂^δ`.
//!
//! [`ibp_identity_check`] verifies the summation-by-parts rewrite of the
//! drift term. With
//!
//! ```text
//! I^δ_t(a, y) = Σ_{z ∈ ⟦a+2δ, y⟧} U̇^δ(z) ∇̂^δ f_t(z)
//! ```
//!
//! (continued additively below `a + 2δ`, so the sum is signed), the inhomogeneous
//! drift part `J_{t_j}` of the mild form equals
//!
//! ```text
//! J_{t_j}(x) = δ² Σ_{ℓ<j} Σ_y ∇^δ_x p^δ_{t_{j−1}−t_ℓ}(x−δ−y) · I^δ_{t_ℓ}(a, y),
//! ```
//!
//! independently of the free anchor `a`, because the untruncated spatial sum
//! of a gradient vanishes. Applying forward / central differences in `x` gives
//! the companion identities for `∇^δ f` and `∇̂^δ f`, which are checked too.
//!
//! [`build_v_delta`] forms the forward gradient `v^δ_t = ∇^δ f_t` and verifies
//! the closed equation it satisfies in terms of `Ū^δ = −2U̇^δ` and the
//! density-normalized kernel `p̂^δ_t(x) = δ^{−1} p^δ_t(x)`:
//!
//! ```text
//! v_{t_k}(x) = η_{t_k}(x) − ½ δ³ Σ_{j<k} Σ_y ∇^{2,δ} p̂^δ_{t_j}(x−y) · I^δ_{t_{k−1}−t_j}(x, y),
//! I^δ_t(x, y) = Σ_{z ∈ ⟦x, y⟧} ½ (v_t(z) + v_t(z−δ)) Ū^δ(z),
//! ```
//!
//! where `η` collects the initial-condition and forcing terms under a single
//! forward kernel gradient. The `j = 0` summand is reported separately: the
//! time-zero kernel is a point mass, so that term degenerates to a pure
//! difference `−½(w(x+δ) − w(x))` of the integrand and is worth watching on
//! its own.
//!
//! # Exactness window
//!
//! The solvers march on an extended window of `M = out_radius + n_steps + 4`
//! sites. One step of `T^δ` consumes one site of boundary, so row `k` is the
//! exact whole-line solution on `|site| ≤ M − k` and is stored as zero
//! outside that cone. The margin of 4 keeps every convolution, every
//! summation-by-parts probe, and every `v^δ` probe strictly inside the exact
//! region: all kernel sums are evaluated untruncated, and no boundary
//! condition is ever imposed. The price is that the drift field must cover
//! the extended window, which [`solver_window`] checks up front.

use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::RescaledEnvironment;
use crate::kernel::KernelTable;
use crate::{Error, Result};

/// A quenched drift field `U̇^δ` sampled on a symmetric site window.
///
/// The solvers only ever read `δ`, `σ²`, and per-site drift values, so any
/// elliptic environment — sampled or handcrafted — can drive them.
pub trait DriftField {
    /// Grid mesh `δ`.
    fn delta(&self) -> f64;
    /// Jump mass `σ² = 1 − ε` (the stay probability is `ε`).
    fn sigma_sq(&self) -> f64;
    /// Half-width of the site window on which the drift is defined.
    fn radius(&self) -> i64;
    /// `U̇^δ` at `site ∈ [−radius, radius]`. May panic outside the window.
    fn u_dot_at(&self, site: i64) -> f64;
}

impl DriftField for RescaledEnvironment {
    fn delta(&self) -> f64 {
        self.delta
    }

    fn sigma_sq(&self) -> f64 {
        RescaledEnvironment::sigma_sq(self)
    }

    fn radius(&self) -> i64 {
        self.radius as i64
    }

    fn u_dot_at(&self, site: i64) -> f64 {
        self.u_dot[(site + self.radius as i64) as usize]
    }
}

/// A handcrafted drift field, mostly for controlled experiments (zero drift,
/// single defects, deterministic profiles).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CustomDrift {
    delta: f64,
    sigma_sq: f64,
    u_dot: Vec<f64>,
}

impl CustomDrift {
    /// Wrap an explicit per-site drift vector (odd length, centered at 0).
    ///
    /// Every entry must satisfy `|U̇| ≤ σ²` so that both jump probabilities
    /// stay non-negative.
    pub fn new(delta: f64, sigma_sq: f64, u_dot: Vec<f64>) -> Result<Self> {
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "delta must lie in (0,1], got {delta}"
            )));
        }
        if !(sigma_sq > 0.0 && sigma_sq < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma_sq must lie in (0,1), got {sigma_sq}"
            )));
        }
        if u_dot.len() % 2 == 0 || u_dot.len() < 3 {
            return Err(Error::InvalidParameter(format!(
                "drift window must have odd length >= 3, got {}",
                u_dot.len()
            )));
        }
        if let Some(bad) = u_dot.iter().find(|u| !(u.abs() <= sigma_sq)) {
            return Err(Error::Ellipticity(format!(
                "|U̇| = {} exceeds sigma_sq = {sigma_sq}",
                bad.abs()
            )));
        }
        Ok(CustomDrift {
            delta,
            sigma_sq,
            u_dot,
        })
    }

    /// The driftless (free) field on `[−radius, radius]`.
    pub fn free(delta: f64, sigma_sq: f64, radius: i64) -> Result<Self> {
        if radius < 1 {
            return Err(Error::InvalidParameter(format!(
                "window radius must be >= 1, got {radius}"
            )));
        }
        Self::new(delta, sigma_sq, vec![0.0; (2 * radius + 1) as usize])
    }
}

impl DriftField for CustomDrift {
    fn delta(&self) -> f64 {
        self.delta
    }

    fn sigma_sq(&self) -> f64 {
        self.sigma_sq
    }

    fn radius(&self) -> i64 {
        (self.u_dot.len() as i64 - 1) / 2
    }

    fn u_dot_at(&self, site: i64) -> f64 {
        self.u_dot[(site + self.radius()) as usize]
    }
}

/// A space–time grid function `f_{t_k}(xδ)`, stored densely on the extended
/// solver window.
///
/// Row `k` holds the exact whole-line solution for `|site| ≤ radius − k` and
/// zeros outside that cone; the region `|site| ≤ valid_radius` is exact at
/// *every* stored time, which is the contract downstream consumers rely on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridFunction {
    delta: f64,
    radius: i64,
    valid_radius: i64,
    values: Vec<Vec<f64>>,
}

/// Minimal JSON sidecar written next to a binary [`GridFunction`] dump.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GridSidecar {
    pub delta: f64,
    #[serde(rename = "N")]
    pub n_steps: usize,
    /// Half-width of the stored window, in sites.
    pub window: i64,
}

impl GridFunction {
    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Half-width of the stored window, in sites.
    pub fn radius(&self) -> i64 {
        self.radius
    }

    /// Half-width of the window that is exact at every time slice.
    pub fn valid_radius(&self) -> i64 {
        self.valid_radius
    }

    /// Number of time steps `N` (there are `N + 1` stored slices).
    pub fn n_steps(&self) -> usize {
        self.values.len() - 1
    }

    pub fn time_of(&self, k: usize) -> f64 {
        k as f64 * self.delta * self.delta
    }

    /// `f_{t_k}(site·δ)`. Panics outside the stored window.
    pub fn value(&self, k: usize, site: i64) -> f64 {
        assert!(
            site.abs() <= self.radius,
            "site {site} outside stored window ±{}",
            self.radius
        );
        self.values[k][(site + self.radius) as usize]
    }

    /// Dense row `k`, indexed by `site + radius`.
    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k]
    }

    /// Sup norm over the valid region, all time slices.
    pub fn sup_norm(&self) -> f64 {
        let mut sup = 0.0f64;
        for row in &self.values {
            for site in -self.valid_radius..=self.valid_radius {
                sup = sup.max(row[(site + self.radius) as usize].abs());
            }
        }
        sup
    }

    /// Dump the dense table as row-major little-endian `f64` (rows
    /// `k = 0..=N`, columns `site = −radius..=radius`) plus a JSON sidecar
    /// `{delta, N, window}`.
    pub fn write_binary(&self, data_path: &Path, sidecar_path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(data_path)?);
        for row in &self.values {
            for v in row {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        let sidecar = GridSidecar {
            delta: self.delta,
            n_steps: self.n_steps(),
            window: self.radius,
        };
        std::fs::write(sidecar_path, serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }
}

/// Sup distance between two solutions over the common valid region and all
/// time slices. The grids must share `δ` and the number of steps.
pub fn sup_distance(a: &GridFunction, b: &GridFunction) -> Result<f64> {
    if (a.delta - b.delta).abs() > 1e-12 * a.delta {
        return Err(Error::GridMismatch(format!(
            "mesh sizes differ: {} vs {}",
            a.delta, b.delta
        )));
    }
    if a.n_steps() != b.n_steps() {
        return Err(Error::GridMismatch(format!(
            "step counts differ: {} vs {}",
            a.n_steps(),
            b.n_steps()
        )));
    }
    let r = a.valid_radius.min(b.valid_radius);
    let mut sup = 0.0f64;
    for k in 0..=a.n_steps() {
        for site in -r..=r {
            sup = sup.max((a.value(k, site) - b.value(k, site)).abs());
        }
    }
    Ok(sup)
}

// ---------------------------------------------------------------------------
// Built-in data profiles.
// ---------------------------------------------------------------------------

/// `exp(−(x−center)²/(2 width²))`. `width` must be positive.
pub fn gaussian_bump(center: f64, width: f64) -> impl Fn(f64) -> f64 + Copy {
    assert!(width > 0.0, "width must be positive");
    move |x| {
        let z = (x - center) / width;
        (-0.5 * z * z).exp()
    }
}

/// `cos(wavenumber · x)`.
pub fn cosine(wavenumber: f64) -> impl Fn(f64) -> f64 + Copy {
    move |x| (wavenumber * x).cos()
}

/// The smooth compactly supported mollifier `exp(1 − 1/(1 − (x/h)²))` on
/// `|x| < h`, zero outside. `half_width` must be positive.
pub fn compact_bump(half_width: f64) -> impl Fn(f64) -> f64 + Copy {
    assert!(half_width > 0.0, "half_width must be positive");
    move |x| {
        let r = x / half_width;
        let s = 1.0 - r * r;
        if s > 0.0 {
            (1.0 - 1.0 / s).exp()
        } else {
            0.0
        }
    }
}

/// The cubic `c₀ + c₁x + c₂x² + c₃x³` (Horner form).
pub fn polynomial(coeffs: [f64; 4]) -> impl Fn(f64) -> f64 + Copy {
    move |x| ((coeffs[3] * x + coeffs[2]) * x + coeffs[1]) * x + coeffs[0]
}

// ---------------------------------------------------------------------------
// Shared solver plumbing.
// ---------------------------------------------------------------------------

/// Validate a solve request and return the extended window half-width `M`.
fn solver_window<D: DriftField + ?Sized>(
    drift: &D,
    n_steps: usize,
    out_radius: i64,
) -> Result<i64> {
    if n_steps == 0 {
        return Err(Error::InvalidParameter(
            "n_steps must be at least 1".into(),
        ));
    }
    if out_radius < 0 {
        return Err(Error::InvalidParameter(format!(
            "out_radius must be non-negative, got {out_radius}"
        )));
    }
    let m = out_radius + n_steps as i64 + 4;
    if drift.radius() < m {
        return Err(Error::InvalidParameter(format!(
            "drift window radius {} is too small: out_radius {out_radius} plus \
             {n_steps} steps needs at least {m} sites so every stencil stays \
             inside the exact light cone",
            drift.radius()
        )));
    }
    Ok(m)
}

fn sample_profile<F: Fn(f64) -> f64>(f: &F, delta: f64, m: i64) -> Vec<f64> {
    (-m..=m).map(|s| f(s as f64 * delta)).collect()
}

fn sample_forcing<G: Fn(f64, f64) -> f64>(g: &G, t: f64, delta: f64, m: i64) -> Vec<f64> {
    (-m..=m).map(|s| g(t, s as f64 * delta)).collect()
}

/// The drift integrand `h_ℓ(y) = U̇^δ(y) ∇̂^δ f_{t_ℓ}(y)`, exact on the cone
/// `|site| ≤ m − ℓ − 1` and zero outside.
fn drift_times_central_gradient(
    row: &[f64],
    u_dot: &[f64],
    m: i64,
    ell: usize,
    delta: f64,
) -> Vec<f64> {
    let cone = m - ell as i64 - 1;
    let mut h = vec![0.0; row.len()];
    for site in -cone..=cone {
        let i = (site + m) as usize;
        h[i] = u_dot[i] * (row[i + 1] - row[i - 1]) / (2.0 * delta);
    }
    h
}

/// Forward, second, and twisted kernel-gradient stencils for
/// `p^d_n`, `n = 0..=depth`, expressed on site offsets:
///
/// * `dp[n][i]  = (p_n(d+1) − p_n(d))/δ` for `d = i − (n+1)`,
/// * `d2p[n][i] = (p_n(d+1) + p_n(d−1) − 2p_n(d))/δ²` for `d = i − (n+1)`,
/// * `dcp[n][i] = (p_n(d+2) − p_n(d+1) − p_n(d) + p_n(d−1))/(2δ²)` for
///   `d = i − (n+2)` — this is `(∇p(d+1) − ∇p(d−1))/(2δ)`.
#[allow(clippy::type_complexity)]
fn gradient_stencils(
    table: &KernelTable,
    depth: usize,
    delta: f64,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let dd = delta * delta;
    let mut dp = Vec::with_capacity(depth + 1);
    let mut d2p = Vec::with_capacity(depth + 1);
    let mut dcp = Vec::with_capacity(depth + 1);
    for n in 0..=depth {
        let v = |d: i64| table.value(n, d);
        let base = n as i64;
        dp.push(
            (0..2 * n + 2)
                .map(|i| {
                    let d = i as i64 - base - 1;
                    (v(d + 1) - v(d)) / delta
                })
                .collect::<Vec<f64>>(),
        );
        d2p.push(
            (0..2 * n + 3)
                .map(|i| {
                    let d = i as i64 - base - 1;
                    (v(d + 1) + v(d - 1) - 2.0 * v(d)) / dd
                })
                .collect::<Vec<f64>>(),
        );
        dcp.push(
            (0..2 * n + 4)
                .map(|i| {
                    let d = i as i64 - base - 2;
                    (v(d + 2) - v(d + 1) - v(d) + v(d - 1)) / (2.0 * dd)
                })
                .collect::<Vec<f64>>(),
        );
    }
    (dp, d2p, dcp)
}

fn check_table<D: DriftField + ?Sized>(
    drift: &D,
    table: &KernelTable,
    needed_depth: usize,
) -> Result<()> {
    let eps = 1.0 - drift.sigma_sq();
    if (table.epsilon() - eps).abs() > 1e-12 {
        return Err(Error::GridMismatch(format!(
            "kernel table laziness {} does not match the drift field's {eps}",
            table.epsilon()
        )));
    }
    if table.n_max() < needed_depth {
        return Err(Error::InvalidParameter(format!(
            "kernel table depth {} is too shallow, need {needed_depth}",
            table.n_max()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Solvers.
// ---------------------------------------------------------------------------

/// March the recursion `f_{t_{j+1}} = T^δ f_{t_j} + δ² g_{t_j}` literally.
///
/// The result is exact (up to rounding) on `|site| ≤ out_radius` at every
/// time `t_0, …, t_N`; see the module notes on the light-cone window.
pub fn solve_direct<D, F0, G>(
    drift: &D,
    f0: F0,
    g: G,
    n_steps: usize,
    out_radius: i64,
) -> Result<GridFunction>
where
    D: DriftField + ?Sized,
    F0: Fn(f64) -> f64,
    G: Fn(f64, f64) -> f64,
{
    let m = solver_window(drift, n_steps, out_radius)?;
    let delta = drift.delta();
    let dd = delta * delta;
    let s2 = drift.sigma_sq();
    let eps = 1.0 - s2;
    let width = (2 * m + 1) as usize;
    let u_dot: Vec<f64> = (-m..=m).map(|s| drift.u_dot_at(s)).collect();

    let mut values = Vec::with_capacity(n_steps + 1);
    values.push(sample_profile(&f0, delta, m));
    for k in 0..n_steps {
        let t_k = k as f64 * dd;
        let cone = m - k as i64 - 1;
        let mut next = vec![0.0; width];
        {
            let cur = &values[k];
            for site in -cone..=cone {
                let i = (site + m) as usize;
                let plus = 0.5 * (s2 + u_dot[i]);
                let minus = 0.5 * (s2 - u_dot[i]);
                next[i] = plus * cur[i + 1]
                    + minus * cur[i - 1]
                    + eps * cur[i]
                    + dd * g(t_k, site as f64 * delta);
            }
        }
        values.push(next);
    }
    Ok(GridFunction {
        delta,
        radius: m,
        valid_radius: out_radius,
        values,
    })
}

/// Evaluate the mild (Duhamel) form slice by slice, driving everything with
/// the free-kernel table and the central-gradient drift term.
///
/// Each slice is produced by forward substitution from the *mild* values of
/// the earlier slices, never from [`solve_direct`], so the two solvers agree
/// only if the operator splitting behind the mild form is implemented
/// correctly. All spatial sums run over the kernel's full support.
pub fn solve_mild<D, F0, G>(
    drift: &D,
    f0: F0,
    g: G,
    n_steps: usize,
    out_radius: i64,
    table: &KernelTable,
) -> Result<GridFunction>
where
    D: DriftField + ?Sized,
    F0: Fn(f64) -> f64,
    G: Fn(f64, f64) -> f64,
{
    let m = solver_window(drift, n_steps, out_radius)?;
    check_table(drift, table, n_steps)?;
    let delta = drift.delta();
    let dd = delta * delta;
    let width = (2 * m + 1) as usize;
    let u_dot: Vec<f64> = (-m..=m).map(|s| drift.u_dot_at(s)).collect();

    let f0row = sample_profile(&f0, delta, m);
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(n_steps + 1);
    let mut grows: Vec<Vec<f64>> = Vec::with_capacity(n_steps);
    let mut g_zero: Vec<bool> = Vec::with_capacity(n_steps);
    let mut hrows: Vec<Vec<f64>> = Vec::with_capacity(n_steps);

    values.push(f0row.clone());
    hrows.push(drift_times_central_gradient(
        &values[0], &u_dot, m, 0, delta,
    ));

    for j in 1..=n_steps {
        let grow = sample_forcing(&g, (j - 1) as f64 * dd, delta, m);
        g_zero.push(grow.iter().all(|&v| v == 0.0));
        grows.push(grow);

        let cone = m - j as i64;
        let lo = (m - cone) as usize;
        let hi = (m + cone) as usize;
        let mut next = vec![0.0; width];
        {
            let grows = &grows;
            let g_zero = &g_zero;
            let hrows = &hrows;
            let f0row = &f0row;
            next[lo..=hi]
                .par_iter_mut()
                .enumerate()
                .for_each(|(off, slot)| {
                    let i = lo + off;
                    // Free propagation of the initial condition.
                    let pj = table.support_row(j);
                    let mut acc = 0.0;
                    for (u, &p) in pj.iter().enumerate() {
                        acc += p * f0row[i + u - j];
                    }
                    // Forcing and drift terms, paired as t_{j−1} − t_ℓ.
                    for (l, hl) in hrows.iter().enumerate().take(j) {
                        let mrev = j - 1 - l;
                        let pm = table.support_row(mrev);
                        let base = i - mrev;
                        let mut hsum = 0.0;
                        for (u, &p) in pm.iter().enumerate() {
                            hsum += p * hl[base + u];
                        }
                        acc += delta * hsum;
                        if !g_zero[l] {
                            let gl = &grows[l];
                            let mut gsum = 0.0;
                            for (u, &p) in pm.iter().enumerate() {
                                gsum += p * gl[base + u];
                            }
                            acc += dd * gsum;
                        }
                    }
                    *slot = acc;
                });
        }
        hrows.push(drift_times_central_gradient(&next, &u_dot, m, j, delta));
        values.push(next);
    }
    Ok(GridFunction {
        delta,
        radius: m,
        valid_radius: out_radius,
        values,
    })
}

// ---------------------------------------------------------------------------
// Summation by parts.
// ---------------------------------------------------------------------------

/// Residuals of the summation-by-parts identities, maximized over all time
/// slices, all probe sites `|x| ≤ probe_radius`, and all supplied anchors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IbpReport {
    pub n_steps: usize,
    pub probe_radius: i64,
    /// Anchor sites `a/δ` the rewrite was evaluated at.
    pub anchors: Vec<i64>,
    /// `max |J_{t_j}(x) − ibp form|`.
    pub j_residual: f64,
    /// `max |∇^δ J_{t_j}(x) − second-gradient ibp form|`.
    pub grad_residual: f64,
    /// `max |∇̂^δ J_{t_j}(x) − twisted-gradient ibp form|`.
    pub twisted_residual: f64,
    /// `max` over probes of the spread of the ibp form across anchors.
    pub a_independence: f64,
    /// Sup norm of the underlying solution, for scaling tolerances.
    pub f_sup: f64,
}

/// Verify the summation-by-parts rewrite of the mild drift term on a solved
/// grid function.
///
/// `f` must come from [`solve_direct`] or [`solve_mild`] with the same drift
/// (the cone layout of its rows is assumed). For every time slice `t_j`, the
/// drift part `J_{t_j}` is evaluated directly and through the anchored
/// rewrite for each `a` in `anchors`; the gradient identities obtained by
/// applying `∇^δ` and `∇̂^δ` in `x` are checked alongside. Everything is
/// reported as a max residual — the identities are exact, so any residual
/// beyond rounding noise is a bug in one of the two summation orders.
pub fn ibp_identity_check<D: DriftField + ?Sized>(
    drift: &D,
    f: &GridFunction,
    table: &KernelTable,
    anchors: &[i64],
) -> Result<IbpReport> {
    let n = f.n_steps();
    if n == 0 {
        return Err(Error::InvalidParameter(
            "the solution has no time steps to check".into(),
        ));
    }
    if anchors.is_empty() {
        return Err(Error::InvalidParameter(
            "need at least one anchor site".into(),
        ));
    }
    let delta = drift.delta();
    if (f.delta() - delta).abs() > 1e-12 * delta {
        return Err(Error::GridMismatch(format!(
            "solution mesh {} does not match the drift field's {delta}",
            f.delta()
        )));
    }
    if drift.radius() < f.radius() {
        return Err(Error::GridMismatch(format!(
            "drift window {} is narrower than the solution window {}",
            drift.radius(),
            f.radius()
        )));
    }
    check_table(drift, table, n - 1)?;
    let m = f.radius();
    for &a in anchors {
        if a.abs() > f.valid_radius() {
            return Err(Error::InvalidParameter(format!(
                "anchor site {a} lies outside the valid window ±{}",
                f.valid_radius()
            )));
        }
    }
    let px = f.valid_radius().min(24);
    let dd = delta * delta;
    let u_dot: Vec<f64> = (-m..=m).map(|s| drift.u_dot_at(s)).collect();

    // Drift integrand rows and their prefix sums: I(a, y) = C(y) − C(a+δ).
    let h: Vec<Vec<f64>> = (0..n)
        .map(|l| drift_times_central_gradient(f.row(l), &u_dot, m, l, delta))
        .collect();
    let c: Vec<Vec<f64>> = h
        .iter()
        .map(|row| {
            let mut acc = 0.0;
            row.iter()
                .map(|&v| {
                    acc += v;
                    acc
                })
                .collect()
        })
        .collect();
    let (dp, d2p, dcp) = gradient_stencils(table, n - 1, delta);

    let (j_residual, grad_residual, twisted_residual, a_independence) = (1..=n)
        .into_par_iter()
        .map(|j| {
            let mut jres = 0.0f64;
            let mut gres = 0.0f64;
            let mut tres = 0.0f64;
            let mut aind = 0.0f64;
            // Direct evaluation of J on a band one site wider than the probes,
            // so its forward and central gradients exist at every probe.
            let bw = (2 * (px + 1) + 1) as usize;
            let mut jd = vec![0.0f64; bw];
            for (bx, slot) in jd.iter_mut().enumerate() {
                let x = bx as i64 - px - 1;
                let mut acc = 0.0;
                for (l, hl) in h.iter().enumerate().take(j) {
                    let mrev = j - 1 - l;
                    let pm = table.support_row(mrev);
                    let base = (x - mrev as i64 + m) as usize;
                    let mut s = 0.0;
                    for (u, &p) in pm.iter().enumerate() {
                        s += p * hl[base + u];
                    }
                    acc += s;
                }
                *slot = delta * acc;
            }
            for x in -px..=px {
                let bx = (x + px + 1) as usize;
                let grad_lhs = (jd[bx + 1] - jd[bx]) / delta;
                let twist_lhs = (jd[bx + 1] - jd[bx - 1]) / (2.0 * delta);
                let mut jmin = f64::INFINITY;
                let mut jmax = f64::NEG_INFINITY;
                for &a in anchors {
                    let ca_idx = (a + 1 + m) as usize;
                    let mut ji = 0.0;
                    let mut gi = 0.0;
                    let mut ti = 0.0;
                    for (l, cl) in c.iter().enumerate().take(j) {
                        let mrev = j - 1 - l;
                        let ca = cl[ca_idx];
                        // J rewrite: offsets d = i − (mrev+1), y = x − δ − dδ.
                        let ybase = x + mrev as i64 + m;
                        let mut s = 0.0;
                        for (i, &w) in dp[mrev].iter().enumerate() {
                            s += w * (cl[(ybase - i as i64) as usize] - ca);
                        }
                        ji += s;
                        // Gradient rewrites share the shifted base y = x − dδ
                        // (forward) and y = x − δ − dδ (twisted), which land on
                        // the same index once the stencil offsets are folded in.
                        let yb2 = ybase + 1;
                        let mut s2 = 0.0;
                        for (i, &w) in d2p[mrev].iter().enumerate() {
                            s2 += w * (cl[(yb2 - i as i64) as usize] - ca);
                        }
                        gi += s2;
                        let mut s3 = 0.0;
                        for (i, &w) in dcp[mrev].iter().enumerate() {
                            s3 += w * (cl[(yb2 - i as i64) as usize] - ca);
                        }
                        ti += s3;
                    }
                    let jval = dd * ji;
                    jres = jres.max((jd[bx] - jval).abs());
                    gres = gres.max((grad_lhs - dd * gi).abs());
                    tres = tres.max((twist_lhs - dd * ti).abs());
                    jmin = jmin.min(jval);
                    jmax = jmax.max(jval);
                }
                aind = aind.max(jmax - jmin);
            }
            (jres, gres, tres, aind)
        })
        .reduce(
            || (0.0, 0.0, 0.0, 0.0),
            |a, b| (a.0.max(b.0), a.1.max(b.1), a.2.max(b.2), a.3.max(b.3)),
        );

    Ok(IbpReport {
        n_steps: n,
        probe_radius: px,
        anchors: anchors.to_vec(),
        j_residual,
        grad_residual,
        twisted_residual,
        a_independence,
        f_sup: f.sup_norm(),
    })
}

// ---------------------------------------------------------------------------
// The gradient process v^δ.
// ---------------------------------------------------------------------------

/// Residuals of the closed `v^δ` equation over the probe region.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VResidualReport {
    pub n_steps: usize,
    pub probe_radius: i64,
    /// `max |v − (η + drift term)|` with the full `j = 0..k−1` sum.
    pub residual: f64,
    /// Same residual with the `j = 0` summand dropped.
    pub residual_without_j0: f64,
    /// `max |j = 0 summand|` — the point-mass kernel term, reported alone.
    pub j0_magnitude: f64,
    /// Sup norm of `v^δ` over the valid region, for scaling tolerances.
    pub v_sup: f64,
}

/// The forward gradient `v^δ = ∇^δ f` together with the residual report of
/// the closed equation it satisfies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VDeltaSolution {
    pub v: GridFunction,
    /// Jump mass `σ²` of the driving walk, needed by the Gubinelli derivative.
    pub sigma_sq: f64,
    pub report: VResidualReport,
}

impl VDeltaSolution {
    /// The space–time interpolant `ṽ`.
    pub fn interpolant(&self) -> VTilde<'_> {
        interpolate_solution(&self.v)
    }

    /// The Gubinelli derivative `∂ṽ = −(2/σ²) ṽ` of the interpolant viewed as
    /// a path controlled by the interpolated noise `Û₁^δ`.
    pub fn gubinelli_derivative(&self, t: f64, x: f64) -> Result<f64> {
        Ok(-2.0 / self.sigma_sq * self.interpolant().eval(t, x)?)
    }
}

/// Build `v^δ_t = ∇^δ f_t` by solving the parabolic problem and verify,
/// on a probe region, the closed equation driven by `Ū^δ` and the
/// density-normalized kernel gradients (see the module notes).
///
/// The drift sum couples times as `∇^{2,δ} p̂_{t_j} · I_{t_{k−1}−t_j}` with
/// the anchor of `I` pinned at the evaluation point `x` itself. The `j = 0`
/// summand — a point-mass kernel acting as a pure second difference — is
/// tracked separately in the report, both inside the full residual and
/// excluded from it, so its effect is visible rather than averaged away.
pub fn build_v_delta<D, F0, G>(
    drift: &D,
    f0: F0,
    g: G,
    n_steps: usize,
    out_radius: i64,
    table: &KernelTable,
) -> Result<VDeltaSolution>
where
    D: DriftField + ?Sized,
    F0: Fn(f64) -> f64,
    G: Fn(f64, f64) -> f64,
{
    let f = solve_direct(drift, &f0, &g, n_steps, out_radius)?;
    check_table(drift, table, n_steps)?;
    let n = n_steps;
    let delta = drift.delta();
    let dd = delta * delta;
    let d3 = dd * delta;
    let m = f.radius();
    let width = (2 * m + 1) as usize;

    // v rows on the shrinking cone (one site narrower than f's).
    let mut vrows: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let cone = m - k as i64 - 1;
        let row = f.row(k);
        let mut vrow = vec![0.0; width];
        for site in -cone..=cone {
            let i = (site + m) as usize;
            vrow[i] = (row[i + 1] - row[i]) / delta;
        }
        vrows.push(vrow);
    }

    // Ū^δ = −2U̇^δ and the prefix sums of w_t(z) = ½(v_t(z) + v_t(z−δ))Ū^δ(z),
    // so that I_t(x, y) = C_t(y) − C_t(x−δ) for every y (signed below x).
    let u_bar: Vec<f64> = (-m..=m).map(|s| -2.0 * drift.u_dot_at(s)).collect();
    let cpre: Vec<Vec<f64>> = (0..n)
        .map(|t| {
            let vt = &vrows[t];
            let mut acc = 0.0;
            (0..width)
                .map(|i| {
                    let prev = if i > 0 { vt[i - 1] } else { 0.0 };
                    acc += 0.5 * (vt[i] + prev) * u_bar[i];
                    acc
                })
                .collect()
        })
        .collect();

    let (dp, d2p, _) = gradient_stencils(table, n, delta);
    let f0row = sample_profile(&f0, delta, m);
    let grows: Vec<Vec<f64>> = (0..n)
        .map(|l| sample_forcing(&g, l as f64 * dd, delta, m))
        .collect();

    let rp = out_radius.min(16);
    let (residual, residual_without_j0, j0_magnitude) = (1..=n)
        .into_par_iter()
        .map(|k| {
            let mut res = 0.0f64;
            let mut res_no_j0 = 0.0f64;
            let mut j0_mag = 0.0f64;
            for x in -rp..=rp {
                // η: initial data under δ∇^{1,δ}p̂_{t_k}, forcing under δ³∇^{1,δ}p̂_{t_j}.
                let mut eta1 = 0.0;
                let ybase0 = x + k as i64 + 1 + m;
                for (i, &w) in dp[k].iter().enumerate() {
                    eta1 += (w / delta) * f0row[(ybase0 - i as i64) as usize];
                }
                let mut eta2 = 0.0;
                let mut mv = 0.0;
                let mut mv_j0 = 0.0;
                for jj in 0..k {
                    let tl = k - 1 - jj;
                    let cl = &cpre[tl];
                    let cax = cl[(x - 1 + m) as usize];
                    let ybase = x + jj as i64 + 1 + m;
                    let gl = &grows[tl];
                    let mut s = 0.0;
                    for (i, &w) in dp[jj].iter().enumerate() {
                        s += (w / delta) * gl[(ybase - i as i64) as usize];
                    }
                    eta2 += s;
                    let mut s2 = 0.0;
                    for (i, &w) in d2p[jj].iter().enumerate() {
                        s2 += (w / delta) * (cl[(ybase - i as i64) as usize] - cax);
                    }
                    mv += s2;
                    if jj == 0 {
                        mv_j0 = s2;
                    }
                }
                let eta = delta * eta1 + d3 * eta2;
                let drift_full = -0.5 * d3 * mv;
                let drift_j0 = -0.5 * d3 * mv_j0;
                let vkx = vrows[k][(x + m) as usize];
                res = res.max((vkx - (eta + drift_full)).abs());
                res_no_j0 = res_no_j0.max((vkx - (eta + drift_full - drift_j0)).abs());
                j0_mag = j0_mag.max(drift_j0.abs());
            }
            (res, res_no_j0, j0_mag)
        })
        .reduce(
            || (0.0, 0.0, 0.0),
            |a, b| (a.0.max(b.0), a.1.max(b.1), a.2.max(b.2)),
        );

    let v = GridFunction {
        delta,
        radius: m,
        valid_radius: out_radius,
        values: vrows,
    };
    let v_sup = v.sup_norm();
    Ok(VDeltaSolution {
        v,
        sigma_sq: drift.sigma_sq(),
        report: VResidualReport {
            n_steps: n,
            probe_radius: rp,
            residual,
            residual_without_j0,
            j0_magnitude,
            v_sup,
        },
    })
}

// ---------------------------------------------------------------------------
// Space–time interpolation.
// ---------------------------------------------------------------------------

/// The piecewise-linear space–time interpolant `ṽ` of a grid function.
///
/// Conventions: in space, `x ∈ (x₁, x₂]` interpolates the anchors at `x₁, x₂`;
/// in time, `t ∈ (t₁, t₂]` interpolates the slices at `t₁, t₂`, and the whole
/// band `t < δ²` (including `t = 0`) is clamped to the slice at `δ²`. Points
/// within `10⁻⁹` of a grid line snap onto it.
#[derive(Debug, Clone, Copy)]
pub struct VTilde<'a> {
    grid: &'a GridFunction,
}

/// Wrap a grid function in its space–time interpolant.
pub fn interpolate_solution(grid: &GridFunction) -> VTilde<'_> {
    VTilde { grid }
}

impl VTilde<'_> {
    /// Evaluate `ṽ_t(x)`; errors outside `[0, Nδ²] × [−valid·δ, valid·δ]`.
    pub fn eval(&self, t: f64, x: f64) -> Result<f64> {
        let g = self.grid;
        let n = g.n_steps();
        if n == 0 {
            return Err(Error::Unsupported(
                "interpolation needs at least one time step (the band t < δ² \
                 clamps to the slice at δ²)"
                    .into(),
            ));
        }
        let dd = g.delta * g.delta;
        let s = t / dd;
        if !t.is_finite() || s < -1e-9 || s > n as f64 + 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "time {t} outside the solved range [0, {}]",
                n as f64 * dd
            )));
        }
        let pos = x / g.delta;
        let vr = g.valid_radius as f64;
        if !x.is_finite() || pos < -vr - 1e-9 || pos > vr + 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "position {x} outside the valid window [{}, {}]",
                -vr * g.delta,
                vr * g.delta
            )));
        }
        let pos = pos.clamp(-vr, vr);
        let space = |row: &[f64]| -> f64 {
            let snapped = pos.round();
            if (pos - snapped).abs() <= 1e-9 {
                row[(snapped as i64 + g.radius) as usize]
            } else {
                let i1 = pos.floor() as i64;
                let w = pos - i1 as f64;
                row[(i1 + g.radius) as usize] * (1.0 - w)
                    + row[(i1 + 1 + g.radius) as usize] * w
            }
        };
        if s < 1.0 - 1e-9 {
            // The band t < δ² clamps onto the first genuine slice.
            return Ok(space(g.row(1)));
        }
        let k2 = (s - 1e-9).ceil().max(1.0).min(n as f64) as usize;
        let w2 = (s - (k2 as f64 - 1.0)).min(1.0);
        Ok((1.0 - w2) * space(g.row(k2 - 1)) + w2 * space(g.row(k2)))
    }
}
