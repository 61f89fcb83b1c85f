//! The lazy Sinai walk on a rescaled environment.
//!
//! The walk `X^δ` lives on `δℤ` with time step `δ²`: from site `x` it stays
//! put with probability `ε` and moves to `x ± δ` with probabilities
//! `ω^{±,δ}(x)`. Steps are driven by a pair of uniforms `(U_j, V_j)` per
//! time index, the *common-uniform construction*: `U_j` decides lazy/move
//! and `V_j` picks the direction against the site-dependent threshold
//! `ω^{+,δ}(x)/σ²`. Replacing that threshold by `1/2` yields the symmetric
//! companion walk driven by the same uniforms, which is what makes the
//! stochastic-integral decomposition of the martingale increments an exact
//! pathwise identity rather than one in distribution.
//!
//! Quenched expectations are computed by exact operator iteration (no Monte
//! Carlo): the point mass at the start site is pushed forward `N = T/δ²`
//! times through the transition operator `T^δ`.

use rayon::prelude::*;

use crate::env::RescaledEnvironment;
use crate::numerics::compensated_sum;
use crate::rng::{indexed_rng, Namespace};
use crate::{Error, Result};

/// A sampled path of the rescaled walk: positions on `δℤ` at times
/// `t_j = jδ²`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    delta: f64,
    seed: u64,
    /// Lattice sites `X_{t_j}/δ`, including the start site at `j = 0`.
    sites: Vec<i64>,
}

impl Trajectory {
    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of steps (one less than the number of recorded positions).
    pub fn steps(&self) -> usize {
        self.sites.len() - 1
    }

    pub fn sites(&self) -> &[i64] {
        &self.sites
    }

    /// Position `X_{t_j}` in real coordinates.
    pub fn position(&self, j: usize) -> f64 {
        self.sites[j] as f64 * self.delta
    }

    /// Dumps the path as CSV rows `t,x`.
    pub fn write_csv<W: std::io::Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["t", "x"])?;
        let step = self.delta * self.delta;
        for (j, &site) in self.sites.iter().enumerate() {
            w.write_record(&[
                format!("{}", j as f64 * step),
                format!("{}", site as f64 * self.delta),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Maps a real coordinate to its lattice site, refusing off-grid points.
fn site_of(x: f64, delta: f64) -> Result<i64> {
    let s = (x / delta).round();
    if (x - s * delta).abs() > 1e-9 * delta {
        return Err(Error::GridMismatch(format!(
            "position {x} is not on the grid delta * Z with delta = {delta}"
        )));
    }
    Ok(s as i64)
}

/// The uniform pair `(U_j, V_j)` driving step `j ≥ 1`; a pure function of
/// `(seed, j)` so independent consumers can replay the same randomness.
fn step_uniforms(seed: u64, j: u64) -> (f64, f64) {
    use rand::Rng;
    let mut rng = indexed_rng(seed, Namespace::WalkSteps, j as i64);
    (rng.gen::<f64>(), rng.gen::<f64>())
}

/// One-step transition law `(p_left, p_stay, p_right) = (ω^{−,δ}, ε, ω^{+,δ})`
/// at position `x`; both neighbours must lie inside the window.
pub fn step_distribution(renv: &RescaledEnvironment, x: f64) -> Result<(f64, f64, f64)> {
    let site = site_of(x, renv.delta)?;
    let r = renv.radius as i64;
    if site <= -r || site >= r {
        return Err(Error::InvalidParameter(format!(
            "site {site} has a neighbour outside the window [-{r}, {r}]"
        )));
    }
    let plus = renv.omega_plus_at(site)?;
    Ok((renv.sigma_sq() - plus, renv.epsilon(), plus))
}

/// Read-only view of the transition operator `T^δ` over a shared
/// environment.
///
/// `T^δ f(x) = ω^{+,δ}(x) f(x+δ) + ω^{−,δ}(x) f(x−δ) + ε f(x)`; each row is
/// a probability vector, so `apply` preserves constants exactly.
pub struct TransitionOperatorView<'a> {
    renv: &'a RescaledEnvironment,
}

impl<'a> TransitionOperatorView<'a> {
    pub fn new(renv: &'a RescaledEnvironment) -> Self {
        TransitionOperatorView { renv }
    }

    /// The row `(ω^{−,δ}, ε, ω^{+,δ})` at a lattice site.
    pub fn row(&self, site: i64) -> Result<(f64, f64, f64)> {
        let plus = self.renv.omega_plus_at(site)?;
        Ok((self.renv.sigma_sq() - plus, self.renv.epsilon(), plus))
    }

    /// Applies `T^δ` to a vector indexed by the centered site window
    /// `−s..=s` with `s = (len−1)/2 ≤ radius`. The result is defined on the
    /// interior `−(s−1)..=(s−1)`, so repeated application shrinks the window
    /// by one site per step — sizing the window is the caller's job.
    pub fn apply(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() < 3 || f.len() % 2 == 0 {
            return Err(Error::GridMismatch(format!(
                "operator input must have odd length >= 3, got {}",
                f.len()
            )));
        }
        let s = (f.len() as i64 - 1) / 2;
        if s > self.renv.radius as i64 {
            return Err(Error::GridMismatch(format!(
                "operator input spans sites +-{s}, outside window radius {}",
                self.renv.radius
            )));
        }
        let eps = self.renv.epsilon();
        let sigma_sq = self.renv.sigma_sq();
        let mut out = Vec::with_capacity(f.len() - 2);
        for site in (-s + 1)..s {
            let i = (site + s) as usize;
            let plus = self.renv.omega_plus_at(site)?;
            out.push(plus * f[i + 1] + (sigma_sq - plus) * f[i - 1] + eps * f[i]);
        }
        Ok(out)
    }
}

/// Simulates `steps` steps from `x0` under the common-uniform construction.
///
/// The window must make exit impossible: `radius ≥ |x0|/δ + steps`.
pub fn simulate_walk(
    renv: &RescaledEnvironment,
    steps: usize,
    x0: f64,
    seed: u64,
) -> Result<Trajectory> {
    let site0 = site_of(x0, renv.delta)?;
    let r = renv.radius as i64;
    if site0.unsigned_abs() as usize + steps > renv.radius {
        return Err(Error::InvalidParameter(format!(
            "window radius {} cannot contain {steps} steps from site {site0}",
            renv.radius
        )));
    }
    let eps = renv.epsilon();
    let sigma_sq = renv.sigma_sq();
    let mut sites = Vec::with_capacity(steps + 1);
    sites.push(site0);
    let mut site = site0;
    for j in 1..=steps {
        let (u, v) = step_uniforms(seed, j as u64);
        if u > eps {
            let plus = renv.omega_plus[(site + r) as usize];
            site += if v <= plus / sigma_sq { 1 } else { -1 };
        }
        sites.push(site);
    }
    Ok(Trajectory {
        delta: renv.delta,
        seed,
        sites,
    })
}

/// Exact quenched expectation `E^ω[h(X^δ_T)]` for a walk started at `x0`.
///
/// The distribution of `X^δ` is evolved forward through `T^δ` for
/// `N = T/δ²` exact steps — no Monte Carlo, the only error is rounding.
/// Requires `T` on the time grid and `radius ≥ |x0|/δ + N`.
pub fn quenched_expectation<H: Fn(f64) -> f64>(
    renv: &RescaledEnvironment,
    h: H,
    t_final: f64,
    x0: f64,
) -> Result<f64> {
    let d2 = renv.delta * renv.delta;
    let n = (t_final / d2).round();
    if n < 0.0 || (t_final - n * d2).abs() > 1e-9 * d2.max(t_final.abs()) {
        return Err(Error::GridMismatch(format!(
            "time {t_final} is not on the grid delta^2 * N with delta = {}",
            renv.delta
        )));
    }
    let n = n as usize;
    let site0 = site_of(x0, renv.delta)?;
    if site0.unsigned_abs() as usize + n > renv.radius {
        return Err(Error::InvalidParameter(format!(
            "window radius {} cannot contain {n} steps from site {site0}",
            renv.radius
        )));
    }
    let eps = renv.epsilon();
    let sigma_sq = renv.sigma_sq();
    let r = renv.radius as i64;

    // mass[i] holds the probability of site site0 - n + i.
    let offset = site0 - n as i64;
    let width = 2 * n + 1;
    let mut mass = vec![0.0f64; width];
    let mut next = vec![0.0f64; width];
    mass[n] = 1.0;
    // Active band of strictly positive entries, as indices into `mass`.
    let (mut lo, mut hi) = (n, n);
    for _ in 0..n {
        let new_lo = lo.saturating_sub(1);
        let new_hi = (hi + 1).min(width - 1);
        for slot in &mut next[new_lo..=new_hi] {
            *slot = 0.0;
        }
        for i in lo..=hi {
            let p = mass[i];
            if p == 0.0 {
                continue;
            }
            let site = offset + i as i64;
            let plus = renv.omega_plus[(site + r) as usize];
            next[i + 1] += p * plus;
            next[i - 1] += p * (sigma_sq - plus);
            next[i] += p * eps;
        }
        std::mem::swap(&mut mass, &mut next);
        lo = new_lo;
        hi = new_hi;
        // Underflowed edges contribute exact zeros; trim them.
        while lo < hi && mass[lo] == 0.0 {
            lo += 1;
        }
        while hi > lo && mass[hi] == 0.0 {
            hi -= 1;
        }
    }
    Ok(compensated_sum((lo..=hi).map(|i| {
        mass[i] * h((offset + i as i64) as f64 * renv.delta)
    })))
}

/// Writes a quenched-expectation sweep as CSV rows `delta,T,value`.
pub fn write_quenched_sweep_csv<W: std::io::Write>(
    rows: &[(f64, f64, f64)],
    sink: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["delta", "T", "value"])?;
    for (delta, t, value) in rows {
        w.write_record(&[format!("{delta}"), format!("{t}"), format!("{value:.17e}")])?;
    }
    w.flush()?;
    Ok(())
}

/// Applies the generator `L^δ = (T^δ − I)/δ²` to a full-window vector.
///
/// Both expressions — the definition and the drift/diffusion split
/// `L̄^δ f + δ^{−1} U̇^δ ∇̂^δ f` — are evaluated and their agreement is
/// asserted to `1e−10 ‖f‖_∞/δ²`; the result is defined on the interior
/// sites `−(r−1)..=(r−1)`.
pub fn generator_apply(renv: &RescaledEnvironment, f: &[f64]) -> Result<Vec<f64>> {
    let width = 2 * renv.radius + 1;
    if f.len() != width {
        return Err(Error::GridMismatch(format!(
            "generator input must cover the full window ({} sites), got {}",
            width,
            f.len()
        )));
    }
    let eps = renv.epsilon();
    let sigma_sq = renv.sigma_sq();
    let d2 = renv.delta * renv.delta;
    let sup = f.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let tol = 1e-10 * sup.max(1.0) / d2;
    let mut out = Vec::with_capacity(width - 2);
    for i in 1..width - 1 {
        let plus = renv.omega_plus[i];
        let direct = (plus * f[i + 1] + (sigma_sq - plus) * f[i - 1] + eps * f[i] - f[i]) / d2;
        let split = 0.5 * sigma_sq * (f[i + 1] - 2.0 * f[i] + f[i - 1]) / d2
            + renv.u_dot[i] * (f[i + 1] - f[i - 1]) / (2.0 * d2);
        if (direct - split).abs() > tol {
            return Err(Error::Numerical(format!(
                "generator split identity violated at index {i}: {direct} vs {split}"
            )));
        }
        out.push(direct);
    }
    Ok(out)
}

/// The martingale residual series `M` of a space-time test function along a
/// trajectory.
///
/// `M_{t_n} = f_{t_n}(X_{t_n}) − f_0(X_0) − Σ_{j<n} δ² [L^δ f_{t_j}(X_{t_j})
/// − ∇_t^δ f_{t_j}(X_{t_{j+1}})]`, following the space-time convention that
/// evaluates the discrete time derivative at the *next* position. For
/// time-independent `f` the increments reduce exactly to the single-step
/// residuals `Z_{t_{j+1}} = f(X_{t_{j+1}}) − T^δ f(X_{t_j})`.
pub fn martingale_residual<F: Fn(f64, f64) -> f64>(
    renv: &RescaledEnvironment,
    f: F,
    traj: &Trajectory,
) -> Result<Vec<f64>> {
    if (traj.delta - renv.delta).abs() > 1e-15 {
        return Err(Error::GridMismatch(format!(
            "trajectory delta {} does not match environment delta {}",
            traj.delta, renv.delta
        )));
    }
    let d = renv.delta;
    let d2 = d * d;
    let eps = renv.epsilon();
    let sigma_sq = renv.sigma_sq();
    let n = traj.steps();
    let mut series = Vec::with_capacity(n + 1);
    series.push(0.0);
    let x0 = traj.position(0);
    let f00 = f(0.0, x0);
    let mut acc = 0.0;
    for j in 0..n {
        let t_j = j as f64 * d2;
        let site = traj.sites[j];
        let x = site as f64 * d;
        let plus = renv.omega_plus_at(site)?;
        let t_op = plus * f(t_j, x + d) + (sigma_sq - plus) * f(t_j, x - d) + eps * f(t_j, x);
        let gen = (t_op - f(t_j, x)) / d2;
        let y = traj.position(j + 1);
        let dt = (f(t_j + d2, y) - f(t_j, y)) / d2;
        acc += d2 * (gen - dt);
        series.push(f(t_j + d2, y) - f00 - acc);
    }
    Ok(series)
}

/// Verifies the stochastic-integral decomposition of the martingale
/// increments pathwise.
///
/// The walk is driven from 0 by the uniform pairs `(U_j, V_j)`; writing
/// `ζ̄_j` for the symmetric step and `ζ^{x,δ}_j` for the environment step
/// built from the same pair, each increment
/// `Z_{t_{j+1}} = f(X_{t_{j+1}}) − T^δ f(X_{t_j})` is reconstructed as
///
/// ```text
///   ½(f(x+δ)−f(x−δ)) ζ̄  +  ½(f(x+δ)−f(x−δ)) [(ζ^x − ζ̄) − U̇^δ(x)]
///                        +  ½(f(x+δ)−2f(x)+f(x−δ)) [ζ̄² − σ²]
/// ```
///
/// and the maximum over steps of `|Z − reconstruction|` is returned; the
/// identity is exact, so the result is pure rounding noise.
pub fn ito_representation_check<F: Fn(f64) -> f64>(
    renv: &RescaledEnvironment,
    f: F,
    seed: u64,
    steps: usize,
) -> Result<f64> {
    if steps > renv.radius {
        return Err(Error::InvalidParameter(format!(
            "window radius {} cannot contain {steps} steps from the origin",
            renv.radius
        )));
    }
    let d = renv.delta;
    let eps = renv.epsilon();
    let sigma_sq = renv.sigma_sq();
    let r = renv.radius as i64;
    let mut site = 0i64;
    let mut max_disc = 0.0f64;
    for j in 1..=steps {
        let (u, v) = step_uniforms(seed, j as u64);
        let plus = renv.omega_plus[(site + r) as usize];
        let zeta_bar = if u > eps {
            if v <= 0.5 {
                1.0
            } else {
                -1.0
            }
        } else {
            0.0
        };
        let zeta_env = if u > eps {
            if v <= plus / sigma_sq {
                1.0
            } else {
                -1.0
            }
        } else {
            0.0
        };
        // The squared symmetric step is the move indicator, exactly.
        debug_assert_eq!(zeta_bar * zeta_bar, if u > eps { 1.0 } else { 0.0 });

        let x = site as f64 * d;
        let (fm, f0, fp) = (f(x - d), f(x), f(x + d));
        let next = site + zeta_env as i64;
        let lhs = f(next as f64 * d) - (plus * fp + (sigma_sq - plus) * fm + eps * f0);
        let grad_half = 0.5 * (fp - fm);
        let curv_half = 0.5 * (fp - 2.0 * f0 + fm);
        let u_dot = renv.u_dot[(site + r) as usize];
        let rhs = grad_half * zeta_bar
            + grad_half * ((zeta_env - zeta_bar) - u_dot)
            + curv_half * (zeta_bar * zeta_bar - sigma_sq);
        max_disc = max_disc.max((lhs - rhs).abs());
        site = next;
    }
    Ok(max_disc)
}

/// Monte Carlo mean of `h(X^δ_T)` over independent trajectories; returns
/// `(mean, standard_error)`. Used by tests as an independent oracle for
/// [`quenched_expectation`].
pub fn monte_carlo_expectation<H: Fn(f64) -> f64 + Sync>(
    renv: &RescaledEnvironment,
    h: H,
    steps: usize,
    x0: f64,
    seed: u64,
    paths: usize,
) -> Result<(f64, f64)> {
    if paths == 0 {
        return Err(Error::InvalidParameter("need at least one path".into()));
    }
    let values: Vec<f64> = (0..paths as u64)
        .into_par_iter()
        .map(|k| {
            let traj = simulate_walk(renv, steps, x0, seed.wrapping_add(k))?;
            Ok(h(traj.position(steps)))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = compensated_sum(values.iter().copied()) / paths as f64;
    let var = compensated_sum(values.iter().map(|v| (v - mean) * (v - mean)))
        / (paths as f64 - 1.0).max(1.0);
    Ok((mean, (var / paths as f64).sqrt()))
}
