// SPDX-License-Identifier: Apache-2.0

//! Product-form equilibrium of the four-queue tandem and the fixed point
//! that makes it an equilibrium of the nonlinear master equation.
//!
//! With arrival-to-service ratios `ρ = (η₁, ρ₁, ρ₂, η₂)` the tandem has
//! stationary law
//!
//! ```text
//! π(w, x, y, z) ∝ η₁^w / w! · ρ₁^x / x! · ρ₂^y · η₂^z / z!
//! ```
//!
//! on `w + x + y + z <= K`. At an equilibrium of the limit dynamics
//! `η₁ = η₂ = (μ/ν) ρ₁`. Aggregating the three infinite-server queues into
//! one with ratio `ρ̃₁ = (1 + 2μ/ν) ρ₁` reduces the fixed point to a curve
//! `ρ₂ = φ(ρ̃₁)` in the plane of a two-queue tandem, solved by bisection,
//! followed by a scalar bisection on the mean fill along that curve.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::Measure;
use crate::model::{enumerate_states, ModelParams, StationState};

/// Arrival-to-service ratios of the four queues, left to right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateRatios {
    pub eta1: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub eta2: f64,
}

impl RateRatios {
    pub fn new(eta1: f64, rho1: f64, rho2: f64, eta2: f64) -> Result<Self> {
        let r = RateRatios { eta1, rho1, rho2, eta2 };
        r.validate()?;
        Ok(r)
    }

    /// Model-consistent ratios `((μ/ν) ρ₁, ρ₁, ρ₂, (μ/ν) ρ₁)`.
    pub fn consistent(rho1: f64, rho2: f64, mu: f64, nu: f64) -> Result<Self> {
        let eta = mu / nu * rho1;
        RateRatios::new(eta, rho1, rho2, eta)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eta1", self.eta1), ("rho1", self.rho1), ("rho2", self.rho2), ("eta2", self.eta2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Domain(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Ratio of the aggregated infinite-server queue, `η₁ + ρ₁ + η₂`.
    pub fn rho1_tilde(&self) -> f64 {
        self.eta1 + self.rho1 + self.eta2
    }
}

fn factorials(k: u32) -> Vec<f64> {
    let mut f = vec![1.0; k as usize + 1];
    for i in 1..f.len() {
        f[i] = f[i - 1] * i as f64;
    }
    f
}

/// Unnormalized product-form weights in rank order.
fn weights(rho: &RateRatios, k: u32) -> Vec<f64> {
    let fact = factorials(k);
    let pw = |b: f64, e: u32| b.powi(e as i32);
    enumerate_states(k)
        .into_iter()
        .map(|StationState { w, x, y, z }| {
            pw(rho.eta1, w) / fact[w as usize] * pw(rho.rho1, x) / fact[x as usize] * pw(rho.rho2, y) * pw(rho.eta2, z)
                / fact[z as usize]
        })
        .collect()
}

/// Normalizing constant `Z(ρ)`.
pub fn partition_function(rho: &RateRatios, k: u32) -> Result<f64> {
    rho.validate()?;
    Ok(weights(rho, k).iter().sum())
}

/// Stationary law of the tandem with ratios `rho` and capacity `k`.
pub fn product_form(rho: &RateRatios, k: u32) -> Result<Measure> {
    rho.validate()?;
    Measure::from_weights(k, weights(rho, k))
}

/// Mass of `{y = 0}`: no car available.
pub fn pi_no_available(rho: &RateRatios, k: u32) -> Result<f64> {
    Ok(crate::measure::prob_no_available(&product_form(rho, k)?))
}

/// Mass of `{w + x + y + z = K}`: station saturated.
pub fn pi_saturated(rho: &RateRatios, k: u32) -> Result<f64> {
    Ok(crate::measure::prob_saturated(&product_form(rho, k)?))
}

/// `Σ (x + y + z) π`.
pub fn pi_mean_fill(rho: &RateRatios, k: u32) -> Result<f64> {
    Ok(crate::measure::mean_fill(&product_form(rho, k)?))
}

/// Stationary law `π(i, j) ∝ x^i / i! · y^j` of the two-queue tandem
/// (infinite server then single server) with capacity `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoQueueForm {
    k: u32,
    /// `(i, j, probability)` in lexicographic order of `(i, j)`.
    cells: Vec<(u32, u32, f64)>,
    normalizer: f64,
}

impl TwoQueueForm {
    pub fn new(x: f64, y: f64, k: u32) -> Result<Self> {
        if !(x.is_finite() && x >= 0.0 && y.is_finite() && y >= 0.0) {
            return Err(Error::Domain(format!("two-queue ratios must be finite and >= 0, got ({x}, {y})")));
        }
        let raw = two_queue_weights(x, y, k);
        let z: f64 = raw.iter().map(|c| c.2).sum();
        if !z.is_finite() {
            return Err(Error::Numerical(format!("two-queue normalizer overflows at ({x}, {y}), K={k}")));
        }
        let cells = raw.into_iter().map(|(i, j, w)| (i, j, w / z)).collect();
        Ok(TwoQueueForm { k, cells, normalizer: z })
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    /// `(i, j, π(i, j))` in lexicographic order.
    pub fn cells(&self) -> &[(u32, u32, f64)] {
        &self.cells
    }

    /// `Z(x, y) = Σ_{i+j<=K} x^i/i! y^j`.
    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    pub fn prob(&self, i: u32, j: u32) -> f64 {
        self.cells.iter().find(|c| c.0 == i && c.1 == j).map_or(0.0, |c| c.2)
    }

    /// Mass of `{j = 0}`.
    pub fn pi_dot0(&self) -> f64 {
        self.cells.iter().filter(|c| c.1 == 0).map(|c| c.2).sum()
    }

    /// Mass of `{i + j = K}`.
    pub fn pi_saturated(&self) -> f64 {
        self.cells.iter().filter(|c| c.0 + c.1 == self.k).map(|c| c.2).sum()
    }

    /// `Σ (c·i + j) π(i, j)`.
    pub fn weighted_fill(&self, c: f64) -> f64 {
        self.cells.iter().map(|&(i, j, p)| (c * i as f64 + j as f64) * p).sum()
    }
}

fn two_queue_weights(x: f64, y: f64, k: u32) -> Vec<(u32, u32, f64)> {
    let fact = factorials(k);
    let mut out = Vec::new();
    for i in 0..=k {
        for j in 0..=(k - i) {
            out.push((i, j, x.powi(i as i32) / fact[i as usize] * y.powi(j as i32)));
        }
    }
    out
}

fn two_queue_z(x: f64, y: f64, k: u32) -> f64 {
    two_queue_weights(x, y, k).iter().map(|c| c.2).sum()
}

fn exp_partial(x: f64, k: u32) -> f64 {
    let fact = factorials(k);
    (0..=k).map(|i| x.powi(i as i32) / fact[i as usize]).sum()
}

/// `f(x, y) = (a - x) Z(x, y) - a Σ_{i<=K} x^i / i!`.
///
/// `(x, y)` solves the scaled first fixed-point equation iff `f(x, y) = 0`.
pub fn f_simple(x: f64, y: f64, a: f64, k: u32) -> Result<f64> {
    if !(a.is_finite() && a > 0.0) {
        return Err(Error::Domain(format!("a must be finite and > 0, got {a}")));
    }
    if !(x.is_finite() && (0.0..a).contains(&x)) {
        return Err(Error::Domain(format!("x = {x} must lie in [0, a) with a = {a}")));
    }
    if !(y.is_finite() && y >= 0.0) {
        return Err(Error::Domain(format!("y must be finite and >= 0, got {y}")));
    }
    Ok((a - x) * two_queue_z(x, y, k) - a * exp_partial(x, k))
}

/// `g_K(x, y) = Σ (i + j) π(i, j)`, the mean number of cars and reserved
/// spaces in the two-queue tandem.
pub fn g_mean(x: f64, y: f64, k: u32) -> Result<f64> {
    Ok(TwoQueueForm::new(x, y, k)?.weighted_fill(1.0))
}

/// Numerical tolerances of the solvers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveOptions {
    /// Inner bisection stops once `|f| <= phi_rel_tol · a · Z`.
    pub phi_rel_tol: f64,
    /// Outer bisection stops once `|S(t) - s| < fill_tol`.
    pub fill_tol: f64,
    pub max_iter: usize,
    /// Residual bound checked after solving.
    pub residual_tol: f64,
    /// Grid size of the multi-root scan used when monotonicity fails.
    pub scan_points: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { phi_rel_tol: 1e-12, fill_tol: 1e-10, max_iter: 200, residual_tol: 1e-10, scan_points: 4096 }
    }
}

/// Inner solve with its iteration count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiSolution {
    pub y: f64,
    pub iterations: usize,
}

/// The unique `y > 0` with `f(x, y) = 0`, for `x` in `(0, a)`.
pub fn solve_phi(x: f64, a: f64, k: u32) -> Result<f64> {
    Ok(solve_phi_with(x, a, k, &SolveOptions::default())?.y)
}

pub fn solve_phi_with(x: f64, a: f64, k: u32, opts: &SolveOptions) -> Result<PhiSolution> {
    if !(x > 0.0 && x < a) {
        return Err(Error::Domain(format!("x = {x} must lie in (0, a) with a = {a}")));
    }
    let f = |y: f64| f_simple(x, y, a, k);
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut doublings = 0;
    while f(hi)? <= 0.0 {
        lo = hi;
        hi *= 2.0;
        doublings += 1;
        if doublings > 1000 || !hi.is_finite() {
            return Err(Error::Numerical(format!("no sign change of f(x={x}, .) found below y = {hi}")));
        }
    }
    let mut iterations = 0;
    let mut mid = 0.5 * (lo + hi);
    while iterations < opts.max_iter {
        iterations += 1;
        mid = 0.5 * (lo + hi);
        let v = f(mid)?;
        if v.abs() <= opts.phi_rel_tol * a * two_queue_z(x, mid, k) {
            break;
        }
        if v < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    Ok(PhiSolution { y: mid, iterations })
}

/// Fill `S(t) = Σ (c·i + j) π(i, j)` at `(t, φ(t))`, with `π` the two-queue
/// form and `φ` the solution curve of `f = 0` for parameter `a`.
pub fn fill_on_curve(t: f64, a: f64, c: f64, k: u32) -> Result<f64> {
    let y = solve_phi(t, a, k)?;
    Ok(TwoQueueForm::new(t, y, k)?.weighted_fill(c))
}

/// Coefficient of the aggregated queue in the fill equation,
/// `(1 + μ/ν) / (1 + 2μ/ν)`.
pub fn fill_coefficient(mu: f64, nu: f64) -> f64 {
    (1.0 + mu / nu) / (1.0 + 2.0 * mu / nu)
}

/// `a = (λ/μ)(1 + 2μ/ν)`, the upper end of the range of `ρ̃₁`.
pub fn scaled_load(lambda: f64, mu: f64, nu: f64) -> f64 {
    lambda / mu * (1.0 + 2.0 * mu / nu)
}

/// Iteration counts of a solve.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Iterations {
    pub outer: usize,
    pub inner_total: usize,
    pub inner_max: usize,
}

/// Absolute residuals of the five fixed-point equations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub eta1: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub eta2: f64,
    pub s: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        [self.eta1, self.rho1, self.rho2, self.eta2, self.s].into_iter().fold(0.0, f64::max)
    }
}

/// Result of [`solve_equilibrium`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub params: ModelParams,
    pub s: f64,
    pub rho: RateRatios,
    pub rho1_tilde: f64,
    pub a: f64,
    pub fill_coefficient: f64,
    pub residuals: Residuals,
    pub iterations: Iterations,
    /// The fill was observed increasing along every evaluated point.
    pub monotone_ok: bool,
}

impl SolveReport {
    pub fn equilibrium(&self) -> Result<Measure> {
        product_form(&self.rho, self.params.k)
    }
}

struct CurveRoot {
    t: f64,
    y: f64,
    iterations: Iterations,
    monotone_ok: bool,
}

struct Curve {
    a: f64,
    c: f64,
    k: u32,
    opts: SolveOptions,
}

impl Curve {
    fn eval(&self, t: f64, it: &mut Iterations) -> Result<(f64, f64)> {
        let phi = solve_phi_with(t, self.a, self.k, &self.opts)?;
        it.inner_total += phi.iterations;
        it.inner_max = it.inner_max.max(phi.iterations);
        Ok((phi.y, TwoQueueForm::new(t, phi.y, self.k)?.weighted_fill(self.c)))
    }

    /// Bisection for `S(t) = s` on `(lo, hi)`, assuming `S(lo) < s < S(hi)`.
    fn bisect(
        &self,
        s: f64,
        mut lo: f64,
        mut hi: f64,
        it: &mut Iterations,
        seen: &mut Vec<(f64, f64)>,
    ) -> Result<(f64, f64)> {
        let mut best = None;
        for _ in 0..self.opts.max_iter {
            it.outer += 1;
            let t = 0.5 * (lo + hi);
            let (y, fill) = self.eval(t, it)?;
            seen.push((t, fill));
            best = Some((t, y));
            if (fill - s).abs() < self.opts.fill_tol {
                return Ok((t, y));
            }
            if fill < s {
                lo = t;
            } else {
                hi = t;
            }
            if hi - lo <= f64::EPSILON * hi {
                break;
            }
        }
        match best {
            Some((t, y)) if (self.eval(t, it)?.1 - s).abs() < self.opts.fill_tol => Ok((t, y)),
            _ => Err(Error::Numerical(format!("fill bisection did not reach tolerance {}", self.opts.fill_tol))),
        }
    }

    fn solve(&self, s: f64) -> Result<CurveRoot> {
        let mut it = Iterations::default();
        let mut seen = Vec::new();
        let (t, y) = self.bisect(s, 0.0, self.a, &mut it, &mut seen)?;
        seen.sort_by(|p, q| p.0.total_cmp(&q.0));
        let monotone = seen.windows(2).all(|w| w[1].1 > w[0].1);
        if monotone {
            return Ok(CurveRoot { t, y, iterations: it, monotone_ok: true });
        }
        let roots = self.scan_roots(s, &mut it)?;
        match roots.as_slice() {
            [] => Err(Error::Numerical("fill scan found no root".into())),
            [(t, y)] => Ok(CurveRoot { t: *t, y: *y, iterations: it, monotone_ok: false }),
            many => Err(Error::MultipleRoots { roots: many.iter().map(|r| r.0).collect() }),
        }
    }

    /// Every root of `S(t) = s` on a uniform grid over `(0, a)`, each refined
    /// by bisection on its sign-change bracket.
    fn scan_roots(&self, s: f64, it: &mut Iterations) -> Result<Vec<(f64, f64)>> {
        let n = self.opts.scan_points.max(2);
        let mut prev_t = 0.0;
        let mut prev_gap = -s;
        let mut roots = Vec::new();
        let mut scratch = Vec::new();
        for i in 1..=n {
            let t = self.a * i as f64 / (n + 1) as f64;
            let (y, fill) = self.eval(t, it)?;
            let gap = fill - s;
            if gap.abs() < self.opts.fill_tol {
                roots.push((t, y));
            } else if prev_gap.signum() != gap.signum() && prev_gap.abs() >= self.opts.fill_tol {
                let (lo, hi, flip) = if prev_gap < 0.0 { (prev_t, t, false) } else { (prev_t, t, true) };
                let root = if flip {
                    self.bisect_decreasing(s, lo, hi, it)?
                } else {
                    self.bisect(s, lo, hi, it, &mut scratch)?
                };
                roots.push(root);
            }
            prev_t = t;
            prev_gap = gap;
        }
        Ok(roots)
    }

    fn bisect_decreasing(&self, s: f64, mut lo: f64, mut hi: f64, it: &mut Iterations) -> Result<(f64, f64)> {
        let mut last = (lo, 0.0);
        for _ in 0..self.opts.max_iter {
            it.outer += 1;
            let t = 0.5 * (lo + hi);
            let (y, fill) = self.eval(t, it)?;
            last = (t, y);
            if (fill - s).abs() < self.opts.fill_tol {
                break;
            }
            if fill > s {
                lo = t;
            } else {
                hi = t;
            }
        }
        Ok(last)
    }
}

fn check_fill_target(s: f64, k: u32) -> Result<()> {
    if !(s.is_finite() && s > 0.0 && s < k as f64) {
        return Err(Error::Domain(format!("mean fill s = {s} must lie in (0, K) = (0, {k})")));
    }
    Ok(())
}

/// Solves the fixed-point equations for mean fill `s` with default options.
pub fn solve_equilibrium(p: &ModelParams, s: f64) -> Result<SolveReport> {
    solve_equilibrium_with(p, s, &SolveOptions::default())
}

pub fn solve_equilibrium_with(p: &ModelParams, s: f64, opts: &SolveOptions) -> Result<SolveReport> {
    p.validate()?;
    check_fill_target(s, p.k)?;
    let a = scaled_load(p.lambda, p.mu, p.nu);
    let c = fill_coefficient(p.mu, p.nu);
    let curve = Curve { a, c, k: p.k, opts: *opts };
    let root = curve.solve(s)?;
    let rho1 = root.t / (1.0 + 2.0 * p.mu / p.nu);
    let rho = RateRatios::consistent(rho1, root.y, p.mu, p.nu)?;
    let residuals = residuals(p, s, &rho)?;
    if residuals.rho2 > 1e-12 {
        return Err(Error::Numerical(format!(
            "single-server balance identity off by {} (expected exact up to rounding)",
            residuals.rho2
        )));
    }
    if residuals.max() >= opts.residual_tol {
        return Err(Error::Numerical(format!("fixed-point residuals {residuals:?} exceed {}", opts.residual_tol)));
    }
    Ok(SolveReport {
        params: *p,
        s,
        rho,
        rho1_tilde: root.t,
        a,
        fill_coefficient: c,
        residuals,
        iterations: root.iterations,
        monotone_ok: root.monotone_ok,
    })
}

/// Residuals of the five fixed-point equations for the four-queue form.
pub fn residuals(p: &ModelParams, s: f64, rho: &RateRatios) -> Result<Residuals> {
    let pi = product_form(rho, p.k)?;
    let p0v = crate::measure::prob_no_available(&pi);
    let ps = crate::measure::prob_saturated(&pi);
    let fill = crate::measure::mean_fill(&pi);
    Ok(Residuals {
        eta1: (rho.eta1 - p.lambda / p.nu * (1.0 - p0v)).abs(),
        rho1: (rho.rho1 - p.lambda / p.mu * (1.0 - p0v)).abs(),
        rho2: (rho.rho2 * (1.0 - ps) - (1.0 - p0v)).abs(),
        eta2: (rho.eta2 - p.lambda / p.nu * (1.0 - p0v)).abs(),
        s: (fill - s).abs(),
    })
}

/// All roots `ρ̃₁` of the fill equation found by a grid scan of `(0, a)`,
/// whether or not the fill is monotone along the curve.
pub fn scan_fill_roots(p: &ModelParams, s: f64, opts: &SolveOptions) -> Result<Vec<f64>> {
    p.validate()?;
    check_fill_target(s, p.k)?;
    let curve = Curve { a: scaled_load(p.lambda, p.mu, p.nu), c: fill_coefficient(p.mu, p.nu), k: p.k, opts: *opts };
    let mut it = Iterations::default();
    Ok(curve.scan_roots(s, &mut it)?.into_iter().map(|r| r.0).collect())
}

/// Residuals of the simple-reservation equations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimpleResiduals {
    pub rho1: f64,
    pub rho2: f64,
    pub s: f64,
}

/// Result of [`solve_simple_reservation`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimpleReport {
    pub rho1: f64,
    pub rho2: f64,
    pub residuals: SimpleResiduals,
    pub iterations: Iterations,
    pub monotone_ok: bool,
}

/// Equilibrium of the model where the space is reserved at pickup time
/// (the limit of infinitely fast pickups).
pub fn solve_simple_reservation(lambda: f64, mu: f64, s: f64, k: u32) -> Result<SimpleReport> {
    solve_simple_reservation_with(lambda, mu, s, k, &SolveOptions::default())
}

pub fn solve_simple_reservation_with(
    lambda: f64,
    mu: f64,
    s: f64,
    k: u32,
    opts: &SolveOptions,
) -> Result<SimpleReport> {
    for (name, v) in [("lambda", lambda), ("mu", mu)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::Domain(format!("{name} must be finite and > 0, got {v}")));
        }
    }
    if k == 0 {
        return Err(Error::Domain("capacity K must be >= 1".into()));
    }
    check_fill_target(s, k)?;
    let a = lambda / mu;
    let curve = Curve { a, c: 1.0, k, opts: *opts };
    let root = curve.solve(s)?;
    let form = TwoQueueForm::new(root.t, root.y, k)?;
    let residuals = SimpleResiduals {
        rho1: (root.t - a * (1.0 - form.pi_dot0())).abs(),
        rho2: (root.y * (1.0 - form.pi_saturated()) - (1.0 - form.pi_dot0())).abs(),
        s: (form.weighted_fill(1.0) - s).abs(),
    };
    Ok(SimpleReport {
        rho1: root.t,
        rho2: root.y,
        residuals,
        iterations: root.iterations,
        monotone_ok: root.monotone_ok,
    })
}
