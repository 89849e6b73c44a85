// SPDX-License-Identifier: Apache-2.0

//! Nonlinear master equation for the law of one station in the large-network
//! limit, integrated with classical fixed-step RK4.
//!
//! The station moves through a tandem of four queues. In state
//! `(w, x, y, z)` the outgoing transitions are
//!
//! | family | target            | rate                    | enabled when     |
//! |--------|-------------------|-------------------------|------------------|
//! | 1      | `(w+1, x, y, z)`  | `λ · Λ(y > 0)`          | `w+x+y+z < K`    |
//! | 2      | `(w-1, x+1, y, z)`| `ν · w`                 |                  |
//! | 3      | `(w, x-1, y+1, z)`| `μ · x`                 |                  |
//! | 4      | `(w, x, y-1, z+1)`| `λ · Λ(w+x+y+z < K)`    | `y > 0`          |
//! | 5      | `(w, x, y, z-1)`  | `ν · z`                 |                  |
//!
//! The two `Λ(..)` factors make the equation nonlinear.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{mean_fill, prob_no_available, prob_saturated, Measure};
use crate::model::{rank_unchecked, ModelParams, StateSpace, StationState};

/// Outgoing transitions of one state.
#[derive(Debug, Clone, Copy)]
struct Stencil {
    /// `(w+1, ..)` when the station is not saturated.
    arrival: Option<usize>,
    /// `(w-1, x+1, ..)` and the multiplicity `w`.
    remote_pickup: Option<(usize, f64)>,
    /// `(.., x-1, y+1, ..)` and the multiplicity `x`.
    ret: Option<(usize, f64)>,
    /// `(.., y-1, z+1)` when a car is available.
    local_reservation: Option<usize>,
    /// `(.., z-1)` and the multiplicity `z`.
    local_pickup: Option<(usize, f64)>,
    has_car: bool,
    saturated: bool,
}

/// Precomputed transition stencils over `Σ_K`.
#[derive(Debug, Clone)]
pub struct MasterEquation {
    params: ModelParams,
    stencils: Vec<Stencil>,
}

impl MasterEquation {
    pub fn new(params: ModelParams) -> Result<Self> {
        params.validate()?;
        let k = params.k;
        let space = StateSpace::new(k);
        let idx = |s: StationState| rank_unchecked(s, k);
        let stencils = space
            .states()
            .iter()
            .map(|&s| {
                let StationState { w, x, y, z } = s;
                Stencil {
                    arrival: (s.occupied() < k).then(|| idx(StationState::new(w + 1, x, y, z))),
                    remote_pickup: (w > 0).then(|| (idx(StationState::new(w - 1, x + 1, y, z)), w as f64)),
                    ret: (x > 0).then(|| (idx(StationState::new(w, x - 1, y + 1, z)), x as f64)),
                    local_reservation: (y > 0).then(|| idx(StationState::new(w, x, y - 1, z + 1))),
                    local_pickup: (z > 0).then(|| (idx(StationState::new(w, x, y, z - 1)), z as f64)),
                    has_car: y > 0,
                    saturated: s.occupied() == k,
                }
            })
            .collect();
        Ok(MasterEquation { params, stencils })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.stencils.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stencils.is_empty()
    }

    /// `(Λ(y > 0), Λ(S < K))` of a raw vector.
    pub(crate) fn coupling(&self, m: &[f64]) -> (f64, f64) {
        let mut p_car = 0.0;
        let mut p_free = 0.0;
        for (st, p) in self.stencils.iter().zip(m) {
            if st.has_car {
                p_car += p;
            }
            if !st.saturated {
                p_free += p;
            }
        }
        (p_car, p_free)
    }

    /// Right-hand side with coupling factors `(p_car, p_free)` held fixed:
    /// the generator of the linear tandem, applied to `m`.
    pub(crate) fn linear_rhs(&self, m: &[f64], p_car: f64, p_free: f64, out: &mut [f64]) {
        let ModelParams { lambda, mu, nu, .. } = self.params;
        let arrival_rate = lambda * p_car;
        let reservation_rate = lambda * p_free;
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, (st, &mass)) in self.stencils.iter().zip(m).enumerate() {
            if mass == 0.0 {
                continue;
            }
            let flow = |target: usize, rate: f64, out: &mut [f64]| {
                let f = rate * mass;
                out[i] -= f;
                out[target] += f;
            };
            if let Some(t) = st.arrival {
                flow(t, arrival_rate, out);
            }
            if let Some((t, w)) = st.remote_pickup {
                flow(t, nu * w, out);
            }
            if let Some((t, x)) = st.ret {
                flow(t, mu * x, out);
            }
            if let Some(t) = st.local_reservation {
                flow(t, reservation_rate, out);
            }
            if let Some((t, z)) = st.local_pickup {
                flow(t, nu * z, out);
            }
        }
    }

    pub(crate) fn rhs(&self, m: &[f64], out: &mut [f64]) {
        let (p_car, p_free) = self.coupling(m);
        self.linear_rhs(m, p_car, p_free, out);
    }

    /// Dense generator of the linear tandem with frozen coupling factors,
    /// row-major, `q[i * n + j]` the rate from state `i` to state `j`.
    pub fn frozen_generator(&self, p_car: f64, p_free: f64) -> Vec<f64> {
        let n = self.len();
        let mut q = vec![0.0; n * n];
        let mut unit = vec![0.0; n];
        let mut col = vec![0.0; n];
        for i in 0..n {
            unit[i] = 1.0;
            self.linear_rhs(&unit, p_car, p_free, &mut col);
            q[i * n..(i + 1) * n].copy_from_slice(&col);
            unit[i] = 0.0;
        }
        q
    }
}

/// Time derivative of a measure under the master equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftVector {
    pub k: u32,
    pub entries: Vec<f64>,
}

impl DriftVector {
    pub fn sum(&self) -> f64 {
        self.entries.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |acc, d| acc.max(d.abs()))
    }
}

fn check_k(m: &Measure, p: &ModelParams) -> Result<()> {
    if m.k() != p.k {
        return Err(Error::Domain(format!("measure built for K={} but parameters have K={}", m.k(), p.k)));
    }
    Ok(())
}

/// Right-hand side of the master equation at `m`.
pub fn drift(m: &Measure, p: &ModelParams) -> Result<DriftVector> {
    check_k(m, p)?;
    let eq = MasterEquation::new(*p)?;
    let mut out = vec![0.0; eq.len()];
    eq.rhs(m.probs(), &mut out);
    Ok(DriftVector { k: p.k, entries: out })
}

/// Largest absolute drift entry; zero exactly at equilibria.
pub fn stationarity_residual(m: &Measure, p: &ModelParams) -> Result<f64> {
    Ok(drift(m, p)?.max_abs())
}

/// Negative entries above this are rounding noise and are clamped to zero.
pub const NEGATIVE_TOL: f64 = -1e-12;

/// Largest admissible step: `dt · (λ + νK + μK) <= 0.5`.
pub fn max_stable_dt(p: &ModelParams) -> f64 {
    0.5 / (p.lambda + (p.nu + p.mu) * p.k as f64)
}

/// Integrates from `m0` over `[0, horizon]` with step `dt` and returns the
/// measure at every grid time `0, dt, 2dt, ..., horizon`.
pub fn integrate(m0: &Measure, p: &ModelParams, horizon: f64, dt: f64) -> Result<Vec<(f64, Measure)>> {
    integrate_strided(m0, p, horizon, dt, 1)
}

/// As [`integrate`], keeping every `stride`-th grid point (and the last).
pub fn integrate_strided(
    m0: &Measure,
    p: &ModelParams,
    horizon: f64,
    dt: f64,
    stride: usize,
) -> Result<Vec<(f64, Measure)>> {
    check_k(m0, p)?;
    let steps = step_count(p, horizon, dt)?;
    let stride = stride.max(1);
    let eq = MasterEquation::new(*p)?;
    let mut out = Vec::with_capacity(steps / stride + 2);
    out.push((0.0, m0.clone()));
    let mut rk = Rk4::new(eq.len());
    let mut cur = m0.probs().to_vec();
    for n in 1..=steps {
        rk.step(&eq, &mut cur, dt);
        clamp_roundoff(&mut cur, n as f64 * dt)?;
        if n % stride == 0 || n == steps {
            let t = if n == steps { horizon } else { n as f64 * dt };
            let m = Measure::new(p.k, cur.clone()).map_err(|e| Error::Numerical(format!("at t={t}: {e}")))?;
            out.push((t, m));
        }
    }
    Ok(out)
}

/// Final measure only.
pub fn integrate_final(m0: &Measure, p: &ModelParams, horizon: f64, dt: f64) -> Result<Measure> {
    let steps = step_count(p, horizon, dt)?;
    let traj = integrate_strided(m0, p, horizon, dt, steps.max(1))?;
    Ok(traj.into_iter().last().expect("trajectory is never empty").1)
}

fn step_count(p: &ModelParams, horizon: f64, dt: f64) -> Result<usize> {
    p.validate()?;
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::Config(format!("dt must be finite and > 0, got {dt}")));
    }
    if dt > max_stable_dt(p) {
        return Err(Error::Config(format!(
            "dt = {dt} violates the stability guard dt·(λ+νK+μK) <= 0.5 (max {})",
            max_stable_dt(p)
        )));
    }
    if !(horizon.is_finite() && horizon >= 0.0) {
        return Err(Error::Config(format!("horizon must be finite and >= 0, got {horizon}")));
    }
    let steps = (horizon / dt).round();
    if (steps * dt - horizon).abs() > 1e-9 * horizon.max(1.0) {
        return Err(Error::Config(format!("horizon {horizon} is not a whole number of steps of {dt}")));
    }
    Ok(steps as usize)
}

fn clamp_roundoff(v: &mut [f64], t: f64) -> Result<()> {
    for (i, p) in v.iter_mut().enumerate() {
        if *p < 0.0 {
            if *p < NEGATIVE_TOL {
                return Err(Error::Numerical(format!("entry {i} reached {p} at t={t}")));
            }
            *p = 0.0;
        }
    }
    Ok(())
}

struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    fn new(n: usize) -> Self {
        Rk4 { k1: vec![0.0; n], k2: vec![0.0; n], k3: vec![0.0; n], k4: vec![0.0; n], tmp: vec![0.0; n] }
    }

    fn step(&mut self, eq: &MasterEquation, y: &mut [f64], dt: f64) {
        let axpy = |out: &mut [f64], y: &[f64], k: &[f64], h: f64| {
            for ((o, a), b) in out.iter_mut().zip(y).zip(k) {
                *o = a + h * b;
            }
        };
        eq.rhs(y, &mut self.k1);
        axpy(&mut self.tmp, y, &self.k1, 0.5 * dt);
        eq.rhs(&self.tmp, &mut self.k2);
        axpy(&mut self.tmp, y, &self.k2, 0.5 * dt);
        eq.rhs(&self.tmp, &mut self.k3);
        axpy(&mut self.tmp, y, &self.k3, dt);
        eq.rhs(&self.tmp, &mut self.k4);
        for (i, yi) in y.iter_mut().enumerate() {
            *yi += dt / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

/// Scalar summary of a measure under the dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasureSummary {
    pub p_car_available: f64,
    pub p_space_free: f64,
    pub mean_fill: f64,
    pub stationarity_residual: f64,
}

pub fn summarize(m: &Measure, p: &ModelParams) -> Result<MeasureSummary> {
    Ok(MeasureSummary {
        p_car_available: 1.0 - prob_no_available(m),
        p_space_free: 1.0 - prob_saturated(m),
        mean_fill: mean_fill(m),
        stationarity_residual: stationarity_residual(m, p)?,
    })
}

/// CSV `t,w,x,y,z,prob` for a time-stamped sequence of measures.
pub fn trajectory_csv(traj: &[(f64, Measure)]) -> String {
    use std::fmt::Write as _;
    let mut out = String::from("t,w,x,y,z,prob\n");
    for (t, m) in traj {
        for line in m.to_csv().lines().skip(1) {
            let _ = writeln!(out, "{t},{line}");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{enumerate_states, state_count};

    fn params() -> ModelParams {
        ModelParams::new(1.0, 1.0, 2.0, 3).unwrap()
    }

    fn pseudo_random_measure(k: u32, salt: u64) -> Measure {
        let n = state_count(k);
        let w = (0..n as u64)
            .map(|i| {
                let h = (i + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt.wrapping_mul(0xBF58_476D_1CE4_E5B9);
                ((h >> 11) as f64 / (1u64 << 53) as f64) + 0.01
            })
            .collect();
        Measure::from_weights(k, w).unwrap()
    }

    /// Flow balance written state by state, independent of the stencil table.
    fn brute_force_drift(m: &Measure, p: &ModelParams) -> Vec<f64> {
        let k = p.k;
        let states = enumerate_states(k);
        let prob = |s: StationState| -> f64 { states.iter().position(|t| *t == s).map_or(0.0, |i| m.probs()[i]) };
        let p_car: f64 = states.iter().zip(m.probs()).filter(|(s, _)| s.y > 0).map(|(_, q)| q).sum();
        let p_free: f64 = states.iter().zip(m.probs()).filter(|(s, _)| s.occupied() < k).map(|(_, q)| q).sum();
        states
            .iter()
            .map(|&s| {
                let StationState { w, x, y, z } = s;
                let mut d = 0.0;
                if s.occupied() < k {
                    d -= p.lambda * p_car * prob(s);
                }
                if w > 0 {
                    d += p.lambda * p_car * prob(StationState::new(w - 1, x, y, z));
                }
                d -= p.nu * w as f64 * prob(s);
                if x > 0 {
                    d += p.nu * (w + 1) as f64 * prob(StationState::new(w + 1, x - 1, y, z));
                }
                d -= p.mu * x as f64 * prob(s);
                if y > 0 {
                    d += p.mu * (x + 1) as f64 * prob(StationState::new(w, x + 1, y - 1, z));
                    d -= p.lambda * p_free * prob(s);
                }
                if z > 0 {
                    d += p.lambda * p_free * prob(StationState::new(w, x, y + 1, z - 1));
                }
                d -= p.nu * z as f64 * prob(s);
                if s.occupied() < k {
                    d += p.nu * (z + 1) as f64 * prob(StationState::new(w, x, y, z + 1));
                }
                d
            })
            .collect()
    }

    #[test]
    fn empty_station_is_stationary() {
        let m = Measure::point_mass(StationState::EMPTY, 3).unwrap();
        let d = drift(&m, &params()).unwrap();
        assert!(d.entries.iter().all(|e| *e == 0.0));
        assert_eq!(stationarity_residual(&m, &params()).unwrap(), 0.0);
    }

    #[test]
    fn drift_matches_brute_force_and_conserves_mass() {
        for k in 1..=4 {
            let p = ModelParams::new(0.7, 1.3, 2.1, k).unwrap();
            for salt in 0..5 {
                let m = pseudo_random_measure(k, salt);
                let d = drift(&m, &p).unwrap();
                let oracle = brute_force_drift(&m, &p);
                for (a, b) in d.entries.iter().zip(&oracle) {
                    assert!((a - b).abs() < 1e-13, "{a} vs {b}");
                }
                assert!(d.sum().abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fill_derivative_is_nu_times_ew_minus_ez() {
        let p = params();
        for salt in 0..10 {
            let m = pseudo_random_measure(3, salt);
            let d = drift(&m, &p).unwrap();
            let rate: f64 = enumerate_states(3).iter().zip(&d.entries).map(|(s, e)| s.fill() as f64 * e).sum();
            let ew = m.expect(|s| s.w as f64);
            let ez = m.expect(|s| s.z as f64);
            assert!((rate - p.nu * (ew - ez)).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_is_not_stationary() {
        let p = ModelParams::new(1.0, 1.0, 1.0, 1).unwrap();
        assert!(stationarity_residual(&Measure::uniform(1), &p).unwrap() > 0.01);
    }

    #[test]
    fn integrate_edge_cases() {
        let p = params();
        let m0 = pseudo_random_measure(3, 1);
        let traj = integrate(&m0, &p, 0.0, 0.01).unwrap();
        assert_eq!(traj, vec![(0.0, m0.clone())]);

        let empty = Measure::point_mass(StationState::EMPTY, 3).unwrap();
        let traj = integrate(&empty, &p, 1.0, 0.01).unwrap();
        assert_eq!(traj.len(), 101);
        assert!(traj.iter().all(|(_, m)| *m == empty));

        assert!(matches!(integrate(&m0, &p, 1.0, 1.0), Err(Error::Config(_))));
        assert!(matches!(integrate(&m0, &p, 1.0, 0.03), Err(Error::Config(_))));
        assert!(integrate(&Measure::uniform(2), &p, 1.0, 0.01).is_err());
    }

    #[test]
    fn fill_is_conserved_from_all_available_start() {
        let p = params();
        let mut probs = vec![0.0; state_count(3)];
        probs[rank_unchecked(StationState::new(0, 0, 1, 0), 3)] = 0.5;
        probs[rank_unchecked(StationState::new(0, 0, 2, 0), 3)] = 0.5;
        let m0 = Measure::new(3, probs).unwrap();
        let traj = integrate(&m0, &p, 10.0, 0.01).unwrap();
        for (_, m) in &traj {
            assert!((mean_fill(m) - 1.5).abs() < 1e-9);
            let ew = m.expect(|s| s.w as f64);
            let ez = m.expect(|s| s.z as f64);
            assert!((ew - ez).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_generator_rows_sum_to_zero() {
        let eq = MasterEquation::new(params()).unwrap();
        let q = eq.frozen_generator(0.6, 0.8);
        let n = eq.len();
        for row in q.chunks(n) {
            assert!(row.iter().sum::<f64>().abs() < 1e-13);
        }
    }
}
