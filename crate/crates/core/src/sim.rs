// SPDX-License-Identifier: Apache-2.0

//! Exact event-driven simulation of the finite network of `N` stations.
//!
//! Users arrive at each station at rate `lambda`. An arriving user picks a
//! destination uniformly among all stations (the origin included) and
//! reserves both an available car at the origin and a free space at the
//! destination. If either is missing the user leaves and the event is a
//! no-op. A reservation turns into a trip at rate `nu` and a trip ends at
//! rate `mu`, releasing the car at the destination.
//!
//! Pending pickups are stored as `(origin, destination)` pairs and drivers
//! as destinations, so the station counters are always recoverable from the
//! two lists and the available-car counts.
//!
//! Every event consumes exactly four draws from the generator, in order:
//! holding time, event class, origin station, then destination station or
//! list index.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{Measure, PairMeasure};
use crate::model::{index_of, state_count, ModelParams, StationState};

/// Seeded generator used for every simulation.
pub type SimRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Kind of a simulated event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventTag {
    /// Successful double reservation.
    Arrival,
    /// Arrival that found no car at the origin or no space at the destination.
    Blocked,
    Pickup,
    Return,
}

/// Outcome of one call to [`SimState::step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub holding_time: f64,
    pub tag: EventTag,
}

/// Full state of the finite network.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    k: u32,
    m: u64,
    stations: Vec<StationState>,
    pickups: Vec<(u32, u32)>,
    driving: Vec<u32>,
    t: f64,
}

impl SimState {
    /// Places `m` available cars one at a time, each at a station drawn
    /// uniformly among those that still have a free space.
    pub fn init_uniform(n: usize, m: u64, k: u32, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("at least one station is required".into()));
        }
        if k == 0 {
            return Err(Error::Domain("capacity K must be >= 1".into()));
        }
        if m > n as u64 * k as u64 {
            return Err(Error::Capacity { cars: m, stations: n, capacity: k });
        }
        let mut rng = rng_from_seed(seed);
        let mut stations = vec![StationState::EMPTY; n];
        let mut open: Vec<u32> = (0..n as u32).collect();
        for _ in 0..m {
            let slot = rng.random_range(0..open.len());
            let i = open[slot] as usize;
            stations[i].y += 1;
            if stations[i].y == k {
                open.swap_remove(slot);
            }
        }
        Ok(SimState { k, m, stations, pickups: Vec::new(), driving: Vec::new(), t: 0.0 })
    }

    /// Builds a state from explicit station counters and event lists.
    pub fn from_parts(
        k: u32,
        stations: Vec<StationState>,
        pickups: Vec<(u32, u32)>,
        driving: Vec<u32>,
    ) -> Result<Self> {
        let m = stations.iter().map(|s| s.fill() as u64).sum();
        let st = SimState { k, m, stations, pickups, driving, t: 0.0 };
        st.check_invariants()?;
        Ok(st)
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn n(&self) -> usize {
        self.stations.len()
    }

    pub fn cars(&self) -> u64 {
        self.m
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn stations(&self) -> &[StationState] {
        &self.stations
    }

    pub fn pickups(&self) -> &[(u32, u32)] {
        &self.pickups
    }

    pub fn driving(&self) -> &[u32] {
        &self.driving
    }

    /// `λ N + ν P + μ D`.
    pub fn total_rate(&self, p: &ModelParams) -> f64 {
        p.lambda * self.n() as f64 + p.nu * self.pickups.len() as f64 + p.mu * self.driving.len() as f64
    }

    /// Samples and applies one event. Returns `None` when the total rate
    /// vanishes, in which case nothing is drawn and the state is frozen.
    pub fn step<R: Rng + ?Sized>(&mut self, p: &ModelParams, rng: &mut R) -> Option<Step> {
        let (holding_time, event) = self.draw(p, rng)?;
        self.t += holding_time;
        let tag = self.apply(event);
        Some(Step { holding_time, tag })
    }

    fn draw<R: Rng + ?Sized>(&self, p: &ModelParams, rng: &mut R) -> Option<(f64, Pending)> {
        let rate = self.total_rate(p);
        if rate <= 0.0 {
            return None;
        }
        let n = self.n();
        let u: f64 = rng.random();
        let holding = -(1.0 - u).ln() / rate;
        let class = rng.random::<f64>() * rate;
        let origin = rng.random_range(0..n);
        let arrivals = p.lambda * n as f64;
        let pickups = p.nu * self.pickups.len() as f64;
        let event = if class < arrivals || (self.pickups.is_empty() && self.driving.is_empty()) {
            Pending::Arrival { origin, destination: rng.random_range(0..n) }
        } else if class < arrivals + pickups || self.driving.is_empty() {
            Pending::Pickup(rng.random_range(0..self.pickups.len()))
        } else {
            Pending::Return(rng.random_range(0..self.driving.len()))
        };
        Some((holding, event))
    }

    fn apply(&mut self, event: Pending) -> EventTag {
        match event {
            Pending::Arrival { origin, destination } => {
                if self.stations[origin].y > 0 && self.stations[destination].occupied() < self.k {
                    self.stations[origin].y -= 1;
                    self.stations[origin].z += 1;
                    self.stations[destination].w += 1;
                    self.pickups.push((origin as u32, destination as u32));
                    EventTag::Arrival
                } else {
                    EventTag::Blocked
                }
            }
            Pending::Pickup(idx) => {
                let (i, j) = self.pickups.swap_remove(idx);
                self.stations[i as usize].z -= 1;
                let dst = &mut self.stations[j as usize];
                dst.w -= 1;
                dst.x += 1;
                self.driving.push(j);
                EventTag::Pickup
            }
            Pending::Return(idx) => {
                let j = self.driving.swap_remove(idx);
                let dst = &mut self.stations[j as usize];
                dst.x -= 1;
                dst.y += 1;
                EventTag::Return
            }
        }
    }

    /// Car conservation, capacity, and consistency of the event lists with
    /// the station counters.
    pub fn check_invariants(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Numerical(format!("simulator invariant violated: {msg}")));
        let cars: u64 = self.stations.iter().map(|s| s.fill() as u64).sum();
        if cars != self.m {
            return fail(format!("{cars} cars present, {} expected", self.m));
        }
        if let Some((i, s)) = self.stations.iter().enumerate().find(|(_, s)| !s.fits(self.k)) {
            return fail(format!("station {i} in state {s} exceeds K={}", self.k));
        }
        let n = self.n();
        let mut w = vec![0u32; n];
        let mut x = vec![0u32; n];
        let mut z = vec![0u32; n];
        for &(i, j) in &self.pickups {
            z[i as usize] += 1;
            w[j as usize] += 1;
        }
        for &j in &self.driving {
            x[j as usize] += 1;
        }
        for (i, s) in self.stations.iter().enumerate() {
            if s.w != w[i] || s.x != x[i] || s.z != z[i] {
                return fail(format!("station {i} counters {s} disagree with event lists"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Pending {
    Arrival { origin: usize, destination: usize },
    Pickup(usize),
    Return(usize),
}

/// Parameters of one simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub params: ModelParams,
    pub n: usize,
    pub m: u64,
    pub horizon: f64,
    pub sample_times: Vec<f64>,
    pub seed: u64,
    /// Check the hard invariants after every event. Always on in debug builds.
    #[serde(default)]
    pub audit: bool,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.params.validate_nonnegative()?;
        if !(self.horizon.is_finite() && self.horizon >= 0.0) {
            return Err(Error::Config(format!("horizon must be finite and >= 0, got {}", self.horizon)));
        }
        if self.sample_times.iter().any(|t| !(0.0..=self.horizon).contains(t)) {
            return Err(Error::Config("sample_times must lie in [0, horizon]".into()));
        }
        if self.sample_times.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("sample_times must be sorted".into()));
        }
        if self.m > self.n as u64 * self.params.k as u64 {
            return Err(Error::Capacity { cars: self.m, stations: self.n, capacity: self.params.k });
        }
        Ok(())
    }
}

/// Event counts and invariant audit of one run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub events: u64,
    pub arrivals: u64,
    pub blocked: u64,
    pub pickups: u64,
    pub returns: u64,
    /// Number of invariant checks performed.
    pub audits: u64,
    /// Number of failed invariant checks.
    pub violations: u64,
}

/// Station snapshots on the requested time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub k: u32,
    pub samples: Vec<(f64, Vec<StationState>)>,
    pub stats: RunStats,
}

impl Trajectory {
    /// CSV `t,station,w,x,y,z`, one row per station per sample time.
    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::from("t,station,w,x,y,z\n");
        for (t, snap) in &self.samples {
            for (i, s) in snap.iter().enumerate() {
                let _ = writeln!(out, "{t},{i},{},{},{},{}", s.w, s.x, s.y, s.z);
            }
        }
        out
    }

    /// CSV `t,w,x,y,z,prob` of the empirical measure at each sample time.
    pub fn empirical_csv(&self) -> Result<String> {
        use std::fmt::Write as _;
        let mut out = String::from("t,w,x,y,z,prob\n");
        for (t, snap) in &self.samples {
            let m = empirical_measure(snap, self.k)?;
            for line in m.to_csv().lines().skip(1) {
                let _ = writeln!(out, "{t},{line}");
            }
        }
        Ok(out)
    }
}

/// Runs one replica and records the station states at `sample_times`.
///
/// A sample at time `t` shows the state after every event at times `<= t`.
pub fn run(config: &SimConfig) -> Result<Trajectory> {
    config.validate()?;
    let p = config.params;
    let mut state = SimState::init_uniform(config.n, config.m, p.k, config.seed)?;
    // The placement stream and the dynamics stream are kept apart so that
    // the draw contract per event holds from the first event on.
    let mut rng = rng_from_seed(config.seed ^ 0x9E37_79B9_7F4A_7C15);
    let audit = config.audit || cfg!(debug_assertions);
    let mut stats = RunStats::default();
    let mut samples = Vec::with_capacity(config.sample_times.len());
    let mut next = 0usize;
    let times = &config.sample_times;

    if audit {
        record_audit(&state, &mut stats);
    }
    while let Some((h, event)) = state.draw(&p, &mut rng) {
        let t_event = state.t + h;
        while next < times.len() && times[next] < t_event {
            samples.push((times[next], state.stations.clone()));
            next += 1;
        }
        if t_event > config.horizon {
            break;
        }
        state.t = t_event;
        let tag = state.apply(event);
        stats.events += 1;
        match tag {
            EventTag::Arrival => stats.arrivals += 1,
            EventTag::Blocked => stats.blocked += 1,
            EventTag::Pickup => stats.pickups += 1,
            EventTag::Return => stats.returns += 1,
        }
        if audit {
            record_audit(&state, &mut stats);
        }
    }
    while next < times.len() {
        samples.push((times[next], state.stations.clone()));
        next += 1;
    }
    Ok(Trajectory { k: p.k, samples, stats })
}

fn record_audit(state: &SimState, stats: &mut RunStats) {
    stats.audits += 1;
    if let Err(e) = state.check_invariants() {
        stats.violations += 1;
        debug_assert!(false, "{e}");
    }
}

/// Fraction of stations in each state.
pub fn empirical_measure(snapshot: &[StationState], k: u32) -> Result<Measure> {
    let n = snapshot.len();
    if n == 0 {
        return Err(Error::Domain("empty snapshot".into()));
    }
    let mut counts = vec![0u64; state_count(k)];
    for s in snapshot {
        counts[index_of(*s, k)?] += 1;
    }
    Measure::new(k, counts.into_iter().map(|c| c as f64 / n as f64).collect())
}

/// Law of `(state_i, state_j)` for an ordered pair `i != j` drawn uniformly.
pub fn pair_empirical(snapshot: &[StationState], k: u32) -> Result<PairMeasure> {
    let n = snapshot.len();
    if n < 2 {
        return Err(Error::Domain(format!("pair measure needs at least 2 stations, got {n}")));
    }
    let size = state_count(k);
    let mut counts = vec![0u64; size];
    for s in snapshot {
        counts[index_of(*s, k)?] += 1;
    }
    let pairs = (n * (n - 1)) as f64;
    let mut probs = vec![0.0; size * size];
    for (a, &ca) in counts.iter().enumerate().filter(|(_, c)| **c > 0) {
        for (b, &cb) in counts.iter().enumerate().filter(|(_, c)| **c > 0) {
            let joint = if a == b { ca * (ca - 1) } else { ca * cb };
            probs[a * size + b] = joint as f64 / pairs;
        }
    }
    PairMeasure::new(k, probs)
}
