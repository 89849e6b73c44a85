// SPDX-License-Identifier: Apache-2.0

//! Station states, the enumerated state space and the model parameters.
//!
//! A station holds up to `K` parking spaces. Its state is the quadruple
//! `(w, x, y, z)`:
//!
//! * `w` spaces reserved by users who have not picked up their car yet,
//! * `x` spaces reserved by users currently driving towards the station,
//! * `y` available cars,
//! * `z` cars reserved by users who have not picked them up yet.
//!
//! The state space is `{w + x + y + z <= K}`, enumerated in lexicographic
//! order. Ranks are computed in closed form with binomial coefficients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Occupancy of one station.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct StationState {
    pub w: u32,
    pub x: u32,
    pub y: u32,
    pub z: u32,
}

impl StationState {
    pub const EMPTY: StationState = StationState { w: 0, x: 0, y: 0, z: 0 };

    pub const fn new(w: u32, x: u32, y: u32, z: u32) -> Self {
        StationState { w, x, y, z }
    }

    /// Number of unavailable parking spaces.
    pub fn occupied(&self) -> u32 {
        self.w + self.x + self.y + self.z
    }

    /// Spaces holding or promised to a car that belongs to this station's
    /// fleet share: `x + y + z`.
    pub fn fill(&self) -> u32 {
        self.x + self.y + self.z
    }

    pub fn fits(&self, k: u32) -> bool {
        self.occupied() <= k
    }
}

impl std::fmt::Display for StationState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.w, self.x, self.y, self.z)
    }
}

/// Rates and capacity shared by every engine.
///
/// `lambda` is the user arrival rate per station, `mu` the inverse mean trip
/// time and `nu` the inverse mean delay between reservation and pickup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub lambda: f64,
    pub mu: f64,
    pub nu: f64,
    pub k: u32,
}

impl ModelParams {
    pub fn new(lambda: f64, mu: f64, nu: f64, k: u32) -> Result<Self> {
        let p = ModelParams { lambda, mu, nu, k };
        p.validate()?;
        Ok(p)
    }

    /// Strict check used by the mean-field and equilibrium engines.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("mu", self.mu), ("nu", self.nu)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Domain(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        if self.k == 0 {
            return Err(Error::Domain("capacity K must be >= 1".into()));
        }
        Ok(())
    }

    /// Relaxed check for the simulator, which accepts vanishing rates.
    pub fn validate_nonnegative(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("mu", self.mu), ("nu", self.nu)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Domain(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.k == 0 {
            return Err(Error::Domain("capacity K must be >= 1".into()));
        }
        Ok(())
    }
}

/// Binomial coefficient `C(n, r)`, zero when `r > n`.
pub fn binomial(n: u64, r: u64) -> u64 {
    if r > n {
        return 0;
    }
    let r = r.min(n - r);
    (0..r).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
}

/// `|Σ_K| = C(K + 4, 4)`.
pub fn state_count(k: u32) -> usize {
    binomial(k as u64 + 4, 4) as usize
}

/// All states with `w + x + y + z <= k`, in lexicographic order.
pub fn enumerate_states(k: u32) -> Vec<StationState> {
    let mut out = Vec::with_capacity(state_count(k));
    for w in 0..=k {
        for x in 0..=(k - w) {
            for y in 0..=(k - w - x) {
                for z in 0..=(k - w - x - y) {
                    out.push(StationState { w, x, y, z });
                }
            }
        }
    }
    out
}

/// Lexicographic rank of `state` in the enumeration of `Σ_k`.
pub fn index_of(state: StationState, k: u32) -> Result<usize> {
    if !state.fits(k) {
        return Err(Error::Domain(format!("state {state} exceeds capacity {k}")));
    }
    Ok(rank_unchecked(state, k))
}

#[inline]
pub(crate) fn rank_unchecked(s: StationState, k: u32) -> usize {
    let c = |n: u32, r: u64| binomial(n as u64, r);
    let k0 = k;
    let k1 = k0 - s.w;
    let k2 = k1 - s.x;
    let k3 = k2 - s.y;
    let r = (c(k0 + 4, 4) - c(k1 + 4, 4)) + (c(k1 + 3, 3) - c(k2 + 3, 3)) + (c(k2 + 2, 2) - c(k3 + 2, 2)) + s.z as u64;
    r as usize
}

/// Inverse of [`index_of`].
pub fn state_of(index: usize, k: u32) -> Result<StationState> {
    let total = state_count(k);
    if index >= total {
        return Err(Error::Domain(format!("rank {index} out of range for K={k} ({total} states)")));
    }
    // Peel off one coordinate at a time: the block of states sharing a
    // fixed prefix with remaining budget `b` and `d` free coordinates has
    // C(b + d, d) elements.
    let mut rem = index as u64;
    let mut budget = k as u64;
    let mut coords = [0u32; 4];
    for (slot, dims) in [(0usize, 3u64), (1, 2), (2, 1)] {
        let mut v = 0u32;
        loop {
            let block = binomial(budget + dims, dims);
            if rem < block {
                break;
            }
            rem -= block;
            budget -= 1;
            v += 1;
        }
        coords[slot] = v;
    }
    coords[3] = rem as u32;
    Ok(StationState::new(coords[0], coords[1], coords[2], coords[3]))
}

/// Cached enumeration of `Σ_K`.
#[derive(Debug, Clone)]
pub struct StateSpace {
    k: u32,
    states: Vec<StationState>,
}

impl StateSpace {
    pub fn new(k: u32) -> Self {
        StateSpace { k, states: enumerate_states(k) }
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[StationState] {
        &self.states
    }

    pub fn state(&self, index: usize) -> StationState {
        self.states[index]
    }

    pub fn index_of(&self, state: StationState) -> Result<usize> {
        index_of(state, self.k)
    }
}
