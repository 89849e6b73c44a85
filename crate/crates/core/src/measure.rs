// SPDX-License-Identifier: Apache-2.0

//! Probability measures on `Σ_K` and on `Σ_K × Σ_K`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{enumerate_states, state_count, StationState};

/// Tolerance on total mass for a vector to count as a probability measure.
pub const MASS_TOL: f64 = 1e-12;

/// A probability vector indexed by the lexicographic rank of `Σ_K`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Measure {
    k: u32,
    probs: Vec<f64>,
}

impl Measure {
    /// Validates length, sign and unit mass. Never renormalizes.
    pub fn new(k: u32, probs: Vec<f64>) -> Result<Self> {
        let expected = state_count(k);
        if probs.len() != expected {
            return Err(Error::Domain(format!("measure for K={k} needs {expected} entries, got {}", probs.len())));
        }
        if let Some((i, p)) = probs.iter().enumerate().find(|(_, p)| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::Domain(format!("entry {i} is {p}, not a nonnegative number")));
        }
        let mass: f64 = probs.iter().sum();
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::Domain(format!("total mass {mass} differs from 1 by more than {MASS_TOL:e}")));
        }
        Ok(Measure { k, probs })
    }

    /// Normalizes nonnegative weights.
    pub fn from_weights(k: u32, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::Domain(format!("weights must have positive finite total, got {total}")));
        }
        Measure::new(k, weights.into_iter().map(|w| w / total).collect())
    }

    pub fn point_mass(state: StationState, k: u32) -> Result<Self> {
        let idx = crate::model::index_of(state, k)?;
        let mut probs = vec![0.0; state_count(k)];
        probs[idx] = 1.0;
        Ok(Measure { k, probs })
    }

    pub fn uniform(k: u32) -> Self {
        let n = state_count(k);
        Measure { k, probs: vec![1.0 / n as f64; n] }
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// `Σ f(s) m(s)`.
    pub fn expect(&self, f: impl Fn(StationState) -> f64) -> f64 {
        enumerate_states(self.k).into_iter().zip(&self.probs).map(|(s, p)| f(s) * p).sum()
    }

    /// Mass of the states satisfying `pred`.
    pub fn mass_where(&self, pred: impl Fn(StationState) -> bool) -> f64 {
        enumerate_states(self.k).into_iter().zip(&self.probs).filter(|(s, _)| pred(*s)).map(|(_, p)| p).sum()
    }

    /// Convex combination `(1 - alpha) self + alpha other`.
    pub fn mix(&self, other: &Measure, alpha: f64) -> Result<Measure> {
        same_k(self.k, other.k)?;
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Domain(format!("mixing weight {alpha} outside [0, 1]")));
        }
        let probs = self.probs.iter().zip(&other.probs).map(|(a, b)| (1.0 - alpha) * a + alpha * b).collect();
        Measure::new(self.k, probs)
    }

    /// Long-format CSV `w,x,y,z,prob`, rows in rank order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("w,x,y,z,prob\n");
        for (s, p) in enumerate_states(self.k).into_iter().zip(&self.probs) {
            let _ = writeln!(out, "{},{},{},{},{}", s.w, s.x, s.y, s.z, p);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Measure> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next() {
            Some(h) if h.trim() == "w,x,y,z,prob" => {}
            other => return Err(Error::Domain(format!("bad measure CSV header {other:?}"))),
        }
        let mut states = Vec::new();
        let mut probs = Vec::new();
        for (row, line) in lines.enumerate() {
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != 5 {
                return Err(Error::Domain(format!("row {row}: expected 5 fields, got {}", fields.len())));
            }
            let int =
                |i: usize| fields[i].parse::<u32>().map_err(|e| Error::Domain(format!("row {row}: field {i}: {e}")));
            states.push(StationState::new(int(0)?, int(1)?, int(2)?, int(3)?));
            probs.push(fields[4].parse::<f64>().map_err(|e| Error::Domain(format!("row {row}: prob: {e}")))?);
        }
        let k = infer_k(probs.len())?;
        if states != enumerate_states(k) {
            return Err(Error::Domain("measure CSV rows are not in enumeration order".into()));
        }
        Measure::new(k, probs)
    }

    /// Compact JSON: `{"k": K, "probs": [...]}`, array position = rank.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("measure serializes")
    }

    pub fn from_json(text: &str) -> Result<Measure> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            k: u32,
            probs: Vec<f64>,
        }
        let raw: Raw = serde_json::from_str(text).map_err(|e| Error::Domain(format!("measure JSON: {e}")))?;
        Measure::new(raw.k, raw.probs)
    }
}

impl<'de> Deserialize<'de> for Measure {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            k: u32,
            probs: Vec<f64>,
        }
        let raw = Raw::deserialize(d)?;
        Measure::new(raw.k, raw.probs).map_err(serde::de::Error::custom)
    }
}

fn infer_k(len: usize) -> Result<u32> {
    (0..=64u32)
        .find(|&k| state_count(k) == len)
        .ok_or_else(|| Error::Domain(format!("{len} rows is not C(K+4,4) for any K")))
}

fn same_k(a: u32, b: u32) -> Result<()> {
    if a != b {
        return Err(Error::Domain(format!("measures built for different capacities ({a} vs {b})")));
    }
    Ok(())
}

/// Half the L1 distance.
pub fn tv_distance(a: &Measure, b: &Measure) -> Result<f64> {
    same_k(a.k, b.k)?;
    Ok(half_l1(&a.probs, &b.probs))
}

pub(crate) fn half_l1(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f64>()
}

/// `Σ (x + y + z) m(w, x, y, z)`: mean number of cars and car-bound spaces.
pub fn mean_fill(m: &Measure) -> f64 {
    m.expect(|s| s.fill() as f64)
}

/// Mass of `{y = 0}`.
pub fn prob_no_available(m: &Measure) -> f64 {
    m.mass_where(|s| s.y == 0)
}

/// Mass of `{w + x + y + z = K}`.
pub fn prob_saturated(m: &Measure) -> f64 {
    let k = m.k;
    m.mass_where(|s| s.occupied() == k)
}

/// Joint law on ordered pairs of station states, row-major by rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMeasure {
    k: u32,
    probs: Vec<f64>,
}

impl PairMeasure {
    pub fn new(k: u32, probs: Vec<f64>) -> Result<Self> {
        let n = state_count(k);
        if probs.len() != n * n {
            return Err(Error::Domain(format!("pair measure needs {} entries, got {}", n * n, probs.len())));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Domain("pair measure has a negative or non-finite entry".into()));
        }
        let mass: f64 = probs.iter().sum();
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::Domain(format!("pair measure mass {mass} is not 1")));
        }
        Ok(PairMeasure { k, probs })
    }

    /// `a ⊗ b`.
    pub fn product(a: &Measure, b: &Measure) -> Result<Self> {
        same_k(a.k, b.k)?;
        let probs = a.probs.iter().flat_map(|p| b.probs.iter().map(move |q| p * q)).collect();
        Ok(PairMeasure { k: a.k, probs })
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn get(&self, first: usize, second: usize) -> f64 {
        self.probs[first * state_count(self.k) + second]
    }

    pub fn first_marginal(&self) -> Vec<f64> {
        let n = state_count(self.k);
        self.probs.chunks(n).map(|row| row.iter().sum()).collect()
    }

    pub fn second_marginal(&self) -> Vec<f64> {
        let n = state_count(self.k);
        let mut out = vec![0.0; n];
        for row in self.probs.chunks(n) {
            for (o, p) in out.iter_mut().zip(row) {
                *o += p;
            }
        }
        out
    }

    pub fn tv_distance(&self, other: &PairMeasure) -> Result<f64> {
        same_k(self.k, other.k)?;
        Ok(half_l1(&self.probs, &other.probs))
    }

    /// Entrywise average of equally weighted pair measures.
    pub fn average(items: &[PairMeasure]) -> Result<PairMeasure> {
        let first = items.first().ok_or_else(|| Error::Domain("cannot average zero pair measures".into()))?;
        let mut acc = vec![0.0; first.probs.len()];
        for it in items {
            same_k(first.k, it.k)?;
            for (a, p) in acc.iter_mut().zip(&it.probs) {
                *a += p;
            }
        }
        let n = items.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(PairMeasure { k: first.k, probs: acc })
    }
}

/// Entrywise average of equally weighted measures.
pub fn average(items: &[Measure]) -> Result<Measure> {
    let first = items.first().ok_or_else(|| Error::Domain("cannot average zero measures".into()))?;
    let mut acc = vec![0.0; first.len()];
    for it in items {
        same_k(first.k, it.k)?;
        for (a, p) in acc.iter_mut().zip(&it.probs) {
            *a += p;
        }
    }
    let n = items.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Measure::new(first.k, acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_measure(k: u32) -> impl Strategy<Value = Measure> {
        prop::collection::vec(0.0f64..1.0, state_count(k))
            .prop_filter("nonzero", |w| w.iter().sum::<f64>() > 1e-3)
            .prop_map(move |w| Measure::from_weights(k, w).unwrap())
    }

    #[test]
    fn tv_examples() {
        let u = Measure::uniform(1);
        let d0 = Measure::point_mass(StationState::EMPTY, 1).unwrap();
        let d1 = Measure::point_mass(StationState::new(0, 0, 1, 0), 1).unwrap();
        assert_eq!(tv_distance(&u, &u).unwrap(), 0.0);
        assert_eq!(tv_distance(&d0, &d1).unwrap(), 1.0);
        assert!((tv_distance(&u, &d0).unwrap() - 0.8).abs() < 1e-15);
        assert!(tv_distance(&u, &Measure::uniform(2)).is_err());
    }

    #[test]
    fn functional_examples() {
        let u = Measure::uniform(1);
        assert!((mean_fill(&u) - 0.6).abs() < 1e-15);
        assert!((prob_no_available(&u) - 0.8).abs() < 1e-15);
        assert!((prob_saturated(&u) - 0.8).abs() < 1e-15);

        let empty = Measure::point_mass(StationState::EMPTY, 3).unwrap();
        assert_eq!(mean_fill(&empty), 0.0);
        assert_eq!(prob_no_available(&empty), 1.0);
        assert_eq!(prob_saturated(&empty), 0.0);

        let m = Measure::point_mass(StationState::new(1, 1, 1, 0), 3).unwrap();
        assert_eq!(mean_fill(&m), 2.0);

        let car = Measure::point_mass(StationState::new(0, 0, 1, 0), 1).unwrap();
        assert_eq!(prob_no_available(&car), 0.0);
        assert_eq!(prob_saturated(&car), 1.0);
    }

    #[test]
    fn construction_fails_loudly() {
        assert!(Measure::new(1, vec![0.2; 4]).is_err());
        assert!(Measure::new(1, vec![0.25; 5]).is_err());
        assert!(Measure::new(1, vec![0.5, 0.6, -0.1, 0.0, 0.0]).is_err());
        assert!(Measure::new(1, vec![1.0 + 1e-13, 0.0, 0.0, 0.0, 0.0]).is_ok());
    }

    #[test]
    fn csv_and_json_roundtrip_is_bit_exact() {
        let w: Vec<f64> = (0..35).map(|i| 1.0 / (1.0 + i as f64).sqrt() + 1e-17 * i as f64).collect();
        let m = Measure::from_weights(3, w).unwrap();
        let back = Measure::from_csv(&m.to_csv()).unwrap();
        assert_eq!(back, m);
        let back = Measure::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        assert!(m.to_csv().starts_with("w,x,y,z,prob\n0,0,0,0,"));
    }

    #[test]
    fn csv_rejects_bad_input() {
        assert!(Measure::from_csv("a,b\n").is_err());
        assert!(Measure::from_csv("w,x,y,z,prob\n0,0,0,0,1\n0,0,0,1,0\n").is_err());
        let swapped = "w,x,y,z,prob\n0,0,0,1,0\n0,0,0,0,1\n0,0,1,0,0\n0,1,0,0,0\n1,0,0,0,0\n";
        assert!(Measure::from_csv(swapped).is_err());
    }

    #[test]
    fn pair_product_marginals() {
        let a = Measure::from_weights(2, (1..=15).map(|i| i as f64).collect()).unwrap();
        let pm = PairMeasure::product(&a, &a).unwrap();
        for (m, p) in pm.first_marginal().iter().zip(a.probs()) {
            assert!((m - p).abs() < 1e-15);
        }
        assert_eq!(pm.first_marginal(), pm.second_marginal());
    }

    proptest! {
        #[test]
        fn tv_is_a_metric(a in random_measure(2), b in random_measure(2), c in random_measure(2)) {
            let ab = tv_distance(&a, &b).unwrap();
            let ba = tv_distance(&b, &a).unwrap();
            let ac = tv_distance(&a, &c).unwrap();
            let cb = tv_distance(&c, &b).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ab <= ac + cb + 1e-12);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
            prop_assert!(tv_distance(&a, &a).unwrap() < 1e-12);
        }

        #[test]
        fn mean_fill_is_linear(a in random_measure(3), b in random_measure(3), alpha in 0.0f64..=1.0) {
            let mix = a.mix(&b, 1.0 - alpha).unwrap();
            let lhs = mean_fill(&mix);
            let rhs = alpha * mean_fill(&a) + (1.0 - alpha) * mean_fill(&b);
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
