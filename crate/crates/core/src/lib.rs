// SPDX-License-Identifier: Apache-2.0

//! Car-sharing network with reservations: a finite stochastic model, its
//! mean-field limit and the product-form equilibrium of that limit.
//!
//! Station states are quadruples `(w, x, y, z)` of reservation and car
//! counts bounded by a common capacity `K`; see [`model`].
//!
//! The modules are layered: [`model`] and [`measure`] define states and
//! one-station laws, [`sim`] runs the finite network, [`meanfield`]
//! integrates the limiting master equation, [`equilibrium`] solves for its
//! fixed point and [`harness`] wires the three together into experiments.

pub mod equilibrium;
pub mod error;
pub mod exec;
pub mod harness;
pub mod meanfield;
pub mod measure;
pub mod model;
pub mod sim;

pub use error::{Error, Result};
pub use exec::Execution;
pub use measure::{tv_distance, Measure, PairMeasure};
pub use model::{ModelParams, StateSpace, StationState};
