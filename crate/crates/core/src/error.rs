// SPDX-License-Identifier: Apache-2.0

use thiserror::Error;

/// Errors raised by the model, the engines and the experiments.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// More cars than parking spaces.
    #[error("capacity error: {cars} cars do not fit in {stations} stations of capacity {capacity}")]
    Capacity { cars: u64, stations: usize, capacity: u32 },
    /// An inconsistent or unusable configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// A numerical procedure failed; carries a diagnostic.
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// The fill equation has more than one root on the solution curve.
    #[error("fill equation has {} roots (rho1_tilde = {roots:?})", roots.len())]
    MultipleRoots { roots: Vec<f64> },
}

pub type Result<T> = std::result::Result<T, Error>;
