//! Hierarchical distributed EV charging scheduling on radial grids.
//!
//! A distribution system operator (DSO) minimizes line losses subject to
//! branch-flow (DistFlow) constraints with a second-order-cone relaxation,
//! while bus-level aggregators minimize electricity cost for their EV
//! fleets and battery storage. The two layers negotiate by consensus
//! ADMM; each aggregator additionally decomposes its own problem over its
//! EVs as a sharing-problem ADMM. A centralized conic solve of the same
//! relaxed problem serves as the verification oracle.

pub mod admm;
pub mod baselines;
pub mod config;
pub mod conic;
pub mod devices;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod result;
pub mod scenario;
pub mod subproblems;

pub use error::{Error, Result};

/// Discrete scheduling horizon: `n` steps of `step_hours` hours each.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Horizon {
    pub n: usize,
    pub step_hours: f64,
}

impl Horizon {
    pub fn hours(&self) -> f64 {
        self.n as f64 * self.step_hours
    }
}
