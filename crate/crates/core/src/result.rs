//! Schedule results shared by the distributed solver, the centralized
//! oracle, and the baselines.

use serde::{Deserialize, Serialize};

use crate::grid::NetworkState;
use crate::Horizon;

/// Controllable-device trajectories for one aggregator [kW / kVAr].
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DeviceSchedule {
    /// Per-EV charging power, `[ev][t]`.
    pub ev_power: Vec<Vec<f64>>,
    pub bes_p: Vec<f64>,
    pub bes_q: Vec<f64>,
}

/// Final per-aggregator trajectories.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggSchedule {
    pub agg_id: u32,
    pub bus_id: u32,
    /// Per-EV charging power `[ev][t]` [kW].
    pub ev_power: Vec<Vec<f64>>,
    /// Per-EV stored energy `[ev][0..=n]` [kWh].
    pub ev_energy: Vec<Vec<f64>>,
    pub bes_p: Vec<f64>,
    pub bes_q: Vec<f64>,
    pub bes_energy: Vec<f64>,
    /// Physical net bus injection [kW] (consumption positive).
    pub p_inj: Vec<f64>,
    /// Physical net bus injection [kVAr].
    pub q_inj: Vec<f64>,
}

/// One row of the iteration trace. Outer-level rows leave `inner` empty;
/// inner-level rows carry the aggregator id and inner iteration index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub outer: usize,
    pub agg: Option<u32>,
    pub inner: Option<usize>,
    pub primal: f64,
    pub dual: f64,
    pub objective: f64,
    pub wall_ms: f64,
}

/// Full outcome of one scheduling run.
#[derive(Debug, Clone)]
pub struct ScheduleResult {
    pub method: String,
    pub horizon: Horizon,
    /// Energy price [$ / kWh].
    pub price: Vec<f64>,
    pub aggs: Vec<AggSchedule>,
    /// State of the relaxed network solve (when the method used one).
    pub solver_state: Option<NetworkState>,
    /// Exact power-flow state for the final fixed injections.
    pub evaluated_state: NetworkState,
    /// Total active line loss over the horizon [kWh] (exact flow).
    pub loss_kwh: f64,
    /// Total aggregator electricity cost [$].
    pub cost_usd: f64,
    /// `loss_weight * loss_kwh + cost_usd` [$].
    pub objective: f64,
    pub converged: bool,
    pub outer_iters: usize,
    pub trace: Vec<TraceRecord>,
}
