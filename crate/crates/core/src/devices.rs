//! EV+building (EVB), battery storage, and aggregator device models.
//!
//! Device quantities are physical: powers in kW/kVAr, energies in kWh.
//! Conversion to per-unit happens only at the network boundary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Horizon;

/// Feasibility tolerance on device energy/power checks [kWh resp. kW].
pub const FEAS_TOL: f64 = 1e-6;

/// One EV's plug-in session: window, energy state and targets, charger
/// limits. `p_min < 0` enables vehicle-to-grid discharge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvSession {
    pub ev_id: u32,
    pub agg_id: u32,
    pub arrival_step: usize,
    pub departure_step: usize,
    /// Initial stored energy [kWh].
    pub c0: f64,
    /// Required energy at departure [kWh].
    pub c_target: f64,
    /// Battery capacity [kWh].
    pub capacity: f64,
    /// Charging efficiency, in (0, 1].
    pub eta: f64,
    /// Charger power limits [kW].
    pub p_min: f64,
    pub p_max: f64,
}

impl EvSession {
    pub fn validate(&self, horizon: &Horizon) -> Result<()> {
        let fail = |reason: &str| {
            Err(Error::InfeasibleSession {
                ev_id: self.ev_id,
                reason: reason.to_string(),
            })
        };
        if !(0.0 <= self.c0 && self.c0 <= self.c_target && self.c_target <= self.capacity) {
            return fail("energy ordering 0 <= c0 <= c_target <= capacity violated");
        }
        if self.arrival_step >= self.departure_step || self.departure_step > horizon.n {
            return fail("arrival must precede departure within the horizon");
        }
        if !(self.p_min <= 0.0 && 0.0 <= self.p_max) {
            return fail("charger limits must satisfy p_min <= 0 <= p_max");
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return fail("efficiency must be in (0, 1]");
        }
        let window = (self.departure_step - self.arrival_step) as f64;
        if self.c_target - self.c0 > self.eta * self.p_max * horizon.step_hours * window + FEAS_TOL
        {
            return fail("target energy unreachable at maximum charging rate");
        }
        Ok(())
    }

    /// Step indices of the plug-in window `[arrival, departure)`.
    pub fn window(&self) -> std::ops::Range<usize> {
        self.arrival_step..self.departure_step
    }
}

/// Per-step uncontrollable net load of one EVB (building minus solar).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvbProfile {
    /// Active net load [kW].
    pub p_uc: Vec<f64>,
    /// Reactive load [kVAr].
    pub q_uc: Vec<f64>,
}

/// Stationary battery energy storage at an aggregator bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BesUnit {
    /// Initial energy [kWh].
    pub c0: f64,
    /// Energy bounds [kWh].
    pub c_min: f64,
    pub c_max: f64,
    /// Charging efficiency, in (0, 1].
    pub eta: f64,
    /// Converter apparent-power rating [kVA].
    pub s_rating: f64,
}

impl BesUnit {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.c_min && self.c_min <= self.c0 && self.c0 <= self.c_max) {
            return Err(Error::ConfigInvalid(
                "BES energy bounds must satisfy 0 <= c_min <= c0 <= c_max".into(),
            ));
        }
        if self.s_rating <= 0.0 {
            return Err(Error::ConfigInvalid("BES rating must be positive".into()));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::ConfigInvalid("BES efficiency must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// An aggregator: one optional BES plus a fleet of EVBs at one bus.
/// `sessions[i]` and `profiles[i]` describe the same EVB.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregatorNode {
    pub agg_id: u32,
    pub bus_id: u32,
    pub bes: Option<BesUnit>,
    pub sessions: Vec<EvSession>,
    pub profiles: Vec<EvbProfile>,
}

impl AggregatorNode {
    pub fn validate(&self, horizon: &Horizon) -> Result<()> {
        if self.sessions.len() != self.profiles.len() {
            return Err(Error::DimensionMismatch(format!(
                "agg {}: {} sessions vs {} profiles",
                self.agg_id,
                self.sessions.len(),
                self.profiles.len()
            )));
        }
        for s in &self.sessions {
            s.validate(horizon)?;
        }
        for p in &self.profiles {
            if p.p_uc.len() != horizon.n || p.q_uc.len() != horizon.n {
                return Err(Error::DimensionMismatch(format!(
                    "agg {}: profile length != horizon",
                    self.agg_id
                )));
            }
        }
        if let Some(bes) = &self.bes {
            bes.validate()?;
        }
        Ok(())
    }

    pub fn n_evs(&self) -> usize {
        self.sessions.len()
    }
}

/// Time-varying EV energy bounds, indexed over energy states `c(0..=n)`.
///
/// Outside the plug-in window the charging power is forced to zero and
/// the energy is frozen (at `c0` before arrival, `c_target` after
/// departure); inside the window the energy may range over the battery,
/// pinned to `c_target` at the departure step.
pub fn ev_energy_bounds(session: &EvSession, horizon: &Horizon) -> (Vec<f64>, Vec<f64>) {
    let n = horizon.n;
    let mut lower = vec![0.0; n + 1];
    let mut upper = vec![0.0; n + 1];
    for t in 0..=n {
        if t <= session.arrival_step {
            lower[t] = session.c0;
            upper[t] = session.c0;
        } else if t < session.departure_step {
            lower[t] = 0.0;
            upper[t] = session.capacity;
        } else {
            lower[t] = session.c_target;
            upper[t] = session.c_target;
        }
    }
    (lower, upper)
}

/// Apply the battery recursion `c(t+1) = c(t) + T_h * eta * p(t)`.
/// Returns the energy trajectory of length `n + 1` with `c(0) = c0`.
pub fn simulate_ev(p_ev: &[f64], session: &EvSession, horizon: &Horizon) -> Vec<f64> {
    simulate_storage(p_ev, session.c0, session.eta, horizon)
}

pub fn simulate_bes(p_bes: &[f64], bes: &BesUnit, horizon: &Horizon) -> Vec<f64> {
    simulate_storage(p_bes, bes.c0, bes.eta, horizon)
}

fn simulate_storage(p: &[f64], c0: f64, eta: f64, horizon: &Horizon) -> Vec<f64> {
    let mut c = Vec::with_capacity(p.len() + 1);
    c.push(c0);
    let mut acc = c0;
    for &pw in p {
        acc += horizon.step_hours * eta * pw;
        c.push(acc);
    }
    c
}

#[derive(Debug, Clone, Default)]
pub struct FeasReport {
    pub feasible: bool,
    pub violations: Vec<String>,
}

/// Check a charging trajectory against the session's feasible set:
/// power limits inside the window, zero power outside, energy bounds,
/// and the designated energy at departure.
pub fn ev_feasible(p_ev: &[f64], session: &EvSession, horizon: &Horizon) -> FeasReport {
    let mut violations = Vec::new();
    if p_ev.len() != horizon.n {
        violations.push(format!(
            "trajectory length {} != horizon {}",
            p_ev.len(),
            horizon.n
        ));
        return FeasReport { feasible: false, violations };
    }
    for (t, &p) in p_ev.iter().enumerate() {
        if session.window().contains(&t) {
            if p < session.p_min - FEAS_TOL || p > session.p_max + FEAS_TOL {
                violations.push(format!("step {t}: power {p} outside charger limits"));
            }
        } else if p.abs() > FEAS_TOL {
            violations.push(format!("step {t}: nonzero power outside plug-in window"));
        }
    }
    let c = simulate_ev(p_ev, session, horizon);
    for t in session.arrival_step + 1..session.departure_step {
        if c[t] < -FEAS_TOL || c[t] > session.capacity + FEAS_TOL {
            violations.push(format!("step {t}: energy {} outside [0, capacity]", c[t]));
        }
    }
    let c_dep = c[session.departure_step];
    if (c_dep - session.c_target).abs() > FEAS_TOL {
        violations.push(format!(
            "terminal energy {} != target {}",
            c_dep, session.c_target
        ));
    }
    FeasReport { feasible: violations.is_empty(), violations }
}

/// Check BES power and energy trajectories against the converter cone
/// `p^2 + q^2 <= s_rating^2` and the energy bounds.
pub fn bes_feasible(p_bes: &[f64], q_bes: &[f64], bes: &BesUnit, horizon: &Horizon) -> FeasReport {
    let mut violations = Vec::new();
    if p_bes.len() != horizon.n || q_bes.len() != horizon.n {
        violations.push("trajectory length != horizon".into());
        return FeasReport { feasible: false, violations };
    }
    for t in 0..horizon.n {
        let s = (p_bes[t].powi(2) + q_bes[t].powi(2)).sqrt();
        if s > bes.s_rating + FEAS_TOL {
            violations.push(format!("step {t}: apparent power {s} exceeds rating"));
        }
    }
    let c = simulate_bes(p_bes, bes, horizon);
    for (t, &ct) in c.iter().enumerate() {
        if ct < bes.c_min - FEAS_TOL || ct > bes.c_max + FEAS_TOL {
            violations.push(format!("step {t}: energy {ct} outside bounds"));
        }
    }
    FeasReport { feasible: violations.is_empty(), violations }
}

/// Elementwise sums of the node's uncontrollable profiles: `(p_uc, q_uc)`.
pub fn aggregate_uncontrollable(node: &AggregatorNode) -> (Vec<f64>, Vec<f64>) {
    let n = node.profiles.first().map_or(0, |p| p.p_uc.len());
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for prof in &node.profiles {
        for t in 0..n {
            p[t] += prof.p_uc[t];
            q[t] += prof.q_uc[t];
        }
    }
    (p, q)
}

/// Net bus injection of the aggregator [kW, kVAr], consumption positive:
/// `P = p_bes + sum_i (p_ev_i + p_uc_i)`, `Q = q_bes + sum_i q_uc_i`.
pub fn bus_injection(
    node: &AggregatorNode,
    p_evs: &[Vec<f64>],
    p_bes: &[f64],
    q_bes: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (mut p, mut q) = aggregate_uncontrollable(node);
    for ev in p_evs {
        for t in 0..p.len() {
            p[t] += ev[t];
        }
    }
    for t in 0..p.len() {
        p[t] += p_bes.get(t).copied().unwrap_or(0.0);
        q[t] += q_bes.get(t).copied().unwrap_or(0.0);
    }
    (p, q)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn horizon() -> Horizon {
        Horizon { n: 10, step_hours: 0.5 }
    }

    fn session() -> EvSession {
        EvSession {
            ev_id: 0,
            agg_id: 0,
            arrival_step: 2,
            departure_step: 8,
            c0: 4.0,
            c_target: 10.0,
            capacity: 12.0,
            eta: 1.0,
            p_min: -4.0,
            p_max: 4.0,
        }
    }

    #[test]
    fn bounds_follow_the_three_cases() {
        let h = horizon();
        let s = session();
        let (lo, hi) = ev_energy_bounds(&s, &h);
        // before arrival: frozen at c0 (power forced to zero)
        assert_eq!((lo[1], hi[1]), (4.0, 4.0));
        // in window, idle
        assert_eq!((lo[3], hi[3]), (0.0, 12.0));
        // at departure: pinned to the target
        assert_eq!((lo[8], hi[8]), (10.0, 10.0));
    }

    #[test]
    fn recursion_arithmetic() {
        let h = horizon();
        let s = session();
        let mut p = vec![0.0; h.n];
        assert!(simulate_ev(&p, &s, &h).iter().all(|&c| c == 4.0));
        p[2] = 4.0;
        let c = simulate_ev(&p, &s, &h);
        assert!((c[3] - 6.0).abs() < 1e-12); // +2 kWh at eta=1, T_h=0.5
        p[2] = -4.0;
        let c = simulate_ev(&p, &s, &h);
        assert!((c[3] - 2.0).abs() < 1e-12); // V2G discharge
    }

    #[test]
    fn feasibility_checks() {
        let h = horizon();
        let s = session();
        // Max-rate charge until target: needs 6 kWh = 3 steps at 4 kW.
        let mut p = vec![0.0; h.n];
        for t in 2..5 {
            p[t] = 4.0;
        }
        assert!(ev_feasible(&p, &s, &h).feasible);

        let mut bad = p.clone();
        bad[0] = 4.0;
        let rep = ev_feasible(&bad, &s, &h);
        assert!(!rep.feasible);
        assert!(rep.violations.iter().any(|v| v.contains("outside plug-in window")));

        let mut short = vec![0.0; h.n];
        for t in 2..5 {
            short[t] = 4.0;
        }
        short[4] = 2.0; // reaches 9 kWh only
        let rep = ev_feasible(&short, &s, &h);
        assert!(!rep.feasible);
        assert!(rep.violations.iter().any(|v| v.contains("terminal energy")));
    }

    #[test]
    fn bes_table1_charge() {
        let h = Horizon { n: 2, step_hours: 0.5 };
        let bes = BesUnit { c0: 5.0, c_min: 5.0, c_max: 55.0, eta: 1.0, s_rating: 50.0 };
        let c = simulate_bes(&[50.0, 50.0], &bes, &h);
        assert!((c[2] - 55.0).abs() < 1e-12);
        assert!(bes_feasible(&[50.0, 50.0], &[0.0, 0.0], &bes, &h).feasible);
        // 3-4-5 on the cone boundary
        assert!(bes_feasible(&[30.0, 0.0], &[40.0, 0.0], &bes, &h).feasible);
        assert!(!bes_feasible(&[50.0, 0.0], &[1.0, 0.0], &bes, &h).feasible);
        // discharging below c_min
        assert!(!bes_feasible(&[-10.0, 0.0], &[0.0, 0.0], &bes, &h).feasible);
    }

    #[test]
    fn aggregation_and_injection() {
        let h = horizon();
        let node = AggregatorNode {
            agg_id: 0,
            bus_id: 2,
            bes: None,
            sessions: vec![session(), EvSession { ev_id: 1, ..session() }],
            profiles: vec![
                EvbProfile { p_uc: vec![1.0; h.n], q_uc: vec![0.5; h.n] },
                EvbProfile { p_uc: vec![-1.0; h.n], q_uc: vec![0.25; h.n] },
            ],
        };
        let (p, q) = aggregate_uncontrollable(&node);
        assert!(p.iter().all(|&v| v.abs() < 1e-12)); // solar surplus cancels
        assert!(q.iter().all(|&v| (v - 0.75).abs() < 1e-12));

        let evs = vec![vec![2.0; h.n], vec![3.0; h.n]];
        let (pi, qi) = bus_injection(&node, &evs, &vec![-5.0; h.n], &vec![1.0; h.n]);
        assert!(pi.iter().all(|&v| v.abs() < 1e-12)); // 2+3-5 net zero
        assert!(qi.iter().all(|&v| (v - 1.75).abs() < 1e-12));
    }
}
