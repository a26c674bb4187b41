//! Reference charging policies and physical evaluation of fixed schedules.

use crate::devices::{bus_injection, simulate_bes, simulate_ev, EvSession};
use crate::error::{Error, Result};
use crate::grid::{line_losses, sweep_power_flow};
use crate::result::{AggSchedule, DeviceSchedule, ScheduleResult, TraceRecord};
use crate::scenario::Instance;
use crate::Horizon;

/// Uncontrolled ("plug and charge") trajectory: full rate from arrival
/// until the target energy is reached, with the final step truncated so
/// the stored energy lands exactly on `c_target`.
pub fn uncontrolled_profile(session: &EvSession, horizon: &Horizon) -> Vec<f64> {
    let mut p = vec![0.0; horizon.n];
    let step_kwh = session.eta * session.p_max * horizon.step_hours;
    let mut remaining = session.c_target - session.c0;
    for t in session.window() {
        if remaining <= 0.0 {
            break;
        }
        if remaining >= step_kwh {
            p[t] = session.p_max;
            remaining -= step_kwh;
        } else {
            p[t] = remaining / (session.eta * horizon.step_hours);
            remaining = 0.0;
        }
    }
    p
}

/// Uncontrolled device schedules for every aggregator: each EV charges at
/// full rate on arrival, batteries stay idle.
pub fn uncontrolled_schedules(inst: &Instance) -> Vec<DeviceSchedule> {
    inst.nodes
        .iter()
        .map(|node| DeviceSchedule {
            ev_power: node
                .sessions
                .iter()
                .map(|s| uncontrolled_profile(s, &inst.horizon))
                .collect(),
            bes_p: vec![0.0; inst.horizon.n],
            bes_q: vec![0.0; inst.horizon.n],
        })
        .collect()
}

/// Run the uncontrolled baseline end to end (exact power flow, no solver).
pub fn uncontrolled_schedule(inst: &Instance) -> Result<ScheduleResult> {
    let schedules = uncontrolled_schedules(inst);
    evaluate_fixed_schedule(inst, "ucc", &schedules, None, true, 0, Vec::new())
}

/// Evaluate fixed device schedules against the exact power flow and
/// assemble the full result: per-aggregator trajectories and injections,
/// network state, losses, cost, and objective.
///
/// `schedules` is indexed like `inst.nodes`. Costs are charged on each
/// aggregator's physical net injection at the wholesale price.
pub fn evaluate_fixed_schedule(
    inst: &Instance,
    method: &str,
    schedules: &[DeviceSchedule],
    solver_state: Option<crate::grid::NetworkState>,
    converged: bool,
    outer_iters: usize,
    trace: Vec<TraceRecord>,
) -> Result<ScheduleResult> {
    if schedules.len() != inst.nodes.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} schedules for {} aggregators",
            schedules.len(),
            inst.nodes.len()
        )));
    }
    let n = inst.horizon.n;
    let t_h = inst.horizon.step_hours;
    let s_base = inst.net.s_base_kva;

    let mut aggs = Vec::with_capacity(inst.nodes.len());
    let mut p_inj_pu = inst.base_p.clone();
    let mut q_inj_pu = inst.base_q.clone();
    for row in p_inj_pu.iter_mut().chain(q_inj_pu.iter_mut()) {
        for v in row.iter_mut() {
            *v /= s_base;
        }
    }
    for (node, sched) in inst.nodes.iter().zip(schedules) {
        let (p, q) = bus_injection(node, &sched.ev_power, &sched.bes_p, &sched.bes_q);
        let bi = inst.net.bus_index(node.bus_id).ok_or(Error::UnknownBus(node.bus_id))?;
        for t in 0..n {
            p_inj_pu[bi][t] += p[t] / s_base;
            q_inj_pu[bi][t] += q[t] / s_base;
        }
        let ev_energy = node
            .sessions
            .iter()
            .zip(&sched.ev_power)
            .map(|(s, pw)| simulate_ev(pw, s, &inst.horizon))
            .collect();
        let bes_energy = node
            .bes
            .as_ref()
            .map(|b| simulate_bes(&sched.bes_p, b, &inst.horizon))
            .unwrap_or_default();
        aggs.push(AggSchedule {
            agg_id: node.agg_id,
            bus_id: node.bus_id,
            ev_power: sched.ev_power.clone(),
            ev_energy,
            bes_p: sched.bes_p.clone(),
            bes_q: sched.bes_q.clone(),
            bes_energy,
            p_inj: p,
            q_inj: q,
        });
    }

    let evaluated_state = sweep_power_flow(&inst.net, &p_inj_pu, &q_inj_pu, n)?;
    let loss_kwh: f64 = line_losses(&inst.net, &evaluated_state, t_h)?
        .iter()
        .map(|(p, _)| p)
        .sum();
    let cost_usd: f64 = aggs
        .iter()
        .map(|a| {
            (0..n)
                .map(|t| inst.price.values[t] * a.p_inj[t] * t_h)
                .sum::<f64>()
        })
        .sum();
    Ok(ScheduleResult {
        method: method.to_string(),
        horizon: inst.horizon,
        price: inst.price.values.clone(),
        aggs,
        solver_state,
        evaluated_state,
        loss_kwh,
        cost_usd,
        objective: inst.loss_weight * loss_kwh + cost_usd,
        converged,
        outer_iters,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::devices::ev_feasible;
    use crate::scenario::desk_instance;

    #[test]
    fn uncontrolled_hits_target_exactly() {
        let h = Horizon { n: 10, step_hours: 0.5 };
        let s = EvSession {
            ev_id: 0,
            agg_id: 0,
            arrival_step: 2,
            departure_step: 9,
            c0: 4.0,
            c_target: 9.0, // 5 kWh at eta=1: 2.5 full steps
            capacity: 12.0,
            eta: 1.0,
            p_min: 0.0,
            p_max: 4.0,
        };
        let p = uncontrolled_profile(&s, &h);
        assert_eq!(&p[..5], &[0.0, 0.0, 4.0, 4.0, 2.0]);
        assert!(p[5..].iter().all(|&v| v == 0.0));
        assert!(ev_feasible(&p, &s, &h).feasible);
    }

    #[test]
    fn desk_uncontrolled_evaluates() {
        let inst = desk_instance(7);
        let res = uncontrolled_schedule(&inst).unwrap();
        assert_eq!(res.method, "ucc");
        assert!(res.loss_kwh > 0.0);
        assert!(res.cost_usd > 0.0);
        // every EV lands on its target
        for (node, agg) in inst.nodes.iter().zip(&res.aggs) {
            for (s, c) in node.sessions.iter().zip(&agg.ev_energy) {
                assert!((c[s.departure_step] - s.c_target).abs() < 1e-9);
            }
        }
        // feeder head supplies loads plus losses
        let head: f64 = res.evaluated_state.p_flow[inst
            .net
            .parent_line(inst.net.bus_index(2).unwrap())
            .unwrap()]
        .iter()
        .sum::<f64>()
            * inst.horizon.step_hours
            * inst.net.s_base_kva;
        let load: f64 = (0..inst.net.n_buses())
            .map(|b| inst.base_p[b].iter().sum::<f64>())
            .sum::<f64>()
            * inst.horizon.step_hours
            + res
                .aggs
                .iter()
                .map(|a| a.p_inj.iter().sum::<f64>() * inst.horizon.step_hours)
                .sum::<f64>();
        assert!((head - load - res.loss_kwh).abs() < 1e-6, "head {head} load {load}");
    }
}
