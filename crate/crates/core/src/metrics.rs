//! Post-run reporting: losses, costs, voltages, feeder peak, and the
//! energy-accounting identity, plus CSV/plain-text emission.

use std::io::Write as _;
use std::path::Path;

use crate::error::Result;
use crate::grid::{line_losses, NetworkState, RadialNetwork};
use crate::result::ScheduleResult;
use crate::scenario::Instance;

/// Per-aggregator electricity cost [$], charged on the physical net bus
/// injection at the wholesale price.
pub fn charging_cost(result: &ScheduleResult) -> Vec<(u32, f64)> {
    result
        .aggs
        .iter()
        .map(|a| {
            let cost = a
                .p_inj
                .iter()
                .zip(&result.price)
                .map(|(&p, &c)| c * p * result.horizon.step_hours)
                .sum();
            (a.agg_id, cost)
        })
        .collect()
}

/// Per-line `(from, to, kWh, kVArh)` energy losses over the horizon.
pub fn loss_table(
    net: &RadialNetwork,
    state: &NetworkState,
    t_h: f64,
) -> Result<Vec<(u32, u32, f64, f64)>> {
    Ok(line_losses(net, state, t_h)?
        .into_iter()
        .zip(&net.lines)
        .map(|((kwh, kvarh), l)| (l.from, l.to, kwh, kvarh))
        .collect())
}

/// Apparent power through the feeder head per step [kVA]: the combined
/// flow on the lines leaving the root bus.
pub fn feeder_profile(net: &RadialNetwork, state: &NetworkState) -> Vec<f64> {
    let root_lines: Vec<usize> = net.child_lines(net.root_index()).to_vec();
    (0..state.n)
        .map(|t| {
            let p: f64 = root_lines.iter().map(|&l| state.p_flow[l][t]).sum();
            let q: f64 = root_lines.iter().map(|&l| state.q_flow[l][t]).sum();
            (p * p + q * q).sqrt() * net.s_base_kva
        })
        .collect()
}

/// Peak apparent feeder load over the horizon [kVA].
pub fn feeder_peak(net: &RadialNetwork, state: &NetworkState) -> f64 {
    feeder_profile(net, state).into_iter().fold(0.0, f64::max)
}

/// Voltage-magnitude summary against per-bus limits.
#[derive(Debug, Clone)]
pub struct VoltageReport {
    /// Lowest / highest magnitude anywhere [p.u.] with their locations.
    pub min: (f64, u32, usize),
    pub max: (f64, u32, usize),
    /// `(bus, step, magnitude)` for every out-of-bounds sample.
    pub violations: Vec<(u32, usize, f64)>,
}

pub fn voltage_report(net: &RadialNetwork, state: &NetworkState) -> VoltageReport {
    let mut min = (f64::INFINITY, 0u32, 0usize);
    let mut max = (f64::NEG_INFINITY, 0u32, 0usize);
    let mut violations = Vec::new();
    for (b, bus) in net.buses.iter().enumerate() {
        for t in 0..state.n {
            let v = state.v_sq[b][t].max(0.0).sqrt();
            if v < min.0 {
                min = (v, bus.id, t);
            }
            if v > max.0 {
                max = (v, bus.id, t);
            }
            let (lo, hi) = (bus.v_min_sq.sqrt(), bus.v_max_sq.sqrt());
            if v < lo - 1e-9 || v > hi + 1e-9 {
                violations.push((bus.id, t, v));
            }
        }
    }
    VoltageReport { min, max, violations }
}

/// Relative error of the energy balance on the exact-flow evaluation:
/// feeder input = consumption + line losses.
pub fn energy_accounting(inst: &Instance, result: &ScheduleResult) -> Result<f64> {
    let t_h = result.horizon.step_hours;
    let state = &result.evaluated_state;
    let root_lines = inst.net.child_lines(inst.net.root_index());
    let head_kwh: f64 = root_lines
        .iter()
        .map(|&l| state.p_flow[l].iter().sum::<f64>() * t_h * inst.net.s_base_kva)
        .sum();
    let base_kwh: f64 = inst
        .base_p
        .iter()
        .map(|row| row.iter().sum::<f64>() * t_h)
        .sum();
    let agg_kwh: f64 = result
        .aggs
        .iter()
        .map(|a| a.p_inj.iter().sum::<f64>() * t_h)
        .sum();
    let loss_kwh: f64 = line_losses(&inst.net, state, t_h)?
        .iter()
        .map(|(p, _)| p)
        .sum();
    let scale = head_kwh.abs().max(1.0);
    Ok((head_kwh - base_kwh - agg_kwh - loss_kwh).abs() / scale)
}

/// Write the full report set for one or more runs into `dir`:
/// `losses.csv`, `costs.csv`, `voltages.csv`, `feeder.csv`, `trace.csv`,
/// and a human-readable `summary.txt`.
pub fn emit(dir: &Path, inst: &Instance, results: &[&ScheduleResult]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let t_h = inst.horizon.step_hours;

    let mut f = std::fs::File::create(dir.join("losses.csv"))?;
    writeln!(f, "method,from,to,loss_kwh,loss_kvarh")?;
    for r in results {
        for (from, to, kwh, kvarh) in loss_table(&inst.net, &r.evaluated_state, t_h)? {
            writeln!(f, "{},{from},{to},{kwh:.6},{kvarh:.6}", r.method)?;
        }
    }

    let mut f = std::fs::File::create(dir.join("costs.csv"))?;
    writeln!(f, "method,agg_id,cost_usd")?;
    for r in results {
        for (agg, cost) in charging_cost(r) {
            writeln!(f, "{},{agg},{cost:.6}", r.method)?;
        }
        writeln!(f, "{},total,{:.6}", r.method, r.cost_usd)?;
    }

    let mut f = std::fs::File::create(dir.join("voltages.csv"))?;
    writeln!(f, "method,bus,step,v_pu")?;
    for r in results {
        for (b, bus) in inst.net.buses.iter().enumerate() {
            for t in 0..r.evaluated_state.n {
                let v = r.evaluated_state.v_sq[b][t].max(0.0).sqrt();
                writeln!(f, "{},{},{t},{v:.6}", r.method, bus.id)?;
            }
        }
    }

    let mut f = std::fs::File::create(dir.join("feeder.csv"))?;
    writeln!(f, "method,step,apparent_kva")?;
    for r in results {
        for (t, s) in feeder_profile(&inst.net, &r.evaluated_state).iter().enumerate() {
            writeln!(f, "{},{t},{s:.4}", r.method)?;
        }
    }

    let mut f = std::fs::File::create(dir.join("trace.csv"))?;
    writeln!(f, "method,outer,agg,inner,primal,dual,objective,wall_ms")?;
    for r in results {
        for rec in &r.trace {
            writeln!(
                f,
                "{},{},{},{},{:.9},{:.9},{:.6},{:.1}",
                r.method,
                rec.outer,
                rec.agg.map_or(String::new(), |a| a.to_string()),
                rec.inner.map_or(String::new(), |i| i.to_string()),
                rec.primal,
                rec.dual,
                rec.objective,
                rec.wall_ms
            )?;
        }
    }

    let mut f = std::fs::File::create(dir.join("summary.txt"))?;
    for r in results {
        let vr = voltage_report(&inst.net, &r.evaluated_state);
        let acct = energy_accounting(inst, r)?;
        writeln!(f, "method {}", r.method)?;
        writeln!(f, "  converged        {} ({} outer iterations)", r.converged, r.outer_iters)?;
        writeln!(f, "  objective        {:.4} $", r.objective)?;
        writeln!(f, "  charging cost    {:.4} $", r.cost_usd)?;
        writeln!(f, "  line losses      {:.3} kWh", r.loss_kwh)?;
        writeln!(f, "  feeder peak      {:.1} kVA", feeder_peak(&inst.net, &r.evaluated_state))?;
        writeln!(
            f,
            "  voltage range    [{:.4}, {:.4}] p.u. ({} violation samples)",
            vr.min.0,
            vr.max.0,
            vr.violations.len()
        )?;
        writeln!(f, "  energy balance   {acct:.2e} relative error")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::uncontrolled_schedule;
    use crate::scenario::desk_instance;

    #[test]
    fn accounting_closes_on_exact_flow() {
        let inst = desk_instance(0);
        let res = uncontrolled_schedule(&inst).unwrap();
        let err = energy_accounting(&inst, &res).unwrap();
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn feeder_peak_is_max_of_profile() {
        let inst = desk_instance(0);
        let res = uncontrolled_schedule(&inst).unwrap();
        let prof = feeder_profile(&inst.net, &res.evaluated_state);
        let peak = feeder_peak(&inst.net, &res.evaluated_state);
        assert!(prof.iter().all(|&s| s <= peak));
        assert!(prof.contains(&peak));
        assert!(peak > 0.0);
    }

    #[test]
    fn emit_writes_all_files() {
        let inst = desk_instance(0);
        let res = uncontrolled_schedule(&inst).unwrap();
        let dir = tempfile::tempdir().unwrap();
        emit(dir.path(), &inst, &[&res]).unwrap();
        for name in ["losses.csv", "costs.csv", "voltages.csv", "feeder.csv", "trace.csv", "summary.txt"] {
            let content = std::fs::read_to_string(dir.path().join(name)).unwrap();
            assert!(!content.is_empty(), "{name} empty");
        }
        let costs = std::fs::read_to_string(dir.path().join("costs.csv")).unwrap();
        assert!(costs.lines().count() >= 4); // header + 2 aggs + total
    }

    #[test]
    fn per_line_losses_sum_to_total() {
        let inst = desk_instance(0);
        let res = uncontrolled_schedule(&inst).unwrap();
        let table =
            loss_table(&inst.net, &res.evaluated_state, inst.horizon.step_hours).unwrap();
        let total: f64 = table.iter().map(|(_, _, kwh, _)| kwh).sum();
        assert!((total - res.loss_kwh).abs() < 1e-9);
    }
}
