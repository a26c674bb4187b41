//! Radial distribution network model in branch-flow (DistFlow) form.
//!
//! All quantities are per-unit on the network bases (`s_base_kva`,
//! `v_base_kv`). Voltages and currents are stored as squared magnitudes
//! (`V = |v|^2`, `I = |i|^2`), which is the representation in which the
//! second-order-cone relaxation of the flow equations is convex.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// One bus of the network. Voltage bounds are on squared magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: u32,
    pub is_root: bool,
    /// Squared lower voltage bound [p.u.^2] (non-root buses).
    pub v_min_sq: f64,
    /// Squared upper voltage bound [p.u.^2] (non-root buses).
    pub v_max_sq: f64,
    /// Squared reference voltage [p.u.^2] (meaningful on the root only).
    pub v_ref_sq: f64,
}

/// A distribution line, directed away from the root after validation.
#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    pub from: u32,
    pub to: u32,
    /// Resistance [p.u.]
    pub r: f64,
    /// Reactance [p.u.]
    pub x: f64,
}

/// Validated radial network: a tree rooted at the (single) root bus.
///
/// Bus and line order is preserved from construction; `NetworkState`
/// vectors are indexed in that order.
#[derive(Debug, Clone)]
pub struct RadialNetwork {
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    /// Power base [kVA].
    pub s_base_kva: f64,
    /// Voltage base [kV].
    pub v_base_kv: f64,
    /// Bus ids flagged as aggregator locations in the source data.
    pub agg_buses: Vec<u32>,
    // Derived topology.
    bus_index: HashMap<u32, usize>,
    root: usize,
    /// Parent line index for each bus (None for the root).
    parent_line: Vec<Option<usize>>,
    /// Child line indices for each bus.
    child_lines: Vec<Vec<usize>>,
    /// Bus indices in breadth-first order from the root.
    bfs_order: Vec<usize>,
}

impl RadialNetwork {
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn n_lines(&self) -> usize {
        self.lines.len()
    }

    pub fn root_index(&self) -> usize {
        self.root
    }

    pub fn bus_index(&self, id: u32) -> Option<usize> {
        self.bus_index.get(&id).copied()
    }

    /// Index of the line feeding bus `b` (None for the root).
    pub fn parent_line(&self, b: usize) -> Option<usize> {
        self.parent_line[b]
    }

    /// Lines leaving bus `b` toward its children.
    pub fn child_lines(&self, b: usize) -> &[usize] {
        &self.child_lines[b]
    }

    /// Bus indices in breadth-first order from the root.
    pub fn bfs_order(&self) -> &[usize] {
        &self.bfs_order
    }

    /// Receiving-end bus index of line `l`.
    pub fn line_to(&self, l: usize) -> usize {
        self.bus_index[&self.lines[l].to]
    }

    /// Sending-end bus index of line `l`.
    pub fn line_from(&self, l: usize) -> usize {
        self.bus_index[&self.lines[l].from]
    }

    pub fn v_ref_sq(&self) -> f64 {
        self.buses[self.root].v_ref_sq
    }
}

/// Squared voltages, squared currents, and sending-end line flows over a
/// horizon of `n` steps. Indexed `[bus][t]` / `[line][t]` in network order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub v_sq: Vec<Vec<f64>>,
    pub i_sq: Vec<Vec<f64>>,
    pub p_flow: Vec<Vec<f64>>,
    pub q_flow: Vec<Vec<f64>>,
    pub n: usize,
}

impl NetworkState {
    pub fn zeros(net: &RadialNetwork, n: usize) -> Self {
        NetworkState {
            v_sq: vec![vec![net.v_ref_sq(); n]; net.n_buses()],
            i_sq: vec![vec![0.0; n]; net.n_lines()],
            p_flow: vec![vec![0.0; n]; net.n_lines()],
            q_flow: vec![vec![0.0; n]; net.n_lines()],
            n,
        }
    }

    fn check_dims(&self, net: &RadialNetwork) -> Result<()> {
        let ok = self.v_sq.len() == net.n_buses()
            && self.i_sq.len() == net.n_lines()
            && self.p_flow.len() == net.n_lines()
            && self.q_flow.len() == net.n_lines()
            && self.v_sq.iter().all(|v| v.len() == self.n)
            && self.i_sq.iter().all(|v| v.len() == self.n)
            && self.p_flow.iter().all(|v| v.len() == self.n)
            && self.q_flow.iter().all(|v| v.len() == self.n);
        if ok {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(
                "network state does not match network/horizon".into(),
            ))
        }
    }
}

/// Validate bus/line data and derive the tree topology.
///
/// Lines are reoriented to point away from the root; their order is kept.
pub fn build_network(
    buses: Vec<Bus>,
    lines: Vec<Line>,
    s_base_kva: f64,
    v_base_kv: f64,
    agg_buses: Vec<u32>,
) -> Result<RadialNetwork> {
    let mut bus_index = HashMap::new();
    for (i, b) in buses.iter().enumerate() {
        if bus_index.insert(b.id, i).is_some() {
            return Err(Error::DuplicateBus(b.id));
        }
        if b.v_min_sq >= b.v_max_sq && !b.is_root {
            return Err(Error::ConfigInvalid(format!(
                "bus {}: v_min_sq must be < v_max_sq",
                b.id
            )));
        }
    }
    let roots: Vec<usize> = buses
        .iter()
        .enumerate()
        .filter(|(_, b)| b.is_root)
        .map(|(i, _)| i)
        .collect();
    let root = match roots.as_slice() {
        [] => return Err(Error::NoRoot),
        [r] => *r,
        _ => return Err(Error::MultipleRoots),
    };
    for l in &lines {
        for id in [l.from, l.to] {
            if !bus_index.contains_key(&id) {
                return Err(Error::UnknownBus(id));
            }
        }
    }
    if lines.len() > buses.len().saturating_sub(1) {
        return Err(Error::CycleDetected);
    }

    // BFS from root over the undirected line set; orient lines on the way.
    let nb = buses.len();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nb];
    for (li, l) in lines.iter().enumerate() {
        adj[bus_index[&l.from]].push(li);
        adj[bus_index[&l.to]].push(li);
    }
    let mut lines = lines;
    let mut visited = vec![false; nb];
    let mut parent_line = vec![None; nb];
    let mut child_lines: Vec<Vec<usize>> = vec![Vec::new(); nb];
    let mut bfs_order = vec![root];
    visited[root] = true;
    let mut head = 0;
    while head < bfs_order.len() {
        let b = bfs_order[head];
        head += 1;
        for &li in &adj[b] {
            let (fi, ti) = (bus_index[&lines[li].from], bus_index[&lines[li].to]);
            let other = if fi == b { ti } else { fi };
            if Some(li) == parent_line[b] {
                continue;
            }
            if visited[other] {
                return Err(Error::CycleDetected);
            }
            if fi != b {
                // Point the line away from the root.
                let l = &mut lines[li];
                std::mem::swap(&mut l.from, &mut l.to);
            }
            visited[other] = true;
            parent_line[other] = Some(li);
            child_lines[b].push(li);
            bfs_order.push(other);
        }
    }
    if let Some((i, _)) = visited.iter().enumerate().find(|(_, v)| !**v) {
        return Err(Error::Disconnected(buses[i].id));
    }
    for l in &lines {
        if l.r < 0.0 || l.x < 0.0 {
            return Err(Error::ConfigInvalid(format!(
                "line {}-{}: negative impedance",
                l.from, l.to
            )));
        }
    }
    for a in &agg_buses {
        if !bus_index.contains_key(a) {
            return Err(Error::UnknownBus(*a));
        }
    }
    Ok(RadialNetwork {
        buses,
        lines,
        s_base_kva,
        v_base_kv,
        agg_buses,
        bus_index,
        root,
        parent_line,
        child_lines,
        bfs_order,
    })
}

/// Per-timestep maxima of the DistFlow equation residuals.
#[derive(Debug, Clone)]
pub struct DistflowResiduals {
    /// Active power balance, max over buses, per step.
    pub active: Vec<f64>,
    /// Reactive power balance, max over buses, per step.
    pub reactive: Vec<f64>,
    /// Voltage drop equation, max over lines, per step.
    pub voltage: Vec<f64>,
    /// Current definition `V*I = P^2 + Q^2`, max over lines, per step.
    pub current: Vec<f64>,
}

impl DistflowResiduals {
    pub fn max_all(&self) -> f64 {
        self.active
            .iter()
            .chain(&self.reactive)
            .chain(&self.voltage)
            .chain(&self.current)
            .fold(0.0f64, |a, &b| a.max(b))
    }
}

/// Evaluate the DistFlow residuals for a state against per-bus injections
/// (consumption positive, p.u., indexed `[bus][t]` in network order).
/// The root bus balance is not checked (the root supplies the slack).
pub fn distflow_residual(
    net: &RadialNetwork,
    state: &NetworkState,
    p_inj: &[Vec<f64>],
    q_inj: &[Vec<f64>],
) -> Result<DistflowResiduals> {
    state.check_dims(net)?;
    let n = state.n;
    if p_inj.len() != net.n_buses()
        || q_inj.len() != net.n_buses()
        || p_inj.iter().any(|v| v.len() != n)
        || q_inj.iter().any(|v| v.len() != n)
    {
        return Err(Error::DimensionMismatch("injection arrays".into()));
    }
    let mut res = DistflowResiduals {
        active: vec![0.0; n],
        reactive: vec![0.0; n],
        voltage: vec![0.0; n],
        current: vec![0.0; n],
    };
    for t in 0..n {
        for b in 0..net.n_buses() {
            let Some(pl) = net.parent_line(b) else { continue };
            let line = &net.lines[pl];
            let mut p = state.p_flow[pl][t] - line.r * state.i_sq[pl][t];
            let mut q = state.q_flow[pl][t] - line.x * state.i_sq[pl][t];
            for &cl in net.child_lines(b) {
                p -= state.p_flow[cl][t];
                q -= state.q_flow[cl][t];
            }
            res.active[t] = res.active[t].max((p_inj[b][t] - p).abs());
            res.reactive[t] = res.reactive[t].max((q_inj[b][t] - q).abs());
        }
        for (l, line) in net.lines.iter().enumerate() {
            let (fi, ti) = (net.line_from(l), net.line_to(l));
            let drop = state.v_sq[fi][t] - state.v_sq[ti][t]
                - 2.0 * (line.r * state.p_flow[l][t] + line.x * state.q_flow[l][t])
                + (line.r * line.r + line.x * line.x) * state.i_sq[l][t];
            res.voltage[t] = res.voltage[t].max(drop.abs());
            let cur = state.v_sq[fi][t] * state.i_sq[l][t]
                - state.p_flow[l][t].powi(2)
                - state.q_flow[l][t].powi(2);
            res.current[t] = res.current[t].max(cur.abs());
        }
    }
    Ok(res)
}

/// Cone gap `V_i * I_ij - (P_ij^2 + Q_ij^2)` per line per step [p.u.^2].
///
/// Non-negative everywhere means the relaxed constraint holds; near zero
/// everywhere means the relaxation is tight and the exact current
/// definition is recovered.
pub fn socp_gap(net: &RadialNetwork, state: &NetworkState) -> Result<Vec<Vec<f64>>> {
    state.check_dims(net)?;
    let mut gap = vec![vec![0.0; state.n]; net.n_lines()];
    for l in 0..net.n_lines() {
        let fi = net.line_from(l);
        for t in 0..state.n {
            gap[l][t] = state.v_sq[fi][t] * state.i_sq[l][t]
                - state.p_flow[l][t].powi(2)
                - state.q_flow[l][t].powi(2);
        }
    }
    Ok(gap)
}

pub fn max_socp_gap(net: &RadialNetwork, state: &NetworkState) -> Result<f64> {
    let gap = socp_gap(net, state)?;
    Ok(gap
        .iter()
        .flatten()
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b.abs())))
}

/// Per-line energy losses over the horizon: `(kWh, kVArh)`.
pub fn line_losses(
    net: &RadialNetwork,
    state: &NetworkState,
    t_h: f64,
) -> Result<Vec<(f64, f64)>> {
    state.check_dims(net)?;
    let mut out = Vec::with_capacity(net.n_lines());
    for (l, line) in net.lines.iter().enumerate() {
        let i_sum: f64 = state.i_sq[l].iter().sum();
        out.push((
            line.r * i_sum * t_h * net.s_base_kva,
            line.x * i_sum * t_h * net.s_base_kva,
        ));
    }
    Ok(out)
}

/// Exact AC power flow for fixed injections via backward/forward sweep.
///
/// Injections are consumption-positive, p.u., indexed `[bus][t]`. The
/// returned state satisfies the DistFlow equations (2a)-(2d) with equality
/// to the sweep tolerance; voltage bounds are *not* enforced.
pub fn sweep_power_flow(
    net: &RadialNetwork,
    p_inj: &[Vec<f64>],
    q_inj: &[Vec<f64>],
    n: usize,
) -> Result<NetworkState> {
    if p_inj.len() != net.n_buses() || q_inj.len() != net.n_buses() {
        return Err(Error::DimensionMismatch("injection arrays".into()));
    }
    let nb = net.n_buses();
    let nl = net.n_lines();
    let mut state = NetworkState::zeros(net, n);
    let v_ref = net.v_ref_sq().sqrt();
    for t in 0..n {
        // Complex voltages and branch currents, flat start.
        let mut v: Vec<(f64, f64)> = vec![(v_ref, 0.0); nb];
        let mut i_br: Vec<(f64, f64)> = vec![(0.0, 0.0); nl];
        let mut converged = false;
        for _ in 0..300 {
            // Backward: accumulate branch currents from the leaves.
            let mut node_cur: Vec<(f64, f64)> = (0..nb)
                .map(|b| {
                    // i = conj(S / v)
                    let (vr, vi) = v[b];
                    let vm2 = vr * vr + vi * vi;
                    let (p, q) = (p_inj[b][t], q_inj[b][t]);
                    // S/v = (p+jq)(vr - j vi)^-1 -> conj((p+jq)/v)
                    let re = (p * vr + q * vi) / vm2;
                    let im = (p * vi - q * vr) / vm2;
                    (re, im)
                })
                .collect();
            for &b in net.bfs_order().iter().rev() {
                if let Some(pl) = net.parent_line(b) {
                    i_br[pl] = node_cur[b];
                    let parent = net.line_from(pl);
                    node_cur[parent].0 += node_cur[b].0;
                    node_cur[parent].1 += node_cur[b].1;
                }
            }
            // Forward: update voltages from the root.
            let mut max_dv = 0.0f64;
            for &b in net.bfs_order() {
                if let Some(pl) = net.parent_line(b) {
                    let parent = net.line_from(pl);
                    let line = &net.lines[pl];
                    let (ir, ii) = i_br[pl];
                    let new = (
                        v[parent].0 - (line.r * ir - line.x * ii),
                        v[parent].1 - (line.r * ii + line.x * ir),
                    );
                    max_dv = max_dv.max((new.0 - v[b].0).abs() + (new.1 - v[b].1).abs());
                    v[b] = new;
                }
            }
            if max_dv < 1e-13 {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::IllConditioned(
                "backward/forward sweep did not converge".into(),
            ));
        }
        for b in 0..nb {
            state.v_sq[b][t] = v[b].0 * v[b].0 + v[b].1 * v[b].1;
        }
        for l in 0..nl {
            let parent = net.line_from(l);
            let (ir, ii) = i_br[l];
            state.i_sq[l][t] = ir * ir + ii * ii;
            // Sending-end S = v_parent * conj(i)
            let (vr, vi) = v[parent];
            state.p_flow[l][t] = vr * ir + vi * ii;
            state.q_flow[l][t] = vi * ir - vr * ii;
        }
    }
    Ok(state)
}

// ---------------------------------------------------------------------------
// Grid file format
// ---------------------------------------------------------------------------

/// Parse the plain-text grid format:
///
/// ```text
/// sbase_kva 1000
/// vbase_kv 4.16
/// bus 650 root vref 1.0
/// bus 632 vmin 0.97 vmax 1.03
/// bus 634 agg vmin 0.97 vmax 1.03
/// line 650 632 r 0.00416 x 0.01138
/// ```
///
/// Voltage bounds are given as magnitudes [p.u.] and squared on load.
pub fn parse_grid(text: &str, label: &str) -> Result<RadialNetwork> {
    let perr = |msg: String| Error::Parse {
        path: label.to_string(),
        message: msg,
    };
    let mut s_base = None;
    let mut v_base = None;
    let mut buses = Vec::new();
    let mut lines = Vec::new();
    let mut agg_buses = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| perr(format!("line {}: bad number '{}'", lineno + 1, s)))
        };
        match toks[0] {
            "sbase_kva" => s_base = Some(num(toks.get(1).copied().unwrap_or(""))?),
            "vbase_kv" => v_base = Some(num(toks.get(1).copied().unwrap_or(""))?),
            "bus" => {
                let id: u32 = toks
                    .get(1)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| perr(format!("line {}: bus needs an id", lineno + 1)))?;
                let mut is_root = false;
                let mut is_agg = false;
                let (mut vmin, mut vmax, mut vref) = (f64::NAN, f64::NAN, 1.0);
                let mut i = 2;
                while i < toks.len() {
                    match toks[i] {
                        "root" => {
                            is_root = true;
                            i += 1;
                        }
                        "agg" => {
                            is_agg = true;
                            i += 1;
                        }
                        "vmin" | "vmax" | "vref" => {
                            let v = num(toks.get(i + 1).copied().unwrap_or(""))?;
                            match toks[i] {
                                "vmin" => vmin = v,
                                "vmax" => vmax = v,
                                _ => vref = v,
                            }
                            i += 2;
                        }
                        other => {
                            return Err(perr(format!(
                                "line {}: unknown bus attribute '{}'",
                                lineno + 1,
                                other
                            )))
                        }
                    }
                }
                if !is_root && (vmin.is_nan() || vmax.is_nan()) {
                    return Err(perr(format!(
                        "line {}: non-root bus {} needs vmin and vmax",
                        lineno + 1,
                        id
                    )));
                }
                if is_agg {
                    agg_buses.push(id);
                }
                buses.push(Bus {
                    id,
                    is_root,
                    v_min_sq: if vmin.is_nan() { vref * vref } else { vmin * vmin },
                    v_max_sq: if vmax.is_nan() { vref * vref } else { vmax * vmax },
                    v_ref_sq: vref * vref,
                });
            }
            "line" => {
                let from: u32 = toks
                    .get(1)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| perr(format!("line {}: bad line record", lineno + 1)))?;
                let to: u32 = toks
                    .get(2)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| perr(format!("line {}: bad line record", lineno + 1)))?;
                let (mut r, mut x) = (f64::NAN, f64::NAN);
                let mut i = 3;
                while i + 1 < toks.len() {
                    match toks[i] {
                        "r" => r = num(toks[i + 1])?,
                        "x" => x = num(toks[i + 1])?,
                        other => {
                            return Err(perr(format!(
                                "line {}: unknown line attribute '{}'",
                                lineno + 1,
                                other
                            )))
                        }
                    }
                    i += 2;
                }
                if r.is_nan() || x.is_nan() {
                    return Err(perr(format!(
                        "line {}: line record needs r and x",
                        lineno + 1
                    )));
                }
                lines.push(Line { from, to, r, x });
            }
            other => {
                return Err(perr(format!(
                    "line {}: unknown record '{}'",
                    lineno + 1,
                    other
                )))
            }
        }
    }
    let s_base = s_base.ok_or_else(|| perr("missing sbase_kva".into()))?;
    let v_base = v_base.ok_or_else(|| perr("missing vbase_kv".into()))?;
    build_network(buses, lines, s_base, v_base, agg_buses)
}

pub fn load_grid(path: &std::path::Path) -> Result<RadialNetwork> {
    let text = std::fs::read_to_string(path)?;
    parse_grid(&text, &path.display().to_string())
}

/// Serialize a network back to the grid text format.
pub fn grid_to_string(net: &RadialNetwork) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "sbase_kva {}", net.s_base_kva);
    let _ = writeln!(s, "vbase_kv {}", net.v_base_kv);
    for b in &net.buses {
        if b.is_root {
            let _ = writeln!(s, "bus {} root vref {}", b.id, b.v_ref_sq.sqrt());
        } else {
            let agg = if net.agg_buses.contains(&b.id) { " agg" } else { "" };
            let _ = writeln!(
                s,
                "bus {}{} vmin {} vmax {}",
                b.id,
                agg,
                b.v_min_sq.sqrt(),
                b.v_max_sq.sqrt()
            );
        }
    }
    for l in &net.lines {
        let _ = writeln!(s, "line {} {} r {} x {}", l.from, l.to, l.r, l.x);
    }
    s
}

/// The single-phase balanced 13-bus feeder used by the shipped scenarios,
/// with aggregators at buses 634, 646, 675, 680, 652 and 611.
///
/// Impedances are positive-sequence equivalents of the standard feeder
/// configurations (the in-line transformer is modeled by its leakage
/// impedance; regulator and capacitors are dropped). See `data/ieee13.grid`.
pub fn ieee13_modified() -> RadialNetwork {
    parse_grid(include_str!("../../../data/ieee13.grid"), "ieee13.grid")
        .expect("embedded ieee13.grid must be valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_bus() -> RadialNetwork {
        build_network(
            vec![
                Bus { id: 1, is_root: true, v_min_sq: 1.0, v_max_sq: 1.0, v_ref_sq: 1.0 },
                Bus { id: 2, is_root: false, v_min_sq: 0.9409, v_max_sq: 1.0609, v_ref_sq: 1.0 },
            ],
            vec![Line { from: 1, to: 2, r: 0.01, x: 0.02 }],
            1000.0,
            4.16,
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn smallest_tree_is_valid() {
        let net = two_bus();
        assert_eq!(net.n_buses(), 2);
        assert_eq!(net.n_lines(), 1);
        assert_eq!(net.parent_line(net.bus_index(2).unwrap()), Some(0));
    }

    #[test]
    fn triangle_is_a_cycle() {
        let buses = (1..=3)
            .map(|id| Bus {
                id,
                is_root: id == 1,
                v_min_sq: 0.9,
                v_max_sq: 1.1,
                v_ref_sq: 1.0,
            })
            .collect();
        let lines = vec![
            Line { from: 1, to: 2, r: 0.01, x: 0.01 },
            Line { from: 2, to: 3, r: 0.01, x: 0.01 },
            Line { from: 3, to: 1, r: 0.01, x: 0.01 },
        ];
        assert!(matches!(
            build_network(buses, lines, 1000.0, 4.16, vec![]),
            Err(Error::CycleDetected)
        ));
    }

    #[test]
    fn disconnected_detected() {
        let buses = (1..=3)
            .map(|id| Bus {
                id,
                is_root: id == 1,
                v_min_sq: 0.9,
                v_max_sq: 1.1,
                v_ref_sq: 1.0,
            })
            .collect();
        let lines = vec![Line { from: 1, to: 2, r: 0.01, x: 0.01 }];
        assert!(matches!(
            build_network(buses, lines, 1000.0, 4.16, vec![]),
            Err(Error::Disconnected(3))
        ));
    }

    #[test]
    fn ieee13_shape() {
        let net = ieee13_modified();
        assert_eq!(net.n_buses(), 13);
        assert_eq!(net.n_lines(), 12);
        let mut aggs = net.agg_buses.clone();
        aggs.sort();
        assert_eq!(aggs, vec![611, 634, 646, 652, 675, 680]);
    }

    #[test]
    fn no_load_network_has_zero_residuals() {
        let net = two_bus();
        let state = NetworkState::zeros(&net, 4);
        let zero = vec![vec![0.0; 4]; 2];
        let res = distflow_residual(&net, &state, &zero, &zero).unwrap();
        assert_eq!(res.max_all(), 0.0);
    }

    #[test]
    fn perturbed_flow_shifts_active_residual() {
        let net = two_bus();
        let mut state = NetworkState::zeros(&net, 1);
        state.p_flow[0][0] = 1.0;
        let zero = vec![vec![0.0; 1]; 2];
        let res = distflow_residual(&net, &state, &zero, &zero).unwrap();
        assert!((res.active[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gap_linearity_in_current() {
        let net = two_bus();
        let zero = vec![vec![0.0; 1]; 2];
        let mut state = sweep_power_flow(&net, &zero, &zero, 1).unwrap();
        state.i_sq[0][0] += 0.1;
        let gap = socp_gap(&net, &state).unwrap();
        assert!((gap[0][0] - 0.1 * state.v_sq[0][0]).abs() < 1e-12);
    }

    #[test]
    fn loss_arithmetic() {
        let net = two_bus();
        let mut state = NetworkState::zeros(&net, 48);
        for t in 0..48 {
            state.i_sq[0][t] = 1.0;
        }
        let losses = line_losses(&net, &state, 0.5).unwrap();
        assert!((losses[0].0 - 0.01 * 1.0 * 24.0 * 1000.0).abs() < 1e-9);
        assert!((losses[0].0 - 240.0).abs() < 1e-9);
    }

    #[test]
    fn sweep_solves_distflow_exactly() {
        let net = ieee13_modified();
        let n = 3;
        let mut p = vec![vec![0.0; n]; net.n_buses()];
        let mut q = vec![vec![0.0; n]; net.n_buses()];
        for b in 0..net.n_buses() {
            if b != net.root_index() {
                for t in 0..n {
                    p[b][t] = 0.05 + 0.01 * (b as f64) + 0.02 * (t as f64);
                    q[b][t] = 0.02 + 0.005 * (b as f64);
                }
            }
        }
        let state = sweep_power_flow(&net, &p, &q, n).unwrap();
        let res = distflow_residual(&net, &state, &p, &q).unwrap();
        assert!(res.max_all() < 1e-9, "max residual {}", res.max_all());
        let gap = max_socp_gap(&net, &state).unwrap();
        assert!(gap < 1e-9, "gap {gap}");
    }
}
