//! The three negotiation subproblems (EV, aggregator, network operator)
//! plus two monolithic reference solves used for verification.
//!
//! All device quantities are kW. Network subproblems also run in kW:
//! flows are `P_kw = P_pu * s_base`, squared currents are scaled to
//! `i = i_pu * s_base` so every variable sits within a few orders of
//! magnitude of unity (raw `kW^2` currents defeat the backend's
//! equilibration), and the flow cone is written in per-unit. Losses come
//! out in kW as `r_pu * i`, and voltage drops stay per-unit squared.

use crate::conic::{solve_conic, AffineExpr, ConicProblem};
use crate::devices::{AggregatorNode, BesUnit, EvSession, FEAS_TOL};
use crate::error::{Error, Result};
use crate::grid::{NetworkState, RadialNetwork};
use crate::result::DeviceSchedule;
use crate::Horizon;

/// Backend tolerance for individual subproblem solves.
pub const SUB_TOL: f64 = 1e-8;
/// Tighter tolerance for network solves: the per-unit cone rows scale
/// down the duality gap, so loose gaps show up as visible cone slack.
pub const NET_TOL: f64 = 1e-10;
const SUB_MAX_ITER: u32 = 500;

// ---------------------------------------------------------------------------
// EV subproblem
// ---------------------------------------------------------------------------

/// Euclidean projection of `y` onto one EV's feasible set: charger box
/// inside the plug-in window, zero power outside, battery energy bounds,
/// and the designated departure energy.
///
/// The common case (interior energy bounds slack) reduces to a scalar
/// dual search on the terminal-energy constraint: `p = clamp(y + mu)`
/// with `mu` chosen so delivered energy matches. When the search result
/// violates an interior energy bound the exact QP is solved instead.
pub fn project_ev(y: &[f64], session: &EvSession, horizon: &Horizon) -> Result<Vec<f64>> {
    if y.len() != horizon.n {
        return Err(Error::DimensionMismatch("projection input".into()));
    }
    let w = session.window();
    let yw: Vec<f64> = y[w.clone()].to_vec();
    let need = (session.c_target - session.c0) / (session.eta * horizon.step_hours);
    if let Some(pw) = clamp_projection(&yw, session, need) {
        if energy_bounds_ok(&pw, session, horizon) {
            let mut p = vec![0.0; horizon.n];
            p[w].copy_from_slice(&pw);
            return Ok(p);
        }
    }
    project_ev_conic(y, session, horizon)
}

/// Scalar dual search: find `mu` with `sum clamp(y + mu) = need`, then
/// spread the leftover bisection residual over the unclamped steps.
fn clamp_projection(yw: &[f64], session: &EvSession, need: f64) -> Option<Vec<f64>> {
    let m = yw.len() as f64;
    let (lo0, hi0) = yw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
        (a.min(v), b.max(v))
    });
    let mut lo = session.p_min - hi0;
    let mut hi = session.p_max - lo0;
    let total = |mu: f64| -> f64 {
        yw.iter().map(|&v| (v + mu).clamp(session.p_min, session.p_max)).sum()
    };
    if total(lo) > need + 1e-12 || total(hi) < need - 1e-12 {
        return None; // infeasible box; caller's validation should prevent this
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if total(mid) < need {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mu = 0.5 * (lo + hi);
    let mut p: Vec<f64> = yw
        .iter()
        .map(|&v| (v + mu).clamp(session.p_min, session.p_max))
        .collect();
    // exact terminal equality: distribute the residual over free steps
    let free: Vec<usize> = (0..p.len())
        .filter(|&i| p[i] > session.p_min + 1e-9 && p[i] < session.p_max - 1e-9)
        .collect();
    let resid = need - p.iter().sum::<f64>();
    if !free.is_empty() {
        let share = resid / free.len() as f64;
        for i in free {
            p[i] += share;
        }
    } else if resid.abs() > m * 1e-9 {
        return None;
    }
    Some(p)
}

/// Interior energy bounds `0 <= c(t) <= capacity` along the window.
fn energy_bounds_ok(pw: &[f64], session: &EvSession, horizon: &Horizon) -> bool {
    let mut c = session.c0;
    for &p in &pw[..pw.len().saturating_sub(1)] {
        c += session.eta * horizon.step_hours * p;
        if c < -FEAS_TOL || c > session.capacity + FEAS_TOL {
            return false;
        }
    }
    true
}

/// Exact projection QP over the window variables.
fn project_ev_conic(y: &[f64], session: &EvSession, horizon: &Horizon) -> Result<Vec<f64>> {
    let w = session.window();
    let m = w.len();
    let mut prob = ConicProblem::new(m);
    for (i, t) in w.clone().enumerate() {
        prob.add_quad(i, i, 1.0);
        prob.add_linear(i, -y[t]);
        prob.add_range(i, session.p_min, session.p_max);
    }
    let k = session.eta * horizon.step_hours;
    // c(t) for t = arrival+1 .. departure: cumulative sums of the window
    for steps in 1..=m {
        let mut e = AffineExpr::constant(session.c0);
        for i in 0..steps {
            e = e.term(i, k);
        }
        if steps == m {
            prob.add_eq(e.plus(-session.c_target));
        } else {
            prob.add_nonneg(e.clone());
            prob.add_nonneg(AffineExpr {
                terms: e.terms.iter().map(|&(i, w)| (i, -w)).collect(),
                offset: session.capacity - e.offset,
            });
        }
    }
    let sol = solve_conic(&prob, SUB_TOL, SUB_MAX_ITER, None)?;
    let mut p = vec![0.0; horizon.n];
    for (i, t) in w.enumerate() {
        p[t] = sol.x[i];
    }
    Ok(p)
}

/// One EV's negotiation update:
/// `argmin pi' p + (rho/2) ||p - d||^2` over the EV's feasible set,
/// which is the projection of `d - pi / rho`.
///
/// `pi` is the per-step energy cost [$ per kW per step], `d` the
/// consensus-corrected previous iterate.
pub fn solve_ev_subproblem(
    pi: &[f64],
    rho: f64,
    d: &[f64],
    session: &EvSession,
    horizon: &Horizon,
) -> Result<Vec<f64>> {
    let y: Vec<f64> = d.iter().zip(pi).map(|(&di, &pii)| di - pii / rho).collect();
    project_ev(&y, session, horizon)
}

// ---------------------------------------------------------------------------
// Aggregator subproblem
// ---------------------------------------------------------------------------

/// Inputs to the aggregator's own update. Targets are what the operator
/// asked this bus to consume, corrected by the running consensus duals:
/// `p_target = P_op - v`, `q_target = Q_op - u` [kW / kVAr].
#[derive(Debug)]
pub struct AggSubInput<'a> {
    pub pi: &'a [f64],
    pub rho_p: f64,
    pub rho_q: f64,
    pub rho_j: f64,
    pub p_target: &'a [f64],
    pub q_target: &'a [f64],
    /// Aggregate uncontrollable load at this bus [kW / kVAr].
    pub p_uc: &'a [f64],
    pub q_uc: &'a [f64],
    /// Sharing target for the fleet mean: `p_mean + lambda`.
    pub g: &'a [f64],
    pub n_evs: usize,
    pub bes: Option<&'a BesUnit>,
}

#[derive(Debug, Clone)]
pub struct AggSubOutput {
    /// Fleet-mean charging commitment [kW].
    pub p_bar_c: Vec<f64>,
    pub bes_p: Vec<f64>,
    pub bes_q: Vec<f64>,
}

/// The aggregator's update: choose the fleet-mean commitment and battery
/// setpoints balancing the operator's consensus target against the
/// fleet's sharing target, plus the battery's own energy cost.
///
/// Without a battery the problem is a diagonal QP with the closed form
/// `p_bar_c = (rho_p (p_target - p_uc) + rho_j g) / (rho_p n + rho_j)`.
pub fn solve_agg_subproblem(inp: &AggSubInput, horizon: &Horizon) -> Result<AggSubOutput> {
    let n = horizon.n;
    let ne = inp.n_evs as f64;
    if inp.bes.is_none() {
        let p_bar_c = if inp.n_evs == 0 {
            vec![0.0; n]
        } else {
            (0..n)
                .map(|t| {
                    (inp.rho_p * (inp.p_target[t] - inp.p_uc[t]) + inp.rho_j * inp.g[t])
                        / (inp.rho_p * ne + inp.rho_j)
                })
                .collect()
        };
        return Ok(AggSubOutput { p_bar_c, bes_p: vec![0.0; n], bes_q: vec![0.0; n] });
    }
    let bes = inp.bes.unwrap();
    // vars: [p_bes | q_bes | p_bar_c?]
    let has_fleet = inp.n_evs > 0;
    let nv = if has_fleet { 3 * n } else { 2 * n };
    let mut prob = ConicProblem::new(nv);
    let (pb, qb, pc) = (0, n, 2 * n);
    for t in 0..n {
        prob.add_linear(pb + t, inp.pi[t]);
        // operator consensus: p_bes + n*p_bar_c + p_uc - p_target
        let mut e = AffineExpr::var(pb + t).plus(inp.p_uc[t] - inp.p_target[t]);
        if has_fleet {
            e = e.term(pc + t, ne);
        }
        prob.add_penalty(inp.rho_p, &e);
        prob.add_penalty(
            inp.rho_q,
            &AffineExpr::var(qb + t).plus(inp.q_uc[t] - inp.q_target[t]),
        );
        if has_fleet {
            // sharing: keep the commitment near the fleet's own mean
            prob.add_penalty(ne * inp.rho_j, &AffineExpr::var(pc + t).plus(-inp.g[t]));
        }
        // converter rating
        prob.add_soc(vec![
            AffineExpr::constant(bes.s_rating),
            AffineExpr::var(pb + t),
            AffineExpr::var(qb + t),
        ]);
    }
    // battery energy corridor
    let k = bes.eta * horizon.step_hours;
    for t in 1..=n {
        let mut e = AffineExpr::constant(bes.c0);
        for s in 0..t {
            e = e.term(pb + s, k);
        }
        prob.add_nonneg(e.clone().plus(-bes.c_min));
        prob.add_nonneg(AffineExpr {
            terms: e.terms.iter().map(|&(i, w)| (i, -w)).collect(),
            offset: bes.c_max - e.offset,
        });
    }
    let sol = solve_conic(&prob, SUB_TOL, SUB_MAX_ITER, None)?;
    Ok(AggSubOutput {
        p_bar_c: if has_fleet { sol.x[pc..pc + n].to_vec() } else { vec![0.0; n] },
        bes_p: sol.x[pb..pb + n].to_vec(),
        bes_q: sol.x[qb..qb + n].to_vec(),
    })
}

/// Monolithic aggregator solve (no sharing decomposition): optimizes all
/// EV trajectories and the battery jointly against the operator targets.
/// Serves as the convergence oracle for the fleet-level negotiation.
pub fn solve_agg_joint(
    node: &AggregatorNode,
    pi: &[f64],
    rho_p: f64,
    rho_q: f64,
    p_target: &[f64],
    q_target: &[f64],
    horizon: &Horizon,
) -> Result<DeviceSchedule> {
    let n = horizon.n;
    let (p_uc, q_uc) = crate::devices::aggregate_uncontrollable(node);
    let mut prob = ConicProblem::new(0);
    let mut next = 0usize;
    let evs: Vec<EvVars> = node
        .sessions
        .iter()
        .map(|s| add_ev_vars(&mut prob, &mut next, s, horizon, pi))
        .collect();
    let bes = node
        .bes
        .as_ref()
        .map(|b| add_bes_vars(&mut prob, &mut next, b, horizon, pi));
    for t in 0..n {
        let mut ep = AffineExpr::constant(p_uc[t] - p_target[t]);
        for ev in &evs {
            if let Some(v) = ev.var_at(t) {
                ep = ep.term(v, 1.0);
            }
        }
        let mut eq = AffineExpr::constant(q_uc[t] - q_target[t]);
        if let Some(b) = &bes {
            ep = ep.term(b.p + t, 1.0);
            eq = eq.term(b.q + t, 1.0);
        }
        prob.add_penalty(rho_p, &ep);
        prob.add_penalty(rho_q, &eq);
    }
    let sol = solve_conic(&prob, SUB_TOL, SUB_MAX_ITER, None)?;
    Ok(DeviceSchedule {
        ev_power: evs.iter().map(|ev| ev.extract(&sol.x, n)).collect(),
        bes_p: bes.as_ref().map_or(vec![0.0; n], |b| sol.x[b.p..b.p + n].to_vec()),
        bes_q: bes.as_ref().map_or(vec![0.0; n], |b| sol.x[b.q..b.q + n].to_vec()),
    })
}

struct EvVars {
    start: usize,
    window: std::ops::Range<usize>,
}

impl EvVars {
    fn var_at(&self, t: usize) -> Option<usize> {
        self.window.contains(&t).then(|| self.start + (t - self.window.start))
    }

    fn extract(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut p = vec![0.0; n];
        for t in self.window.clone() {
            p[t] = x[self.start + t - self.window.start];
        }
        p
    }
}

/// Add one EV's window variables with box, energy-corridor, terminal
/// equality, and energy-cost terms.
fn add_ev_vars(
    prob: &mut ConicProblem,
    next: &mut usize,
    session: &EvSession,
    horizon: &Horizon,
    pi: &[f64],
) -> EvVars {
    let w = session.window();
    let m = w.len();
    let start = prob.grow(next, m);
    for (i, t) in w.clone().enumerate() {
        prob.add_linear(start + i, pi[t]);
        prob.add_range(start + i, session.p_min, session.p_max);
    }
    let k = session.eta * horizon.step_hours;
    for steps in 1..=m {
        let mut e = AffineExpr::constant(session.c0);
        for i in 0..steps {
            e = e.term(start + i, k);
        }
        if steps == m {
            prob.add_eq(e.plus(-session.c_target));
        } else {
            prob.add_nonneg(e.clone());
            prob.add_nonneg(AffineExpr {
                terms: e.terms.iter().map(|&(i, w)| (i, -w)).collect(),
                offset: session.capacity - e.offset,
            });
        }
    }
    EvVars { start, window: w }
}

struct BesVars {
    p: usize,
    q: usize,
}

fn add_bes_vars(
    prob: &mut ConicProblem,
    next: &mut usize,
    bes: &BesUnit,
    horizon: &Horizon,
    pi: &[f64],
) -> BesVars {
    let n = horizon.n;
    let p = prob.grow(next, 2 * n);
    let q = p + n;
    for t in 0..n {
        prob.add_linear(p + t, pi[t]);
        prob.add_soc(vec![
            AffineExpr::constant(bes.s_rating),
            AffineExpr::var(p + t),
            AffineExpr::var(q + t),
        ]);
    }
    let k = bes.eta * horizon.step_hours;
    for t in 1..=n {
        let mut e = AffineExpr::constant(bes.c0);
        for s in 0..t {
            e = e.term(p + s, k);
        }
        prob.add_nonneg(e.clone().plus(-bes.c_min));
        prob.add_nonneg(AffineExpr {
            terms: e.terms.iter().map(|&(i, w)| (i, -w)).collect(),
            offset: bes.c_max - e.offset,
        });
    }
    BesVars { p, q }
}

// ---------------------------------------------------------------------------
// Network-operator subproblem
// ---------------------------------------------------------------------------

/// Inputs to the operator's per-step network solve. Targets are the
/// aggregators' latest commitments corrected by the consensus duals:
/// `p_target = P_agg + v` [kW].
#[derive(Debug)]
pub struct DsoInput<'a> {
    pub net: &'a RadialNetwork,
    /// Fixed baseline load per bus `[bus][t]` [kW], consumption positive.
    pub base_p: &'a [Vec<f64>],
    pub base_q: &'a [Vec<f64>],
    /// Network bus index of each aggregator.
    pub agg_bus: &'a [usize],
    pub p_target: &'a [Vec<f64>],
    pub q_target: &'a [Vec<f64>],
    pub rho_p: f64,
    pub rho_q: f64,
    /// Loss price [$ / kWh] in the operator objective.
    pub loss_weight: f64,
}

#[derive(Debug, Clone)]
pub struct DsoOutput {
    /// Relaxed network state, per-unit.
    pub state: NetworkState,
    /// Scheduled aggregator consumption `[agg][t]` [kW / kVAr].
    pub p_agg: Vec<Vec<f64>>,
    pub q_agg: Vec<Vec<f64>>,
    /// Loss energy of the relaxed model over the horizon [kWh].
    pub loss_kwh: f64,
}

/// Index helpers for one time-step's network variables, kW-scaled.
struct NetLayout {
    v_of: Vec<Option<usize>>, // non-root squared voltage var per bus
    n_net: usize,
}

impl NetLayout {
    fn new(net: &RadialNetwork) -> Self {
        let mut v_of = vec![None; net.n_buses()];
        let mut next = 3 * net.n_lines();
        for b in 0..net.n_buses() {
            if b != net.root_index() {
                v_of[b] = Some(next);
                next += 1;
            }
        }
        NetLayout { v_of, n_net: next }
    }

    fn p(&self, l: usize) -> usize {
        3 * l
    }
    fn q(&self, l: usize) -> usize {
        3 * l + 1
    }
    fn i(&self, l: usize) -> usize {
        3 * l + 2
    }
}

/// Append one time-step's branch-flow constraints and loss objective.
///
/// `off` shifts all network variable indices; `inj` maps a bus to extra
/// injection variables `(p_var, q_var)` on top of the constant base load.
fn add_network_block(
    prob: &mut ConicProblem,
    net: &RadialNetwork,
    lay: &NetLayout,
    off: usize,
    base_p_t: &dyn Fn(usize) -> f64,
    base_q_t: &dyn Fn(usize) -> f64,
    inj: &dyn Fn(usize) -> Option<(usize, usize)>,
    loss_cost_per_kw: f64,
) {
    let s_base = net.s_base_kva;
    for b in 0..net.n_buses() {
        let Some(pl) = net.parent_line(b) else { continue };
        let line = &net.lines[pl];
        // power balance at bus b: P_in - loss = local load + downstream;
        // loss_kw = r_pu * (i_pu * s_base)
        let mut ep = AffineExpr::var(off + lay.p(pl))
            .term(off + lay.i(pl), -line.r)
            .plus(-base_p_t(b));
        let mut eq = AffineExpr::var(off + lay.q(pl))
            .term(off + lay.i(pl), -line.x)
            .plus(-base_q_t(b));
        if let Some((pv, qv)) = inj(b) {
            ep = ep.term(pv, -1.0);
            eq = eq.term(qv, -1.0);
        }
        for &cl in net.child_lines(b) {
            ep = ep.term(off + lay.p(cl), -1.0);
            eq = eq.term(off + lay.q(cl), -1.0);
        }
        prob.add_eq(ep);
        prob.add_eq(eq);
        // voltage drop along the parent line (per-unit squared)
        let parent = net.line_from(pl);
        let mut ev = AffineExpr::var(off + lay.v_of[b].unwrap())
            .term(off + lay.p(pl), 2.0 * line.r / s_base)
            .term(off + lay.q(pl), 2.0 * line.x / s_base)
            .term(off + lay.i(pl), -(line.r * line.r + line.x * line.x) / s_base);
        match lay.v_of[parent] {
            Some(vp) => ev = ev.term(off + vp, -1.0),
            None => ev = ev.plus(-net.v_ref_sq()),
        }
        prob.add_eq(ev);
        prob.add_range(
            off + lay.v_of[b].unwrap(),
            net.buses[b].v_min_sq,
            net.buses[b].v_max_sq,
        );
        // relaxed flow cone on the sending end, in per-unit:
        // V_from * i_pu >= P_pu^2 + Q_pu^2
        let v_from: AffineExpr = match lay.v_of[parent] {
            Some(vp) => AffineExpr::var(off + vp),
            None => AffineExpr::constant(net.v_ref_sq()),
        };
        prob.add_rsoc(vec![
            v_from,
            AffineExpr { terms: vec![(off + lay.i(pl), 1.0 / s_base)], offset: 0.0 },
            AffineExpr { terms: vec![(off + lay.p(pl), 1.0 / s_base)], offset: 0.0 },
            AffineExpr { terms: vec![(off + lay.q(pl), 1.0 / s_base)], offset: 0.0 },
        ]);
        prob.add_lower_bound(off + lay.i(pl), 0.0);
        prob.add_linear(off + lay.i(pl), loss_cost_per_kw * line.r);
    }
}

/// Read one solved time-step back into per-unit state arrays.
fn read_network_block(
    net: &RadialNetwork,
    lay: &NetLayout,
    off: usize,
    x: &[f64],
    state: &mut NetworkState,
    t: usize,
) {
    let s_base = net.s_base_kva;
    for b in 0..net.n_buses() {
        state.v_sq[b][t] = match lay.v_of[b] {
            Some(v) => x[off + v],
            None => net.v_ref_sq(),
        };
    }
    for l in 0..net.n_lines() {
        state.p_flow[l][t] = x[off + lay.p(l)] / s_base;
        state.q_flow[l][t] = x[off + lay.q(l)] / s_base;
        state.i_sq[l][t] = x[off + lay.i(l)] / s_base;
    }
}

/// The operator's update: per-step loss-minimizing branch-flow solves
/// with a consensus penalty pulling each aggregator bus toward its
/// requested consumption. Steps are independent and solved in sequence.
pub fn solve_dso_subproblem(inp: &DsoInput, horizon: &Horizon) -> Result<DsoOutput> {
    use rayon::prelude::*;
    let net = inp.net;
    let lay = NetLayout::new(net);
    let na = inp.agg_bus.len();
    let n = horizon.n;
    // the per-step problems are independent; indexed collection keeps the
    // result order (and therefore every output bit) worker-independent
    let solutions: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|t| {
            let mut prob = ConicProblem::new(lay.n_net + 2 * na);
            for (j, &b) in inp.agg_bus.iter().enumerate() {
                let (pv, qv) = (lay.n_net + 2 * j, lay.n_net + 2 * j + 1);
                prob.add_penalty(inp.rho_p, &AffineExpr::var(pv).plus(-inp.p_target[j][t]));
                prob.add_penalty(inp.rho_q, &AffineExpr::var(qv).plus(-inp.q_target[j][t]));
                debug_assert!(net.parent_line(b).is_some(), "aggregator at root bus");
            }
            let inj = |b: usize| -> Option<(usize, usize)> {
                inp.agg_bus
                    .iter()
                    .position(|&ab| ab == b)
                    .map(|j| (lay.n_net + 2 * j, lay.n_net + 2 * j + 1))
            };
            add_network_block(
                &mut prob,
                net,
                &lay,
                0,
                &|b| inp.base_p[b][t],
                &|b| inp.base_q[b][t],
                &inj,
                inp.loss_weight * horizon.step_hours,
            );
            solve_conic(&prob, NET_TOL, SUB_MAX_ITER, None).map(|s| s.x)
        })
        .collect::<Result<_>>()?;
    let mut state = NetworkState::zeros(net, n);
    let mut p_agg = vec![vec![0.0; n]; na];
    let mut q_agg = vec![vec![0.0; n]; na];
    let mut loss_kwh = 0.0;
    for (t, x) in solutions.iter().enumerate() {
        read_network_block(net, &lay, 0, x, &mut state, t);
        for j in 0..na {
            p_agg[j][t] = x[lay.n_net + 2 * j];
            q_agg[j][t] = x[lay.n_net + 2 * j + 1];
        }
        for l in 0..net.n_lines() {
            loss_kwh += net.lines[l].r * x[lay.i(l)] * horizon.step_hours;
        }
    }
    Ok(DsoOutput { state, p_agg, q_agg, loss_kwh })
}

// ---------------------------------------------------------------------------
// Centralized reference solve
// ---------------------------------------------------------------------------

/// Outcome of the monolithic solve of the full relaxed problem: device
/// schedules, the relaxed network state, and the solver's objective.
pub struct CentralSolution {
    pub schedules: Vec<DeviceSchedule>,
    pub state: NetworkState,
    pub objective: f64,
}

/// Solve the whole relaxed scheduling problem in one conic program:
/// losses plus energy cost over all aggregators, subject to branch-flow
/// physics at every step and every device's constraints.
pub fn solve_centralized(inst: &crate::scenario::Instance, tol: f64) -> Result<CentralSolution> {
    let net = &inst.net;
    let horizon = &inst.horizon;
    let n = horizon.n;
    let lay = NetLayout::new(net);
    let na = inst.nodes.len();
    let agg_bus = inst.agg_bus_indices();
    let pi: Vec<f64> = inst.price.values.iter().map(|v| v * horizon.step_hours).collect();

    let mut prob = ConicProblem::new(n * lay.n_net + 2 * na * n);
    let mut next = n * lay.n_net + 2 * na * n;
    let agg_p = |j: usize, t: usize| n * lay.n_net + 2 * (j * n + t);
    let agg_q = |j: usize, t: usize| n * lay.n_net + 2 * (j * n + t) + 1;

    // device variables and their own constraints (price carried by the
    // aggregator injection vars below, not the devices)
    let zero_pi = vec![0.0; n];
    let mut evs: Vec<Vec<EvVars>> = Vec::with_capacity(na);
    let mut bess: Vec<Option<BesVars>> = Vec::with_capacity(na);
    for node in &inst.nodes {
        evs.push(
            node.sessions
                .iter()
                .map(|s| add_ev_vars(&mut prob, &mut next, s, horizon, &zero_pi))
                .collect(),
        );
        bess.push(
            node.bes
                .as_ref()
                .map(|b| add_bes_vars(&mut prob, &mut next, b, horizon, &zero_pi)),
        );
    }

    // link each aggregator's injection vars to its devices, charge energy
    // cost on the physical injection
    for (j, node) in inst.nodes.iter().enumerate() {
        let (p_uc, q_uc) = crate::devices::aggregate_uncontrollable(node);
        for t in 0..n {
            // -P_j + p_uc + devices = 0
            let mut ep = AffineExpr { terms: vec![(agg_p(j, t), -1.0)], offset: p_uc[t] };
            for ev in &evs[j] {
                if let Some(v) = ev.var_at(t) {
                    ep = ep.term(v, 1.0);
                }
            }
            let mut eq = AffineExpr { terms: vec![(agg_q(j, t), -1.0)], offset: q_uc[t] };
            if let Some(b) = &bess[j] {
                ep = ep.term(b.p + t, 1.0);
                eq = eq.term(b.q + t, 1.0);
            }
            prob.add_eq(ep);
            prob.add_eq(eq);
            prob.add_linear(agg_p(j, t), pi[t]);
        }
    }

    // network physics per step
    for t in 0..n {
        let inj = |b: usize| -> Option<(usize, usize)> {
            agg_bus.iter().position(|&ab| ab == b).map(|j| (agg_p(j, t), agg_q(j, t)))
        };
        add_network_block(
            &mut prob,
            net,
            &lay,
            t * lay.n_net,
            &|b| inst.base_p[b][t],
            &|b| inst.base_q[b][t],
            &inj,
            inst.loss_weight * horizon.step_hours,
        );
    }

    let sol = solve_conic(&prob, tol, 2000, None)?;
    let mut state = NetworkState::zeros(net, n);
    for t in 0..n {
        read_network_block(net, &lay, t * lay.n_net, &sol.x, &mut state, t);
    }
    let schedules = inst
        .nodes
        .iter()
        .enumerate()
        .map(|(j, _)| DeviceSchedule {
            ev_power: evs[j].iter().map(|ev| ev.extract(&sol.x, n)).collect(),
            bes_p: bess[j].as_ref().map_or(vec![0.0; n], |b| sol.x[b.p..b.p + n].to_vec()),
            bes_q: bess[j].as_ref().map_or(vec![0.0; n], |b| sol.x[b.q..b.q + n].to_vec()),
        })
        .collect();
    Ok(CentralSolution { schedules, state, objective: sol.objective })
}

impl ConicProblem {
    /// Reserve `count` fresh variables; returns the first index.
    fn grow(&mut self, next: &mut usize, count: usize) -> usize {
        let start = *next;
        *next += count;
        self.resize_vars(*next);
        start
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conic::kkt_residuals;
    use crate::devices::{bes_feasible, ev_feasible};
    use crate::grid::{build_network, max_socp_gap, sweep_power_flow, Bus, Line};
    use rand::Rng;
    use rand::SeedableRng;

    fn horizon() -> Horizon {
        Horizon { n: 12, step_hours: 0.5 }
    }

    fn session() -> EvSession {
        EvSession {
            ev_id: 0,
            agg_id: 0,
            arrival_step: 2,
            departure_step: 10,
            c0: 4.0,
            c_target: 10.0,
            capacity: 12.0,
            eta: 0.95,
            p_min: -4.0,
            p_max: 4.0,
        }
    }

    #[test]
    fn projection_matches_conic_on_random_points() {
        let h = horizon();
        let s = session();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..25 {
            let y: Vec<f64> = (0..h.n).map(|_| rng.gen_range(-8.0..8.0)).collect();
            let fast = project_ev(&y, &s, &h).unwrap();
            let exact = project_ev_conic(&y, &s, &h).unwrap();
            for t in 0..h.n {
                assert!(
                    (fast[t] - exact[t]).abs() < 1e-5,
                    "t={t} fast={} exact={}",
                    fast[t],
                    exact[t]
                );
            }
            assert!(ev_feasible(&fast, &s, &h).feasible);
        }
    }

    #[test]
    fn projection_is_idempotent_and_nonexpansive() {
        let h = horizon();
        let s = session();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let dist = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        };
        for _ in 0..10 {
            let y1: Vec<f64> = (0..h.n).map(|_| rng.gen_range(-8.0..8.0)).collect();
            let y2: Vec<f64> = (0..h.n).map(|_| rng.gen_range(-8.0..8.0)).collect();
            let p1 = project_ev(&y1, &s, &h).unwrap();
            let p2 = project_ev(&y2, &s, &h).unwrap();
            assert!(dist(&p1, &p2) <= dist(&y1, &y2) + 1e-7);
            let again = project_ev(&p1, &s, &h).unwrap();
            assert!(dist(&again, &p1) < 1e-6);
        }
    }

    #[test]
    fn ev_update_is_shifted_projection() {
        let h = horizon();
        let s = session();
        let pi = vec![0.05; h.n];
        let d = vec![1.0; h.n];
        let rho = 2.0;
        let direct = solve_ev_subproblem(&pi, rho, &d, &s, &h).unwrap();
        let y: Vec<f64> = d.iter().map(|v| v - 0.05 / rho).collect();
        let proj = project_ev(&y, &s, &h).unwrap();
        assert_eq!(direct, proj);
    }

    #[test]
    fn agg_closed_form_matches_conic() {
        let h = horizon();
        let n = h.n;
        let pi = vec![0.04; n];
        let p_target = vec![30.0; n];
        let q_target = vec![9.0; n];
        let p_uc = vec![10.0; n];
        let q_uc = vec![3.0; n];
        let g = vec![2.0; n];
        let inp = AggSubInput {
            pi: &pi,
            rho_p: 0.1,
            rho_q: 0.1,
            rho_j: 1.0,
            p_target: &p_target,
            q_target: &q_target,
            p_uc: &p_uc,
            q_uc: &q_uc,
            g: &g,
            n_evs: 5,
            bes: None,
        };
        let out = solve_agg_subproblem(&inp, &h).unwrap();
        // optimality condition of the scalar quadratic, per step
        for t in 0..n {
            let grad = 0.1 * 5.0 * (5.0 * out.p_bar_c[t] + p_uc[t] - p_target[t])
                + 5.0 * 1.0 * (out.p_bar_c[t] - g[t]);
            assert!(grad.abs() < 1e-9, "grad {grad}");
        }
        assert!(out.bes_p.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn agg_with_bes_respects_constraints_and_kkt() {
        let h = horizon();
        let n = h.n;
        let bes = BesUnit { c0: 30.0, c_min: 5.0, c_max: 55.0, eta: 0.95, s_rating: 50.0 };
        let pi: Vec<f64> = (0..n).map(|t| 0.03 + 0.01 * (t as f64)).collect();
        let p_target = vec![60.0; n];
        let q_target = vec![20.0; n];
        let p_uc = vec![10.0; n];
        let q_uc = vec![3.0; n];
        let g = vec![3.0; n];
        let inp = AggSubInput {
            pi: &pi,
            rho_p: 0.1,
            rho_q: 0.1,
            rho_j: 1.0,
            p_target: &p_target,
            q_target: &q_target,
            p_uc: &p_uc,
            q_uc: &q_uc,
            g: &g,
            n_evs: 4,
            bes: Some(&bes),
        };
        let out = solve_agg_subproblem(&inp, &h).unwrap();
        assert!(bes_feasible(&out.bes_p, &out.bes_q, &bes, &h).feasible);
        // the cheap-early price should load the battery early, not late
        assert!(out.bes_p[0] > out.bes_p[n - 1]);
    }

    fn two_bus_net() -> RadialNetwork {
        let buses = vec![
            Bus { id: 1, is_root: true, v_min_sq: 1.0, v_max_sq: 1.0, v_ref_sq: 1.0 },
            Bus { id: 2, is_root: false, v_min_sq: 0.81, v_max_sq: 1.21, v_ref_sq: 1.0 },
        ];
        let lines = vec![Line { from: 1, to: 2, r: 0.02, x: 0.04 }];
        build_network(buses, lines, 1000.0, 4.16, vec![2]).unwrap()
    }

    #[test]
    fn dso_pinned_matches_exact_power_flow() {
        // with a stiff consensus weight the operator must schedule the
        // target almost exactly; the relaxed solve should then agree
        // with the backward/forward sweep oracle
        let net = two_bus_net();
        let h = Horizon { n: 3, step_hours: 0.5 };
        let target = vec![vec![200.0, 350.0, 120.0]];
        let q_target = vec![vec![60.0, 100.0, 40.0]];
        let inp = DsoInput {
            net: &net,
            base_p: &vec![vec![0.0; 3]; 2],
            base_q: &vec![vec![0.0; 3]; 2],
            agg_bus: &[1],
            p_target: &target,
            q_target: &q_target,
            rho_p: 100.0,
            rho_q: 100.0,
            loss_weight: 1.0,
        };
        let out = solve_dso_subproblem(&inp, &h).unwrap();
        let p_pu = vec![vec![0.0; 3], target[0].iter().map(|v| v / 1000.0).collect()];
        let q_pu = vec![vec![0.0; 3], q_target[0].iter().map(|v| v / 1000.0).collect()];
        let exact = sweep_power_flow(&net, &p_pu, &q_pu, 3).unwrap();
        for t in 0..3 {
            assert!((out.p_agg[0][t] - target[0][t]).abs() < 0.01);
            assert!((out.state.v_sq[1][t] - exact.v_sq[1][t]).abs() < 1e-5);
            assert!((out.state.i_sq[0][t] - exact.i_sq[0][t]).abs() < 1e-5);
        }
        assert!(max_socp_gap(&net, &out.state).unwrap() < 1e-5);
        let exact_loss: f64 = 0.02 * exact.i_sq[0].iter().sum::<f64>() * 0.5 * 1000.0;
        assert!((out.loss_kwh - exact_loss).abs() / exact_loss < 1e-3);
    }

    #[test]
    fn dso_free_bus_cancels_the_base_load() {
        // with a negligible penalty weight the loss-minimizing schedule
        // nulls the line flow: injection = -base load, losses ~ 0
        let net = two_bus_net();
        let h = Horizon { n: 1, step_hours: 0.5 };
        let inp = DsoInput {
            net: &net,
            base_p: &vec![vec![0.0], vec![80.0]],
            base_q: &vec![vec![0.0], vec![20.0]],
            agg_bus: &[1],
            p_target: &vec![vec![500.0]],
            q_target: &vec![vec![100.0]],
            rho_p: 1e-9,
            rho_q: 1e-9,
            loss_weight: 1.0,
        };
        let out = solve_dso_subproblem(&inp, &h).unwrap();
        assert!((out.p_agg[0][0] + 80.0).abs() < 1.0, "p = {}", out.p_agg[0][0]);
        assert!((out.q_agg[0][0] + 20.0).abs() < 1.0, "q = {}", out.q_agg[0][0]);
        assert!(out.loss_kwh < 1e-4, "loss {}", out.loss_kwh);
    }

    #[test]
    fn agg_joint_satisfies_kkt_and_feasibility() {
        let h = horizon();
        let node = AggregatorNode {
            agg_id: 0,
            bus_id: 2,
            bes: Some(BesUnit { c0: 30.0, c_min: 5.0, c_max: 55.0, eta: 0.95, s_rating: 50.0 }),
            sessions: vec![session(), EvSession { ev_id: 1, arrival_step: 3, ..session() }],
            profiles: vec![
                crate::devices::EvbProfile { p_uc: vec![2.0; h.n], q_uc: vec![0.6; h.n] },
                crate::devices::EvbProfile { p_uc: vec![1.5; h.n], q_uc: vec![0.5; h.n] },
            ],
        };
        let pi = vec![0.03; h.n];
        let sched = solve_agg_joint(
            &node,
            &pi,
            0.1,
            0.1,
            &vec![12.0; h.n],
            &vec![2.0; h.n],
            &h,
        )
        .unwrap();
        for (s, p) in node.sessions.iter().zip(&sched.ev_power) {
            assert!(ev_feasible(p, s, &h).feasible);
        }
        assert!(bes_feasible(&sched.bes_p, &sched.bes_q, node.bes.as_ref().unwrap(), &h)
            .feasible);
    }

    #[test]
    fn centralized_desk_instance_is_tight_and_feasible() {
        let inst = crate::scenario::desk_instance(1);
        let sol = solve_centralized(&inst, 1e-8).unwrap();
        assert!(max_socp_gap(&inst.net, &sol.state).unwrap() < 1e-4);
        for (node, sched) in inst.nodes.iter().zip(&sol.schedules) {
            for (s, p) in node.sessions.iter().zip(&sched.ev_power) {
                assert!(ev_feasible(p, s, &inst.horizon).feasible);
            }
            if let Some(b) = &node.bes {
                assert!(bes_feasible(&sched.bes_p, &sched.bes_q, b, &inst.horizon).feasible);
            }
        }
        // evaluated objective should agree with the solver's model
        let res = crate::baselines::evaluate_fixed_schedule(
            &inst,
            "central",
            &sol.schedules,
            Some(sol.state.clone()),
            true,
            0,
            Vec::new(),
        )
        .unwrap();
        assert!(
            (res.objective - sol.objective).abs() / sol.objective.abs() < 1e-3,
            "evaluated {} vs model {}",
            res.objective,
            sol.objective
        );
        // optimized charging should beat the uncontrolled baseline
        let ucc = crate::baselines::uncontrolled_schedule(&inst).unwrap();
        assert!(res.objective < ucc.objective);
    }

    #[test]
    fn kkt_close_on_ev_projection_qp() {
        let h = horizon();
        let s = session();
        let y: Vec<f64> = (0..h.n).map(|t| (t as f64 * 0.7).sin() * 5.0).collect();
        let w = s.window();
        let m = w.len();
        let mut prob = ConicProblem::new(m);
        for (i, t) in w.clone().enumerate() {
            prob.add_quad(i, i, 1.0);
            prob.add_linear(i, -y[t]);
            prob.add_range(i, s.p_min, s.p_max);
        }
        let k = s.eta * h.step_hours;
        let mut e = AffineExpr::constant(s.c0);
        for i in 0..m {
            e = e.term(i, k);
        }
        prob.add_eq(e.plus(-s.c_target));
        let sol = solve_conic(&prob, 1e-9, 200, None).unwrap();
        let (stat, feas) = kkt_residuals(&prob, &sol);
        assert!(stat < 1e-6 && feas < 1e-7, "stat {stat} feas {feas}");
    }
}
