//! Two-level negotiation: an outer consensus loop between the network
//! operator and the aggregators, each aggregator internally running a
//! sharing loop over its EVs.
//!
//! Outer iteration `k`:
//!   1. every aggregator re-optimizes its fleet against the operator's
//!      last request (inner sharing loop, possibly in parallel),
//!   2. the operator re-solves the relaxed network against the
//!      aggregators' commitments,
//!   3. scaled duals move by the disagreement.
//!
//! Inner iteration `l` (one aggregator): each EV improves its own
//! trajectory given a single broadcast correction signal, the aggregator
//! updates its fleet-mean commitment and battery, and the sharing dual
//! moves by the mean disagreement.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{evaluate_fixed_schedule, uncontrolled_profile};
use crate::devices::{aggregate_uncontrollable, AggregatorNode};
use crate::error::Result;
use crate::result::{DeviceSchedule, ScheduleResult, TraceRecord};
use crate::scenario::Instance;
use crate::subproblems::{
    solve_agg_subproblem, solve_dso_subproblem, solve_ev_subproblem, AggSubInput, DsoInput,
};
use crate::Horizon;

/// Negotiation parameters. Thresholds are per-component scales: a loop
/// stops when the residual 2-norm drops below `threshold * sqrt(dim)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AdmmConfig {
    /// Consensus penalty weights, active/reactive [per kW].
    pub rho_p: f64,
    pub rho_q: f64,
    /// Sharing penalty weight inside each aggregator.
    pub rho_j: f64,
    /// Outer (consensus) residual threshold [kW per component].
    pub th1: f64,
    /// Inner (sharing) residual threshold [kW per component].
    pub th2: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Reset the sharing duals every outer iteration instead of warm
    /// starting them.
    pub reset_inner_duals: bool,
    /// Residual balancing: halve/double the consensus weights whenever
    /// primal and dual residuals drift more than 10x apart. Greatly
    /// shortens the tail on price-driven schedules.
    pub adapt_rho: bool,
    /// Worker threads for the per-aggregator inner loops (`None`: rayon
    /// default). Results are identical for any worker count.
    pub workers: Option<usize>,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        AdmmConfig {
            rho_p: 0.1,
            rho_q: 0.1,
            rho_j: 1.0,
            th1: 1e-5,
            th2: 1e-5,
            max_outer: 1500,
            max_inner: 100,
            reset_inner_duals: false,
            adapt_rho: true,
            workers: None,
        }
    }
}

/// One aggregator's working variables during the negotiation [kW].
#[derive(Debug, Clone)]
pub struct AggWorkState {
    /// Per-EV charging trajectories.
    pub p_ev: Vec<Vec<f64>>,
    /// Fleet mean of `p_ev`.
    pub p_bar: Vec<f64>,
    /// The aggregator's committed fleet mean.
    pub p_bar_c: Vec<f64>,
    /// Scaled sharing dual.
    pub lambda: Vec<f64>,
    pub bes_p: Vec<f64>,
    pub bes_q: Vec<f64>,
    /// Cached aggregate uncontrollable load.
    pub p_uc: Vec<f64>,
    pub q_uc: Vec<f64>,
}

impl AggWorkState {
    /// Start from the uncontrolled policy with an idle battery.
    pub fn init(node: &AggregatorNode, horizon: &Horizon) -> Self {
        let n = horizon.n;
        let p_ev: Vec<Vec<f64>> = node
            .sessions
            .iter()
            .map(|s| uncontrolled_profile(s, horizon))
            .collect();
        let p_bar = mean_of(&p_ev, n);
        let (p_uc, q_uc) = aggregate_uncontrollable(node);
        AggWorkState {
            p_bar_c: p_bar.clone(),
            p_bar,
            p_ev,
            lambda: vec![0.0; n],
            bes_p: vec![0.0; n],
            bes_q: vec![0.0; n],
            p_uc,
            q_uc,
        }
    }

    /// Physical bus commitment implied by the current variables:
    /// `(n_ev * p_bar_c + p_uc + bes_p, q_uc + bes_q)`.
    pub fn commitment(&self, n_evs: usize) -> (Vec<f64>, Vec<f64>) {
        let p = (0..self.p_uc.len())
            .map(|t| n_evs as f64 * self.p_bar_c[t] + self.p_uc[t] + self.bes_p[t])
            .collect();
        let q = (0..self.q_uc.len()).map(|t| self.q_uc[t] + self.bes_q[t]).collect();
        (p, q)
    }

    /// Local electricity cost of the current device schedules [$].
    pub fn local_cost(&self, pi: &[f64]) -> f64 {
        pi.iter()
            .enumerate()
            .map(|(t, &c)| {
                c * (self.p_ev.iter().map(|p| p[t]).sum::<f64>()
                    + self.bes_p[t]
                    + self.p_uc[t])
            })
            .sum()
    }
}

fn mean_of(rows: &[Vec<f64>], n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n];
    if rows.is_empty() {
        return m;
    }
    for row in rows {
        for t in 0..n {
            m[t] += row[t];
        }
    }
    for v in &mut m {
        *v /= rows.len() as f64;
    }
    m
}

fn norm2(it: impl Iterator<Item = f64>) -> f64 {
    it.map(|v| v * v).sum::<f64>().sqrt()
}

/// One sweep of the sharing loop. Returns `(primal, dual)` residual
/// 2-norms over the fleet mean.
///
/// The EVs never see each other: each receives only the broadcast
/// correction `lambda + p_bar - p_bar_c` on top of its own trajectory.
pub fn inner_iterate(
    state: &mut AggWorkState,
    node: &AggregatorNode,
    pi: &[f64],
    cfg: &AdmmConfig,
    p_target: &[f64],
    q_target: &[f64],
    horizon: &Horizon,
) -> Result<(f64, f64)> {
    let n = horizon.n;
    let broadcast: Vec<f64> = (0..n)
        .map(|t| state.lambda[t] + state.p_bar[t] - state.p_bar_c[t])
        .collect();
    for (i, session) in node.sessions.iter().enumerate() {
        let d: Vec<f64> = (0..n).map(|t| state.p_ev[i][t] - broadcast[t]).collect();
        state.p_ev[i] = solve_ev_subproblem(pi, cfg.rho_j, &d, session, horizon)?;
    }
    state.p_bar = mean_of(&state.p_ev, n);
    let g: Vec<f64> = (0..n).map(|t| state.p_bar[t] + state.lambda[t]).collect();
    let out = solve_agg_subproblem(
        &AggSubInput {
            pi,
            rho_p: cfg.rho_p,
            rho_q: cfg.rho_q,
            rho_j: cfg.rho_j,
            p_target,
            q_target,
            p_uc: &state.p_uc,
            q_uc: &state.q_uc,
            g: &g,
            n_evs: node.n_evs(),
            bes: node.bes.as_ref(),
        },
        horizon,
    )?;
    let dual = cfg.rho_j
        * norm2((0..n).map(|t| out.p_bar_c[t] - state.p_bar_c[t]));
    state.p_bar_c = out.p_bar_c;
    state.bes_p = out.bes_p;
    state.bes_q = out.bes_q;
    for t in 0..n {
        state.lambda[t] += state.p_bar[t] - state.p_bar_c[t];
    }
    let primal = norm2((0..n).map(|t| state.p_bar[t] - state.p_bar_c[t]));
    Ok((primal, dual))
}

/// Outcome of one aggregator's full inner loop.
#[derive(Debug, Clone)]
pub struct InnerReport {
    pub iters: usize,
    pub primal: f64,
    pub dual: f64,
    pub converged: bool,
    /// `(inner index, primal, dual, local cost)` per iteration.
    pub trace: Vec<(usize, f64, f64, f64)>,
}

/// Run the sharing loop to its thresholds (at least one sweep).
pub fn inner_sharing(
    state: &mut AggWorkState,
    node: &AggregatorNode,
    pi: &[f64],
    cfg: &AdmmConfig,
    p_target: &[f64],
    q_target: &[f64],
    horizon: &Horizon,
) -> Result<InnerReport> {
    if cfg.reset_inner_duals {
        state.lambda = vec![0.0; horizon.n];
    }
    let th = cfg.th2 * (horizon.n as f64).sqrt();
    let mut trace = Vec::new();
    let (mut primal, mut dual) = (f64::INFINITY, f64::INFINITY);
    let mut iters = 0;
    while iters < cfg.max_inner {
        let (p, d) = inner_iterate(state, node, pi, cfg, p_target, q_target, horizon)?;
        iters += 1;
        trace.push((iters, p, d, state.local_cost(pi)));
        primal = p;
        dual = d;
        if primal < th && dual < th {
            break;
        }
    }
    Ok(InnerReport { iters, primal, dual, converged: primal < th && dual < th, trace })
}

/// Run the full two-level negotiation on an instance.
pub fn run(inst: &Instance, cfg: &AdmmConfig) -> Result<ScheduleResult> {
    match cfg.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| crate::Error::ConfigInvalid(format!("thread pool: {e}")))?
            .install(|| run_inner(inst, cfg)),
        None => run_inner(inst, cfg),
    }
}

fn run_inner(inst: &Instance, cfg: &AdmmConfig) -> Result<ScheduleResult> {
    inst.validate()?;
    let mut cfg = cfg.clone(); // rho_p / rho_q may adapt as we go
    let started = std::time::Instant::now();
    let horizon = inst.horizon;
    let n = horizon.n;
    let na = inst.nodes.len();
    let pi: Vec<f64> = inst.price.values.iter().map(|v| v * horizon.step_hours).collect();
    let agg_bus = inst.agg_bus_indices();

    let mut states: Vec<AggWorkState> =
        inst.nodes.iter().map(|node| AggWorkState::init(node, &horizon)).collect();
    // operator copies start at the aggregators' uncontrolled commitments
    let mut p_op: Vec<Vec<f64>> = Vec::with_capacity(na);
    let mut q_op: Vec<Vec<f64>> = Vec::with_capacity(na);
    for (j, s) in states.iter().enumerate() {
        let (p, q) = s.commitment(inst.nodes[j].n_evs());
        p_op.push(p);
        q_op.push(q);
    }
    let mut v_dual = vec![vec![0.0; n]; na];
    let mut u_dual = vec![vec![0.0; n]; na];

    let outer_th = cfg.th1 * ((2 * na * n) as f64).sqrt();
    let mut trace: Vec<TraceRecord> = Vec::new();
    let mut outer = 0;
    let mut converged = false;
    let mut last_state = None;
    let mut last_loss = 0.0;

    while outer < cfg.max_outer {
        outer += 1;
        // 1. aggregators, independently and in parallel
        let targets: Vec<(Vec<f64>, Vec<f64>)> = (0..na)
            .map(|j| {
                (
                    (0..n).map(|t| p_op[j][t] - v_dual[j][t]).collect(),
                    (0..n).map(|t| q_op[j][t] - u_dual[j][t]).collect(),
                )
            })
            .collect();
        let reports: Vec<InnerReport> = states
            .par_iter_mut()
            .zip(inst.nodes.par_iter())
            .zip(targets.par_iter())
            .map(|((state, node), (pt, qt))| {
                inner_sharing(state, node, &pi, &cfg, pt, qt, &horizon)
            })
            .collect::<Result<_>>()?;
        for (j, rep) in reports.iter().enumerate() {
            for &(l, p, d, cost) in &rep.trace {
                trace.push(TraceRecord {
                    outer,
                    agg: Some(inst.nodes[j].agg_id),
                    inner: Some(l),
                    primal: p,
                    dual: d,
                    objective: cost,
                    wall_ms: started.elapsed().as_secs_f64() * 1e3,
                });
            }
        }

        // 2. operator
        let commits: Vec<(Vec<f64>, Vec<f64>)> = states
            .iter()
            .zip(&inst.nodes)
            .map(|(s, node)| s.commitment(node.n_evs()))
            .collect();
        let p_targets: Vec<Vec<f64>> = (0..na)
            .map(|j| (0..n).map(|t| commits[j].0[t] + v_dual[j][t]).collect())
            .collect();
        let q_targets: Vec<Vec<f64>> = (0..na)
            .map(|j| (0..n).map(|t| commits[j].1[t] + u_dual[j][t]).collect())
            .collect();
        let dso = solve_dso_subproblem(
            &DsoInput {
                net: &inst.net,
                base_p: &inst.base_p,
                base_q: &inst.base_q,
                agg_bus: &agg_bus,
                p_target: &p_targets,
                q_target: &q_targets,
                rho_p: cfg.rho_p,
                rho_q: cfg.rho_q,
                loss_weight: inst.loss_weight,
            },
            &horizon,
        )?;

        // 3. duals and residuals
        let mut dual_sq = 0.0;
        for j in 0..na {
            for t in 0..n {
                dual_sq += (cfg.rho_p * (dso.p_agg[j][t] - p_op[j][t])).powi(2)
                    + (cfg.rho_q * (dso.q_agg[j][t] - q_op[j][t])).powi(2);
            }
        }
        let dual = dual_sq.sqrt();
        p_op = dso.p_agg;
        q_op = dso.q_agg;
        let primal = norm2((0..na).flat_map(|j| {
            (0..n)
                .map(|t| commits[j].0[t] - p_op[j][t])
                .chain((0..n).map(|t| commits[j].1[t] - q_op[j][t]))
                .collect::<Vec<_>>()
        }));
        for j in 0..na {
            for t in 0..n {
                v_dual[j][t] += commits[j].0[t] - p_op[j][t];
                u_dual[j][t] += commits[j].1[t] - q_op[j][t];
            }
        }
        let cost_estimate: f64 = states.iter().map(|s| s.local_cost(&pi)).sum();
        trace.push(TraceRecord {
            outer,
            agg: None,
            inner: None,
            primal,
            dual,
            objective: inst.loss_weight * dso.loss_kwh + cost_estimate,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        last_state = Some(dso.state);
        last_loss = dso.loss_kwh;
        if primal < outer_th && dual < outer_th {
            converged = true;
            break;
        }
        // residual balancing (scaled duals shrink/grow inversely so the
        // unscaled multipliers stay continuous)
        if cfg.adapt_rho {
            let grow = primal > 10.0 * dual;
            let shrink = dual > 10.0 * primal;
            if grow || shrink {
                let factor = if grow { 2.0 } else { 0.5 };
                let new_rho = (cfg.rho_p * factor).clamp(1e-4, 1e3);
                let applied = new_rho / cfg.rho_p;
                if applied != 1.0 {
                    cfg.rho_p *= applied;
                    cfg.rho_q *= applied;
                    for row in v_dual.iter_mut().chain(u_dual.iter_mut()) {
                        for v in row.iter_mut() {
                            *v /= applied;
                        }
                    }
                }
            }
        }
    }
    let _ = last_loss;

    let schedules: Vec<DeviceSchedule> = states
        .iter()
        .map(|s| DeviceSchedule {
            ev_power: s.p_ev.clone(),
            bes_p: s.bes_p.clone(),
            bes_q: s.bes_q.clone(),
        })
        .collect();
    // controlled charging with batteries is CC1, without is CC2
    let method = if inst.nodes.iter().any(|node| node.bes.is_some()) { "cc1" } else { "cc2" };
    evaluate_fixed_schedule(inst, method, &schedules, last_state, converged, outer, trace)
}

/// Run the negotiation with every battery removed (the EV-only policy).
pub fn run_without_bes(inst: &Instance, cfg: &AdmmConfig) -> Result<ScheduleResult> {
    let mut stripped = inst.clone();
    for node in &mut stripped.nodes {
        node.bes = None;
    }
    run(&stripped, cfg)
}
