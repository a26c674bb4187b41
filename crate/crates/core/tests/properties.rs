//! Randomized structural properties on small generated cases.

use proptest::prelude::*;

use evcs::devices::{
    bus_injection, ev_feasible, simulate_ev, AggregatorNode, EvSession, EvbProfile,
};
use evcs::grid::{
    build_network, distflow_residual, line_losses, max_socp_gap, sweep_power_flow, Bus, Line,
    RadialNetwork,
};
use evcs::subproblems::project_ev;
use evcs::Horizon;

const H: Horizon = Horizon { n: 6, step_hours: 0.5 };

/// Random radial tree: bus i > 0 hangs off a random earlier bus.
fn tree_strategy() -> impl Strategy<Value = (RadialNetwork, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (2usize..8)
        .prop_flat_map(|nb| {
            let parents: Vec<BoxedStrategy<usize>> =
                (1..nb).map(|i| (0..i).boxed()).collect();
            let rx = proptest::collection::vec((1e-4..0.02f64, 1e-4..0.02f64), nb - 1);
            let loads = proptest::collection::vec(
                proptest::collection::vec((-30.0..60.0f64, -15.0..25.0f64), H.n),
                nb,
            );
            (Just(nb), parents, rx, loads)
        })
        .prop_map(|(nb, parents, rx, loads)| {
            let buses: Vec<Bus> = (0..nb)
                .map(|i| Bus {
                    id: i as u32 + 1,
                    is_root: i == 0,
                    v_min_sq: 0.8,
                    v_max_sq: 1.2,
                    v_ref_sq: 1.0,
                })
                .collect();
            let lines: Vec<Line> = parents
                .iter()
                .enumerate()
                .map(|(k, &p)| Line {
                    from: p as u32 + 1,
                    to: k as u32 + 2,
                    r: rx[k].0,
                    x: rx[k].1,
                })
                .collect();
            let net = build_network(buses, lines, 1000.0, 4.16, vec![]).expect("radial tree");
            let mut p = vec![vec![0.0; H.n]; nb];
            let mut q = vec![vec![0.0; H.n]; nb];
            for (b, row) in loads.iter().enumerate() {
                for (t, &(pl, ql)) in row.iter().enumerate() {
                    // per-unit injections on a 1 MVA base
                    p[b][t] = pl / 1000.0;
                    q[b][t] = ql / 1000.0;
                }
            }
            (net, p, q)
        })
}

fn session_strategy() -> impl Strategy<Value = EvSession> {
    (0usize..3, 0.0..6.0f64, 0.1..4.0f64).prop_map(|(arrival, c0, want)| {
        let departure = H.n; // full remaining window
        let window = (departure - arrival) as f64 * H.step_hours;
        let p_max = 4.0;
        let eta = 0.9;
        // keep the target reachable with slack
        let c_target = c0 + want.min(0.8 * eta * p_max * window);
        EvSession {
            ev_id: 0,
            agg_id: 0,
            arrival_step: arrival,
            departure_step: departure,
            c0,
            c_target,
            capacity: c0 + 20.0,
            eta,
            p_min: -2.0,
            p_max,
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// The exact sweep solution satisfies the branch-flow recursion, has
    /// zero cone gap, and dissipates energy in every line.
    #[test]
    fn sweep_solution_is_branch_flow_consistent((net, p, q) in tree_strategy()) {
        let state = sweep_power_flow(&net, &p, &q, H.n).unwrap();
        let res = distflow_residual(&net, &state, &p, &q).unwrap();
        prop_assert!(res.max_all() < 1e-9, "residual {}", res.max_all());
        let gap = max_socp_gap(&net, &state).unwrap();
        prop_assert!(gap < 1e-9, "gap {gap}");
        for (loss_kwh, _) in line_losses(&net, &state, H.step_hours).unwrap() {
            prop_assert!(loss_kwh >= 0.0);
        }
    }

    /// Stored EV energy follows the charging recursion and the
    /// uncontrolled policy is always feasible and exact on target.
    #[test]
    fn uncontrolled_policy_hits_target(session in session_strategy()) {
        let p = evcs::baselines::uncontrolled_profile(&session, &H);
        let report = ev_feasible(&p, &session, &H);
        prop_assert!(report.feasible, "{:?}", report.violations);
        let c = simulate_ev(&p, &session, &H);
        prop_assert!((c[session.departure_step] - session.c_target).abs() < 1e-9);
        for t in 0..H.n {
            let step = c[t] + session.eta * p[t] * H.step_hours;
            prop_assert!((c[t + 1] - step).abs() < 1e-12);
        }
    }

    /// Projection onto the charging polytope is idempotent and feasible.
    #[test]
    fn ev_projection_is_idempotent(
        session in session_strategy(),
        y in proptest::collection::vec(-8.0..8.0f64, H.n),
    ) {
        let p = project_ev(&y, &session, &H).unwrap();
        prop_assert!(ev_feasible(&p, &session, &H).feasible);
        let p2 = project_ev(&p, &session, &H).unwrap();
        let drift = p.iter().zip(&p2).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
        prop_assert!(drift < 1e-6, "drift {drift}");
    }

    /// Bus injection is the sum of its parts.
    #[test]
    fn bus_injection_is_additive(
        ev_rows in proptest::collection::vec(
            proptest::collection::vec(0.0..4.0f64, H.n), 1..4),
        bes in proptest::collection::vec((-3.0..3.0f64, -2.0..2.0f64), H.n),
        uc in proptest::collection::vec((0.0..5.0f64, 0.0..2.0f64), H.n),
    ) {
        let n_ev = ev_rows.len();
        let session = EvSession {
            ev_id: 0, agg_id: 0, arrival_step: 0, departure_step: H.n,
            c0: 0.0, c_target: 0.0, capacity: 50.0, eta: 1.0, p_min: 0.0, p_max: 4.0,
        };
        let node = AggregatorNode {
            agg_id: 0,
            bus_id: 1,
            bes: None,
            sessions: vec![session; n_ev],
            profiles: vec![EvbProfile {
                p_uc: uc.iter().map(|v| v.0).collect(),
                q_uc: uc.iter().map(|v| v.1).collect(),
            }; n_ev],
        };
        let bes_p: Vec<f64> = bes.iter().map(|v| v.0).collect();
        let bes_q: Vec<f64> = bes.iter().map(|v| v.1).collect();
        let (p, q) = bus_injection(&node, &ev_rows, &bes_p, &bes_q);
        for t in 0..H.n {
            let expect_p = ev_rows.iter().map(|r| r[t]).sum::<f64>()
                + bes_p[t]
                + n_ev as f64 * uc[t].0;
            let expect_q = bes_q[t] + n_ev as f64 * uc[t].1;
            prop_assert!((p[t] - expect_p).abs() < 1e-9);
            prop_assert!((q[t] - expect_q).abs() < 1e-9);
        }
    }
}
