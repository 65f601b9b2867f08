//! Hydraulic solver checks against independent root-finding oracles.

use std::collections::VecDeque;
use std::sync::Arc;

use aqueduct_core::hydraulics::{solve_step, HydraulicNetwork, Node, PumpCurve, SolverOptions};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const G: f64 = 9.81;

fn resistance(length: f64, diameter: f64, f: f64) -> f64 {
    8.0 * f * length / (G * std::f64::consts::PI.powi(2) * diameter.powi(5))
}

/// Flow in m³/s through a pipe for a head drop, exact Darcy-Weisbach.
fn dw_flow(r: f64, dh: f64) -> f64 {
    (dh.abs() / r).sqrt().copysign(dh)
}

fn pda(demand: f64, p: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else if p >= 30.0 {
        demand
    } else {
        demand * (p / 30.0).sqrt()
    }
}

fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let flo = f(lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (f(mid) > 0.0) == (flo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn two_node(head: f64, demand: f64) -> HydraulicNetwork {
    let mut net = HydraulicNetwork::new();
    let r = net.add_fixed_head("R", head);
    let j = net.add_junction("J", 0.0, demand);
    net.add_pipe("P", r, j, 1000.0, 0.5, 0.02);
    net
}

#[test]
fn two_node_pda_matches_bisection() {
    let r = resistance(1000.0, 0.5, 0.02);
    let demand = 360.0;
    // source head such that the junction sits at 7.5 m
    let half = demand / 3600.0 * 0.5;
    let source = 7.5 + r * half * half;
    let sol = solve_step(&two_node(source, demand), &SolverOptions::default()).unwrap();
    assert!(sol.converged);

    // oracle: source - p - r q(p)^2 = 0 with q(p) the PDA outflow
    let p_star = bisect(0.0, source, |p| {
        let q = pda(demand, p) / 3600.0;
        source - p - r * q * q
    });
    let j = sol.junctions[0];
    assert!((j.pressure - p_star).abs() < 1e-6, "{} vs {}", j.pressure, p_star);
    assert!((p_star - 7.5).abs() < 1e-9);
    assert!((j.delivered / demand - 0.5).abs() < 1e-6);
    assert!((j.delivered / demand - (j.pressure / 30.0).sqrt()).abs() < 1e-6);
}

/// Chain R - J1 - J2: bisection on the far head.
fn chain_oracle(h0: f64, r1: f64, r2: f64, e1: f64, d1: f64, e2: f64, d2: f64) -> (f64, f64) {
    let upstream = |h2: f64| {
        let q2 = pda(d2, h2 - e2) / 3600.0;
        let h1 = h2 + r2 * q2 * q2;
        let q1 = q2 + pda(d1, h1 - e1) / 3600.0;
        (h1, h0 - h1 - r1 * q1 * q1)
    };
    // with no delivery the far head can sit anywhere at or below elevation
    if upstream(e2.min(h0)).1 < 0.0 {
        let h1 = bisect(e1.min(h0) - 1000.0, h0, |h1| {
            let q1 = pda(d1, h1 - e1) / 3600.0;
            h0 - h1 - r1 * q1 * q1
        });
        return (h1, f64::NAN);
    }
    let h2 = bisect(e2.min(h0) - 1e-9, h0, |h2| upstream(h2).1);
    (upstream(h2).0, h2)
}

/// R1 - J - R2: bisection on the junction head.
fn tee_oracle(ha: f64, hb: f64, ra: f64, rb: f64, e: f64, d: f64) -> f64 {
    let lo = ha.min(hb) - 1000.0;
    let hi = ha.max(hb);
    bisect(lo, hi, |h| dw_flow(ra, ha - h) + dw_flow(rb, hb - h) - pda(d, h - e) / 3600.0)
}

#[test]
fn three_node_networks_match_root_find() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let opts = SolverOptions::default();
    for case in 0..300 {
        let l1 = rng.random_range(100.0..5000.0);
        let l2 = rng.random_range(100.0..5000.0);
        let dia1 = rng.random_range(0.1..1.0);
        let dia2 = rng.random_range(0.1..1.0);
        let f1 = rng.random_range(0.01..0.04);
        let f2 = rng.random_range(0.01..0.04);
        let (r1, r2) = (resistance(l1, dia1, f1), resistance(l2, dia2, f2));
        if case % 2 == 0 {
            let h0 = rng.random_range(20.0..80.0);
            let (e1, e2) = (rng.random_range(0.0..20.0), rng.random_range(0.0..20.0));
            let (d1, d2) = (rng.random_range(0.0..800.0), rng.random_range(0.0..800.0));
            let mut net = HydraulicNetwork::new();
            let r = net.add_fixed_head("R", h0);
            let j1 = net.add_junction("J1", e1, d1);
            let j2 = net.add_junction("J2", e2, d2);
            net.add_pipe("P1", r, j1, l1, dia1, f1);
            net.add_pipe("P2", j1, j2, l2, dia2, f2);
            let sol = solve_step(&net, &opts).unwrap();
            assert!(sol.converged, "case {case}");
            let (h1, h2) = chain_oracle(h0, r1, r2, e1, d1, e2, d2);
            assert!((sol.junctions[0].head - h1).abs() < 1e-6, "case {case}: {} vs {h1}", sol.junctions[0].head);
            if h2.is_finite() {
                assert!((sol.junctions[1].head - h2).abs() < 1e-6, "case {case}: {} vs {h2}", sol.junctions[1].head);
            } else {
                assert!(sol.junctions[1].delivered < 1e-9);
            }
        } else {
            let ha = rng.random_range(20.0..80.0);
            let hb = rng.random_range(20.0..80.0);
            let e = rng.random_range(0.0..20.0);
            let d = rng.random_range(0.0..2000.0);
            let mut net = HydraulicNetwork::new();
            let a = net.add_fixed_head("A", ha);
            let b = net.add_fixed_head("B", hb);
            let j = net.add_junction("J", e, d);
            net.add_pipe("PA", a, j, l1, dia1, f1);
            net.add_pipe("PB", j, b, l2, dia2, f2);
            let sol = solve_step(&net, &opts).unwrap();
            assert!(sol.converged, "case {case}");
            let h = tee_oracle(ha, hb, r1, r2, e, d);
            assert!((sol.junctions[0].head - h).abs() < 1e-6, "case {case}: {} vs {h}", sol.junctions[0].head);
        }
    }
}

fn pump_curve() -> Arc<PumpCurve> {
    Arc::new(PumpCurve {
        head: vec![[0.0, 70.0], [600.0, 62.0], [1200.0, 45.0], [1600.0, 25.0]],
        efficiency: vec![[0.0, 0.35], [600.0, 0.78], [1200.0, 0.82], [1600.0, 0.7]],
    })
}

/// Connected random network with loops; 3 to 10 nodes in total.
fn random_network(rng: &mut ChaCha8Rng, with_pumps: bool) -> HydraulicNetwork {
    random_network_with(rng, with_pumps, 2, true)
}

fn random_network_with(rng: &mut ChaCha8Rng, with_pumps: bool, max_fixed: usize, loops: bool) -> HydraulicNetwork {
    let total = rng.random_range(3..=10usize);
    let fixed = rng.random_range(1..=max_fixed.min(total - 1));
    let mut net = HydraulicNetwork::new();
    let mut nodes = Vec::new();
    for i in 0..fixed {
        nodes.push(net.add_fixed_head(format!("R{i}"), rng.random_range(30.0..90.0)));
    }
    for i in 0..total - fixed {
        nodes.push(net.add_junction(format!("J{i}"), rng.random_range(0.0..25.0), rng.random_range(0.0..600.0)));
    }
    let pipe = |net: &mut HydraulicNetwork, a: Node, b: Node, rng: &mut ChaCha8Rng, id: usize| {
        net.add_pipe(
            format!("P{id}"),
            a,
            b,
            rng.random_range(200.0..8000.0),
            rng.random_range(0.15..1.2),
            rng.random_range(0.01..0.035),
        );
    };
    let mut id = 0;
    for k in 1..nodes.len() {
        let parent = nodes[rng.random_range(0..k)];
        let child = nodes[k];
        if with_pumps && matches!(parent, Node::Fixed(_)) && matches!(child, Node::Junction(_)) && rng.random_bool(0.5) {
            net.add_pump(format!("S{k}"), parent, child, pump_curve(), rng.random_range(1..4), Some(1500.0));
        } else {
            pipe(&mut net, parent, child, rng, id);
            id += 1;
        }
    }
    let extra = if loops { rng.random_range(0..4) } else { 0 };
    for _ in 0..extra {
        let a = rng.random_range(0..nodes.len());
        let b = rng.random_range(0..nodes.len());
        if a != b && !(matches!(nodes[a], Node::Fixed(_)) && matches!(nodes[b], Node::Fixed(_))) {
            pipe(&mut net, nodes[a], nodes[b], rng, id);
            id += 1;
        }
    }
    net
}

fn node_index(net: &HydraulicNetwork, n: Node) -> usize {
    match n {
        Node::Junction(j) => j,
        Node::Fixed(f) => net.junctions.len() + f,
    }
}

/// Signed Darcy-Weisbach headloss summed around every fundamental cycle.
fn loop_closures(net: &HydraulicNetwork, flows: &[f64]) -> Vec<f64> {
    let n = net.junctions.len() + net.fixed_heads.len();
    let mut adj = vec![Vec::new(); n];
    for (k, p) in net.pipes.iter().enumerate() {
        let (a, b) = (node_index(net, p.from), node_index(net, p.to));
        adj[a].push((b, k, 1.0));
        adj[b].push((a, k, -1.0));
    }
    let loss = |k: usize| {
        let p = &net.pipes[k];
        let q = flows[k] / 3600.0;
        resistance(p.length, p.diameter, p.friction) * q * q.abs()
    };
    // potential along a BFS tree; each non-tree edge closes one cycle
    let mut potential = vec![f64::NAN; n];
    let mut tree_edge = vec![false; net.pipes.len()];
    for root in 0..n {
        if !potential[root].is_nan() {
            continue;
        }
        potential[root] = 0.0;
        let mut queue = VecDeque::from([root]);
        while let Some(u) = queue.pop_front() {
            for &(v, k, sign) in &adj[u] {
                if potential[v].is_nan() {
                    potential[v] = potential[u] - sign * loss(k);
                    tree_edge[k] = true;
                    queue.push_back(v);
                }
            }
        }
    }
    net.pipes
        .iter()
        .enumerate()
        .filter(|(k, _)| !tree_edge[*k])
        .map(|(k, p)| {
            let (a, b) = (node_index(net, p.from), node_index(net, p.to));
            potential[a] - loss(k) - potential[b]
        })
        .collect()
}

#[test]
fn random_networks_balance_mass_and_close_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let opts = SolverOptions::default();
    let mut loops_checked = 0;
    for case in 0..200 {
        let net = random_network(&mut rng, case % 3 == 0);
        let sol = solve_step(&net, &opts).unwrap();
        assert!(sol.converged, "case {case} did not converge: {sol:?}");
        // independent mass balance from the reported link flows
        let mut balance = vec![0.0; net.junctions.len()];
        for (p, r) in net.pipes.iter().zip(&sol.pipes) {
            if let Node::Junction(a) = p.from {
                balance[a] -= r.flow;
            }
            if let Node::Junction(b) = p.to {
                balance[b] += r.flow;
            }
        }
        for (p, r) in net.pumps.iter().zip(&sol.pumps) {
            if let Node::Junction(b) = p.to {
                balance[b] += r.flow;
            }
        }
        for (j, res) in sol.junctions.iter().enumerate() {
            let imbalance = balance[j] - res.delivered;
            assert!(imbalance.abs() <= 1e-6, "case {case} junction {j}: {imbalance}");
            assert!(res.delivered >= 0.0 && res.delivered <= net.junctions[j].demand + 1e-12);
        }
        for closure in loop_closures(&net, &sol.pipes.iter().map(|p| p.flow).collect::<Vec<_>>()) {
            assert!(closure.abs() <= 1e-6, "case {case}: loop closure {closure}");
            loops_checked += 1;
        }
    }
    assert!(loops_checked > 50);
}

#[test]
fn solution_is_invariant_under_junction_reordering() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..40 {
        let net = random_network(&mut rng, false);
        let nj = net.junctions.len();
        let perm: Vec<usize> = (0..nj).rev().collect();
        let mut shuffled = net.clone();
        let remap = |n: Node| match n {
            Node::Junction(j) => Node::Junction(perm[j]),
            other => other,
        };
        for (old, new) in perm.iter().enumerate() {
            shuffled.junctions[*new] = net.junctions[old].clone();
        }
        for p in &mut shuffled.pipes {
            p.from = remap(p.from);
            p.to = remap(p.to);
        }
        let a = solve_step(&net, &SolverOptions::default()).unwrap();
        let b = solve_step(&shuffled, &SolverOptions::default()).unwrap();
        for j in 0..nj {
            assert!((a.junctions[j].head - b.junctions[perm[j]].head).abs() < 1e-7);
            assert!((a.junctions[j].delivered - b.junctions[perm[j]].delivered).abs() < 1e-6);
        }
    }
}

// Monotonicity needs sources that cannot absorb water: a second fixed head
// reached through plain pipes can act as a sink. Interior pipes in a looped
// network are also excluded: a larger pipe from a partially supplied junction
// to a saturated one lowers the former's head and its delivery.
proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn raising_a_head_never_reduces_delivery(seed in 0u64..10_000, lift in 0.1f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = random_network_with(&mut rng, false, 1, true);
        let base = solve_step(&net, &SolverOptions::default()).unwrap();
        let mut raised = net.clone();
        raised.fixed_heads[0].head += lift;
        let after = solve_step(&raised, &SolverOptions::default()).unwrap();
        prop_assert!(base.converged && after.converged);
        prop_assert!(after.total_delivered() >= base.total_delivered() - 1e-6);
    }

    #[test]
    fn enlarging_a_pipe_never_reduces_delivery(seed in 0u64..10_000, grow in 1.01f64..2.0, loops: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = random_network_with(&mut rng, false, 1, loops);
        // in a looped network only a pipe leaving the source is guaranteed to help
        let candidates: Vec<usize> = (0..net.pipes.len())
            .filter(|&k| !loops || [net.pipes[k].from, net.pipes[k].to].iter().any(|n| matches!(n, Node::Fixed(_))))
            .collect();
        let k = candidates[(seed as usize) % candidates.len()];
        let base = solve_step(&net, &SolverOptions::default()).unwrap();
        let mut bigger = net.clone();
        bigger.pipes[k].diameter *= grow;
        let after = solve_step(&bigger, &SolverOptions::default()).unwrap();
        prop_assert!(base.converged && after.converged);
        prop_assert!(after.total_delivered() >= base.total_delivered() - 1e-6);
    }

    #[test]
    fn adding_a_pump_unit_never_reduces_delivery(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = random_network_with(&mut rng, true, 1, true);
        prop_assume!(!net.pumps.is_empty());
        let base = solve_step(&net, &SolverOptions::default()).unwrap();
        let mut more = net.clone();
        more.pumps[0].units += 1;
        let after = solve_step(&more, &SolverOptions::default()).unwrap();
        prop_assert!(base.converged && after.converged);
        prop_assert!(after.total_delivered() >= base.total_delivered() - 1e-6);
    }
}

#[test]
fn interior_pipe_can_lower_delivery_in_a_loop() {
    let mut net = HydraulicNetwork::new();
    let r = net.add_fixed_head("R", 48.47551177235076);
    let j0 = net.add_junction("J0", 17.596925245381662, 509.56933719539205);
    let j1 = net.add_junction("J1", 16.700297554643484, 330.14626207547815);
    let j2 = net.add_junction("J2", 10.573019755473851, 461.2778957427101);
    net.add_pipe("P0", r, j0, 6538.651833215629, 0.7767999026289187, 0.012415621178433969);
    net.add_pipe("P1", r, j1, 2221.973327164713, 0.27932211417140007, 0.024764670911573944);
    net.add_pipe("P2", j0, j2, 5366.5771802266545, 0.40804029295772604, 0.02992021364512127);
    net.add_pipe("P3", j2, r, 7067.316769839125, 0.7616268437708199, 0.03135829186943535);
    net.add_pipe("P4", j1, j0, 4874.47614915496, 0.8012631164521593, 0.012363687498380368);
    let base = solve_step(&net, &SolverOptions::default()).unwrap();
    net.pipes[4].diameter *= 1.01;
    let after = solve_step(&net, &SolverOptions::default()).unwrap();
    // J1 is saturated, so the larger pipe only drains J0
    assert!(base.junctions[1].pressure > 30.0 && base.junctions[0].pressure < 30.0);
    assert!(after.total_delivered() < base.total_delivered() - 1e-4);
}
