//! Networks shared by the benchmarks.

use aqueduct_core::hydraulics::HydraulicNetwork;

/// Reservoir at 50 m feeding one junction through 1000 m of DN500.
pub fn two_node() -> HydraulicNetwork {
    let mut net = HydraulicNetwork::new();
    let r = net.add_fixed_head("R", 50.0);
    let j = net.add_junction("J", 0.0, 360.0);
    net.add_pipe("P", r, j, 1000.0, 0.5, 0.02);
    net
}

/// `n` junctions on a ring with chords, fed by two reservoirs.
pub fn ring(n: usize) -> HydraulicNetwork {
    let mut net = HydraulicNetwork::new();
    let a = net.add_fixed_head("RA", 60.0);
    let b = net.add_fixed_head("RB", 55.0);
    let js: Vec<_> = (0..n).map(|k| net.add_junction(format!("J{k}"), (k % 5) as f64, 150.0 + 20.0 * (k % 3) as f64)).collect();
    for k in 0..n {
        net.add_pipe(format!("P{k}"), js[k], js[(k + 1) % n], 2000.0 + 100.0 * k as f64, 0.4, 0.015);
    }
    for k in (0..n).step_by(4) {
        net.add_pipe(format!("C{k}"), js[k], js[(k + n / 2) % n], 5000.0, 0.3, 0.018);
    }
    net.add_pipe("FA", a, js[0], 3000.0, 0.6, 0.012);
    net.add_pipe("FB", b, js[n / 2], 3000.0, 0.6, 0.012);
    net
}

use std::collections::VecDeque;
use std::sync::Arc;

use aqueduct_core::hydraulics::{HydraulicSolution, Node, PumpCurve};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const G: f64 = 9.81;

/// Darcy-Weisbach resistance, head loss = r Q|Q| with Q in m³/s.
pub fn resistance(length: f64, diameter: f64, f: f64) -> f64 {
    8.0 * f * length / (G * std::f64::consts::PI.powi(2) * diameter.powi(5))
}

/// Plain bisection on a sign change in [lo, hi].
pub fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
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

fn pump_curve() -> Arc<PumpCurve> {
    Arc::new(PumpCurve {
        head: vec![[0.0, 70.0], [600.0, 62.0], [1200.0, 45.0], [1600.0, 25.0]],
        efficiency: vec![[0.0, 0.35], [600.0, 0.78], [1200.0, 0.82], [1600.0, 0.7]],
    })
}

/// Connected random networks of 3 to 10 nodes with loops; every third has pumps.
pub fn random_networks(seed: u64, count: usize) -> Vec<HydraulicNetwork> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|k| random_network(&mut rng, k % 3 == 0)).collect()
}

fn random_network(rng: &mut ChaCha8Rng, with_pumps: bool) -> HydraulicNetwork {
    let total = rng.random_range(3..=10usize);
    let fixed = rng.random_range(1..=2.min(total - 1));
    let mut net = HydraulicNetwork::new();
    let mut nodes = Vec::new();
    for i in 0..fixed {
        nodes.push(net.add_fixed_head(format!("R{i}"), rng.random_range(30.0..90.0)));
    }
    for i in 0..total - fixed {
        nodes.push(net.add_junction(format!("J{i}"), rng.random_range(0.0..25.0), rng.random_range(0.0..600.0)));
    }
    let mut id = 0;
    let mut pipe = |net: &mut HydraulicNetwork, a: Node, b: Node, rng: &mut ChaCha8Rng| {
        let (l, d, f) = (rng.random_range(200.0..8000.0), rng.random_range(0.15..1.2), rng.random_range(0.01..0.035));
        net.add_pipe(format!("P{id}"), a, b, l, d, f);
        id += 1;
    };
    for k in 1..nodes.len() {
        let parent = nodes[rng.random_range(0..k)];
        let child = nodes[k];
        if with_pumps && matches!(parent, Node::Fixed(_)) && matches!(child, Node::Junction(_)) && rng.random_bool(0.5) {
            net.add_pump(format!("S{k}"), parent, child, pump_curve(), rng.random_range(1..4), Some(1500.0));
        } else {
            pipe(&mut net, parent, child, rng);
        }
    }
    for _ in 0..rng.random_range(0..4) {
        let a = rng.random_range(0..nodes.len());
        let b = rng.random_range(0..nodes.len());
        if a != b && !(matches!(nodes[a], Node::Fixed(_)) && matches!(nodes[b], Node::Fixed(_))) {
            pipe(&mut net, nodes[a], nodes[b], rng);
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

/// Inflow minus outflow minus delivery at every junction, m³/h, from the reported link flows.
pub fn mass_residuals(net: &HydraulicNetwork, sol: &HydraulicSolution) -> Vec<f64> {
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
        if let Node::Junction(a) = p.from {
            balance[a] -= r.flow;
        }
        if let Node::Junction(b) = p.to {
            balance[b] += r.flow;
        }
    }
    balance.iter().zip(&sol.junctions).map(|(b, j)| b - j.delivered).collect()
}

/// Signed Darcy-Weisbach head loss summed around every fundamental cycle, m.
pub fn loop_closures(net: &HydraulicNetwork, sol: &HydraulicSolution) -> Vec<f64> {
    let n = net.junctions.len() + net.fixed_heads.len();
    let mut adj = vec![Vec::new(); n];
    for (k, p) in net.pipes.iter().enumerate() {
        let (a, b) = (node_index(net, p.from), node_index(net, p.to));
        adj[a].push((b, k, 1.0));
        adj[b].push((a, k, -1.0));
    }
    let loss = |k: usize| {
        let p = &net.pipes[k];
        let q = sol.pipes[k].flow / 3600.0;
        resistance(p.length, p.diameter, p.friction) * q * q.abs()
    };
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
        .map(|(k, p)| potential[node_index(net, p.from)] - loss(k) - potential[node_index(net, p.to)])
        .collect()
}
