use nalgebra::{DMatrix, DVector};

use super::{
    pump::pump_electric_power, pump::hydraulic_power_kw, HydraulicError, HydraulicNetwork,
    HydraulicSolution, JunctionResult, Node, PipeResult, PumpResult, SolverOptions, GRAVITY,
};

/// Below this head difference (m) the pipe law is linearised so the Jacobian
/// stays finite at zero flow.
const LINEAR_ZONE: f64 = 1e-7;
const MAX_HALVINGS: u32 = 40;
const ARMIJO: f64 = 0.25;
/// Largest head update (m) per iteration; bounds steps along flat directions.
const MAX_STEP: f64 = 100.0;

/// Darcy-Weisbach resistance in s²/m⁵: h = r q |q| with q in m³/s.
pub(crate) fn pipe_resistance(length: f64, diameter: f64, friction: f64) -> f64 {
    8.0 * friction * length / (GRAVITY * std::f64::consts::PI.powi(2) * diameter.powi(5))
}

/// Pipe flow (m³/s) for a head difference, with d(flow)/d(head difference).
fn pipe_law(r: f64, dh: f64) -> (f64, f64) {
    let a = dh.abs();
    if a >= LINEAR_ZONE {
        let q = (a / r).sqrt();
        (q.copysign(dh), 0.5 / (r * a).sqrt())
    } else {
        let k = 1.0 / (r * LINEAR_ZONE).sqrt();
        (dh * k, k)
    }
}

/// Integral of `pipe_law` from 0 to `dh`.
fn pipe_content(r: f64, dh: f64) -> f64 {
    let a = dh.abs();
    let k = 1.0 / (r * LINEAR_ZONE).sqrt();
    if a < LINEAR_ZONE {
        0.5 * k * a * a
    } else {
        0.5 * k * LINEAR_ZONE * LINEAR_ZONE + 2.0 / 3.0 * (a.powf(1.5) - LINEAR_ZONE.powf(1.5)) / r.sqrt()
    }
}

/// Head gain (m) of one unit at flow `u` (m³/h), with the end segments of the
/// curve extended.
fn extended_gain(points: &[[f64; 2]], u: f64) -> f64 {
    let n = points.len();
    let i = points.partition_point(|p| p[0] <= u).clamp(1, n - 1);
    let [q0, h0] = points[i - 1];
    let [q1, h1] = points[i];
    h0 + (u - q0) * (h1 - h0) / (q1 - q0)
}

struct Pda {
    required: f64,
    exponent: f64,
}

impl Pda {
    /// Delivered flow and its derivative for demand `d` at pressure `p`.
    fn outflow(&self, d: f64, p: f64) -> (f64, f64) {
        if d <= 0.0 || p <= 0.0 {
            (0.0, 0.0)
        } else if p >= self.required {
            (d, 0.0)
        } else {
            let ratio = p / self.required;
            let q = d * ratio.powf(self.exponent);
            (q, self.exponent * q / p)
        }
    }

    /// Integral of `outflow` over pressure from 0 to `p`.
    fn content(&self, d: f64, p: f64) -> f64 {
        let full = d * self.required / (self.exponent + 1.0);
        if d <= 0.0 || p <= 0.0 {
            0.0
        } else if p >= self.required {
            full + d * (p - self.required)
        } else {
            full * (p / self.required).powf(self.exponent + 1.0)
        }
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// The nodal balance g(H) (outflow - inflow + delivered at each supplied
/// junction) is the gradient of a convex content function: every link passes
/// a flow that is nondecreasing in its head difference and every junction
/// draws a delivery nondecreasing in its head. The solver minimises that
/// content by damped Newton, which stays globally convergent through the
/// flat regions (closed check valves, flow caps, saturated or dry junctions)
/// and the square-root kinks that defeat a residual-norm line search.
struct System<'a> {
    net: &'a HydraulicNetwork,
    pda: Pda,
    /// Position of each junction in the unknown vector, `None` if unsupplied.
    slot: Vec<Option<usize>>,
    active: Vec<usize>,
    resistance: Vec<f64>,
    /// Demands in m³/s.
    demand: Vec<f64>,
}

impl System<'_> {
    fn head(&self, heads: &DVector<f64>, node: Node) -> f64 {
        match node {
            Node::Fixed(i) => self.net.fixed_heads[i].head,
            Node::Junction(j) => match self.slot[j] {
                Some(s) => heads[s],
                None => self.net.junctions[j].elevation,
            },
        }
    }

    fn pump_open(&self, k: usize) -> bool {
        self.net.pumps[k].flow_cap.is_none_or(|c| c > 0.0)
    }

    fn pump_cap(&self, k: usize) -> f64 {
        self.net.pumps[k].flow_cap.map_or(f64::INFINITY, |c| c / 3600.0)
    }

    /// Pump group flow (m³/s) without check valve or cap, for a head
    /// difference `dh` = H_from - H_to; linear between curve knots.
    fn pump_line(&self, k: usize, dh: f64) -> (f64, f64) {
        let p = &self.net.pumps[k];
        let n = p.units as f64;
        let (unit, du) = p.curve.flow_for_gain(-dh);
        (n * unit / 3600.0, -n * du / 3600.0)
    }

    /// Pump group flow (m³/s) and slope: check valve at zero, cap on top.
    fn pump_law(&self, k: usize, dh: f64) -> (f64, f64) {
        let (q, dq) = self.pump_line(k, dh);
        let cap = self.pump_cap(k);
        if q <= 0.0 {
            (0.0, 0.0)
        } else if q >= cap {
            (cap, 0.0)
        } else {
            (q, dq)
        }
    }

    /// Integral of `pump_law` over the head difference, measured from the
    /// point where the valve opens. The law is piecewise linear, so the
    /// trapezoid rule over its breakpoints is exact.
    fn pump_content(&self, k: usize, dh: f64) -> f64 {
        let p = &self.net.pumps[k];
        let n = p.units as f64;
        let opens = -extended_gain(&p.curve.head, 0.0);
        if dh <= opens {
            return 0.0;
        }
        let cap = self.pump_cap(k);
        let saturates = if cap.is_finite() { -extended_gain(&p.curve.head, cap * 3600.0 / n) } else { f64::INFINITY };
        let end = dh.min(saturates);
        let mut xs = vec![opens];
        xs.extend(p.curve.head.iter().map(|pt| -pt[1]).filter(|x| *x > opens && *x < end));
        xs.push(end);
        let mut total = 0.0;
        for w in xs.windows(2) {
            let (qa, _) = self.pump_line(k, w[0]);
            let (qb, _) = self.pump_line(k, w[1]);
            total += 0.5 * (qa.max(0.0) + qb.max(0.0)) * (w[1] - w[0]);
        }
        if dh > saturates {
            total += cap * (dh - saturates);
        }
        total
    }

    fn skip_link(&self, from: Node, to: Node) -> bool {
        let dead = |n: Node| match n {
            Node::Junction(j) => self.slot[j].is_none(),
            Node::Fixed(_) => true,
        };
        dead(from) && dead(to)
    }

    /// Content function whose gradient is the nodal balance.
    fn content(&self, heads: &DVector<f64>) -> f64 {
        let mut e = 0.0;
        for (k, pipe) in self.net.pipes.iter().enumerate() {
            if !self.skip_link(pipe.from, pipe.to) {
                e += pipe_content(self.resistance[k], self.head(heads, pipe.from) - self.head(heads, pipe.to));
            }
        }
        for (k, pump) in self.net.pumps.iter().enumerate() {
            if self.pump_open(k) && !self.skip_link(pump.from, pump.to) {
                e += self.pump_content(k, self.head(heads, pump.from) - self.head(heads, pump.to));
            }
        }
        for (s, &j) in self.active.iter().enumerate() {
            e += self.pda.content(self.demand[j], heads[s] - self.net.junctions[j].elevation);
        }
        e
    }

    /// Nodal imbalance (outflow - inflow + delivered, m³/s) and optionally the Jacobian.
    fn evaluate(&self, heads: &DVector<f64>, jac: Option<&mut DMatrix<f64>>) -> DVector<f64> {
        let n = self.active.len();
        let mut g = DVector::zeros(n);
        let mut jac = jac;
        if let Some(j) = jac.as_deref_mut() {
            j.fill(0.0);
        }
        let slot_of = |node: Node| match node {
            Node::Junction(j) => self.slot[j],
            Node::Fixed(_) => None,
        };
        let mut add_link = |from: Node, to: Node, q: f64, dq: f64, g: &mut DVector<f64>| {
            let (a, b) = (slot_of(from), slot_of(to));
            if let Some(a) = a {
                g[a] += q;
            }
            if let Some(b) = b {
                g[b] -= q;
            }
            if let Some(j) = jac.as_deref_mut() {
                if let Some(a) = a {
                    j[(a, a)] += dq;
                }
                if let Some(b) = b {
                    j[(b, b)] += dq;
                }
                if let (Some(a), Some(b)) = (a, b) {
                    j[(a, b)] -= dq;
                    j[(b, a)] -= dq;
                }
            }
        };
        for (k, pipe) in self.net.pipes.iter().enumerate() {
            if self.skip_link(pipe.from, pipe.to) {
                continue;
            }
            let dh = self.head(heads, pipe.from) - self.head(heads, pipe.to);
            let (q, dq) = pipe_law(self.resistance[k], dh);
            add_link(pipe.from, pipe.to, q, dq, &mut g);
        }
        for (k, pump) in self.net.pumps.iter().enumerate() {
            if !self.pump_open(k) || self.skip_link(pump.from, pump.to) {
                continue;
            }
            let dh = self.head(heads, pump.from) - self.head(heads, pump.to);
            let (q, dq) = self.pump_law(k, dh);
            add_link(pump.from, pump.to, q, dq, &mut g);
        }
        for (s, &j) in self.active.iter().enumerate() {
            let p = heads[s] - self.net.junctions[j].elevation;
            let (q, dq) = self.pda.outflow(self.demand[j], p);
            g[s] += q;
            if let Some(jm) = jac.as_deref_mut() {
                jm[(s, s)] += dq;
            }
        }
        g
    }
}

fn newton_direction(jac: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    let n = g.len();
    let max_diag = (0..n).map(|i| jac[(i, i)]).fold(0.0_f64, f64::max);
    // relative shift keeps one stiff junction (pressure near zero) from
    // freezing the rest; the absolute part covers flat rows
    let mut rel = 1e-10;
    for _ in 0..6 {
        let mut m = jac.clone();
        for i in 0..n {
            m[(i, i)] += rel * jac[(i, i)] + 1e-12 * max_diag + 1e-18;
        }
        if let Some(ch) = m.cholesky() {
            let mut dir = -ch.solve(g);
            let longest = dir.amax();
            if longest > MAX_STEP {
                dir *= MAX_STEP / longest;
            }
            return Some(dir);
        }
        rel *= 1e3;
    }
    None
}

/// Backtracking on the content. Near convergence the content changes fall
/// below round-off; there a step that halves the residual norm is taken.
fn line_search(system: &System, heads: &DVector<f64>, g: &DVector<f64>, dir: &DVector<f64>) -> (DVector<f64>, f64) {
    let content = system.content(heads);
    let slope = g.dot(dir);
    let res2 = g.norm_squared();
    let mut alpha = 1.0;
    let mut halvings = 0;
    loop {
        let trial = heads + dir * alpha;
        let trial_content = system.content(&trial);
        let flat = (trial_content - content).abs() <= 1e-12 * content.abs().max(1.0);
        let accept = halvings >= MAX_HALVINGS
            || trial_content <= content + ARMIJO * alpha * slope
            || (flat && system.evaluate(&trial, None).norm_squared() <= 0.25 * res2);
        if accept {
            return (trial, alpha * dir.amax());
        }
        alpha *= 0.5;
        halvings += 1;
    }
}

/// Solve one steady state with pressure-dependent demand.
///
/// Nodal heads are found by damped Newton iteration on the mass balance.
/// Junctions in components without a fixed-head node get zero delivery. A
/// solution that fails to converge is returned with `converged == false`.
pub fn solve_step(net: &HydraulicNetwork, options: &SolverOptions) -> Result<HydraulicSolution, HydraulicError> {
    net.validate()?;
    let nj = net.junctions.len();
    let nf = net.fixed_heads.len();
    let idx = |n: Node| match n {
        Node::Junction(j) => j,
        Node::Fixed(f) => nj + f,
    };

    let mut uf = UnionFind((0..nj + nf).collect());
    for p in &net.pipes {
        uf.union(idx(p.from), idx(p.to));
    }
    for p in net.pumps.iter().filter(|p| p.flow_cap.is_none_or(|c| c > 0.0)) {
        uf.union(idx(p.from), idx(p.to));
    }
    let mut supplied = vec![false; nj + nf];
    for f in 0..nf {
        let root = uf.find(nj + f);
        supplied[root] = true;
    }
    let mut slot = vec![None; nj];
    let mut active = Vec::new();
    for (j, s) in slot.iter_mut().enumerate() {
        if supplied[uf.find(j)] {
            *s = Some(active.len());
            active.push(j);
        }
    }

    let system = System {
        net,
        pda: Pda { required: options.required_pressure, exponent: options.pressure_exponent },
        slot,
        active,
        resistance: net.pipes.iter().map(|p| pipe_resistance(p.length, p.diameter, p.friction)).collect(),
        demand: net.junctions.iter().map(|j| j.demand.max(0.0) / 3600.0).collect(),
    };

    let n = system.active.len();
    let start_head = net.fixed_heads.iter().map(|f| f.head).fold(f64::NEG_INFINITY, f64::max);
    let mut heads = DVector::from_element(n, if start_head.is_finite() { start_head } else { 0.0 });
    let mut jac = DMatrix::zeros(n, n);
    let flow_tol = options.flow_tolerance / 3600.0;

    let mut converged = n == 0;
    let mut iterations = 0;
    let mut last_step = f64::INFINITY;
    while !converged && iterations < options.max_iterations {
        let g = system.evaluate(&heads, Some(&mut jac));
        let res = g.amax();
        if res <= flow_tol && (last_step <= options.head_tolerance || res <= flow_tol * 1e-3) {
            converged = true;
            break;
        }
        iterations += 1;
        let Some(dir) = newton_direction(&jac, &g) else { break };
        let (trial, length) = line_search(&system, &heads, &g, &dir);
        heads = trial;
        last_step = length;
        if last_step == 0.0 {
            // stagnated at round-off
            converged = system.evaluate(&heads, None).amax() <= flow_tol;
            break;
        }
    }
    if !converged && iterations >= options.max_iterations {
        let g = system.evaluate(&heads, None);
        converged = g.amax() <= flow_tol && last_step <= options.head_tolerance;
    }

    let g = system.evaluate(&heads, None);
    let junctions: Vec<JunctionResult> = net
        .junctions
        .iter()
        .enumerate()
        .map(|(j, junction)| {
            let demand = junction.demand.max(0.0);
            match system.slot[j] {
                Some(s) => {
                    let pressure = heads[s] - junction.elevation;
                    let delivered = system.pda.outflow(system.demand[j], pressure).0 * 3600.0;
                    JunctionResult {
                        head: heads[s],
                        pressure,
                        delivered,
                        undelivered: (demand - delivered).max(0.0),
                        residual: -g[s] * 3600.0,
                    }
                }
                None => JunctionResult {
                    head: junction.elevation,
                    pressure: 0.0,
                    delivered: 0.0,
                    undelivered: demand,
                    residual: 0.0,
                },
            }
        })
        .collect();

    let pipes = net
        .pipes
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let dh = system.head(&heads, p.from) - system.head(&heads, p.to);
            let both_dead = matches!((p.from, p.to), (Node::Junction(a), Node::Junction(b))
                if system.slot[a].is_none() && system.slot[b].is_none());
            let flow = if both_dead { 0.0 } else { pipe_law(system.resistance[k], dh).0 * 3600.0 };
            PipeResult { flow, headloss: dh }
        })
        .collect();

    let mut pumps = Vec::with_capacity(net.pumps.len());
    for (k, p) in net.pumps.iter().enumerate() {
        let live = system.pump_open(k)
            && [p.from, p.to].iter().any(|n| match n {
                Node::Junction(j) => system.slot[*j].is_some(),
                Node::Fixed(_) => true,
            });
        let flow = if live {
            let dh = system.head(&heads, p.from) - system.head(&heads, p.to);
            system.pump_law(k, dh).0 * 3600.0
        } else {
            0.0
        };
        if flow <= 0.0 {
            pumps.push(PumpResult { flow: 0.0, head_gain: 0.0, hydraulic_kw: 0.0, electric_kw: 0.0 });
            continue;
        }
        let units = p.units as f64;
        let unit_flow = flow / units;
        let (min, max) = (p.curve.min_flow(), p.curve.max_flow());
        let slack = 1e-9 * max.max(1.0);
        if converged && (unit_flow > max + slack || unit_flow < min - slack) {
            return Err(HydraulicError::PumpOutOfRange { pump: p.id.clone(), flow: unit_flow, min, max });
        }
        let unit_flow = unit_flow.clamp(min, max);
        let head_gain = p.curve.head_at(unit_flow).unwrap_or(0.0);
        let electric = pump_electric_power(&p.curve, unit_flow, head_gain).unwrap_or(f64::NAN) * units;
        pumps.push(PumpResult {
            flow,
            head_gain,
            hydraulic_kw: hydraulic_power_kw(flow, head_gain),
            electric_kw: electric,
        });
    }

    let max_residual = junctions.iter().map(|j| j.residual.abs()).fold(0.0, f64::max);
    Ok(HydraulicSolution { junctions, pipes, pumps, converged, iterations, max_residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hydraulics::PumpCurve;
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    fn two_node(head: f64, demand: f64) -> HydraulicNetwork {
        let mut net = HydraulicNetwork::new();
        let r = net.add_fixed_head("R", head);
        let j = net.add_junction("J", 0.0, demand);
        net.add_pipe("P", r, j, 1000.0, 0.5, 0.02);
        net
    }

    #[test]
    fn hand_darcy_weisbach() {
        let sol = solve_step(&two_node(50.0, 360.0), &SolverOptions::default()).unwrap();
        assert!(sol.converged);
        // v = 0.1 / (pi * 0.25^2) ; h = f (L/D) v^2 / 2g
        let v = 0.1 / (std::f64::consts::PI * 0.0625);
        let hf = 0.02 * (1000.0 / 0.5) * v * v / (2.0 * 9.81);
        assert_abs_diff_eq!(v, 0.5093, epsilon = 1e-4);
        assert_abs_diff_eq!(hf, 0.529, epsilon = 1e-3);
        assert_abs_diff_eq!(sol.junctions[0].head, 50.0 - hf, epsilon = 1e-6);
        assert_eq!(sol.junctions[0].delivered, 360.0);
        assert_eq!(sol.junctions[0].undelivered, 0.0);
        assert_abs_diff_eq!(sol.pipes[0].flow, 360.0, epsilon = 1e-6);
    }

    #[test]
    fn zero_demand_is_static_head() {
        let sol = solve_step(&two_node(50.0, 0.0), &SolverOptions::default()).unwrap();
        assert!(sol.converged);
        assert_eq!(sol.junctions[0].pressure, 50.0);
        assert_eq!(sol.pipes[0].flow, 0.0);
    }

    #[test]
    fn disconnected_junction_gets_nothing() {
        let mut net = two_node(50.0, 100.0);
        net.add_junction("island", 0.0, 10.0);
        let sol = solve_step(&net, &SolverOptions::default()).unwrap();
        assert_eq!(sol.junctions[1].delivered, 0.0);
        assert_eq!(sol.junctions[1].undelivered, 10.0);
    }

    #[test]
    fn no_sources_at_all() {
        let mut net = HydraulicNetwork::new();
        let a = net.add_junction("a", 0.0, 5.0);
        let b = net.add_junction("b", 0.0, 5.0);
        net.add_pipe("p", a, b, 100.0, 0.3, 0.02);
        let sol = solve_step(&net, &SolverOptions::default()).unwrap();
        assert!(sol.converged);
        assert_eq!(sol.total_delivered(), 0.0);
        assert_eq!(sol.pipes[0].flow, 0.0);
    }

    fn pump_curve() -> Arc<PumpCurve> {
        Arc::new(PumpCurve {
            head: vec![[0.0, 60.0], [400.0, 50.0], [800.0, 30.0]],
            efficiency: vec![[0.0, 0.3], [400.0, 0.8], [800.0, 0.7]],
        })
    }

    #[test]
    fn pumped_supply_and_cap() {
        let mut net = HydraulicNetwork::new();
        let r = net.add_fixed_head("src", 0.0);
        let j = net.add_junction("m", 0.0, 500.0);
        net.add_pump("ps", r, j, pump_curve(), 2, None);
        let sol = solve_step(&net, &SolverOptions::default()).unwrap();
        assert!(sol.converged, "{sol:?}");
        assert_abs_diff_eq!(sol.junctions[0].delivered, 500.0, epsilon = 1e-6);
        // 250 m3/h per unit on the first segment: 60 - 10 * 250 / 400
        assert_abs_diff_eq!(sol.pumps[0].head_gain, 53.75, epsilon = 1e-6);
        assert!(sol.pumps[0].electric_kw > sol.pumps[0].hydraulic_kw);

        net.pumps[0].flow_cap = Some(200.0);
        let sol = solve_step(&net, &SolverOptions::default()).unwrap();
        assert!(sol.converged);
        assert_abs_diff_eq!(sol.pumps[0].flow, 200.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.junctions[0].delivered, 200.0, epsilon = 1e-6);
        assert!(sol.junctions[0].pressure < 30.0);

        net.pumps[0].flow_cap = Some(0.0);
        let sol = solve_step(&net, &SolverOptions::default()).unwrap();
        assert_eq!(sol.total_delivered(), 0.0);
    }

    #[test]
    fn pump_beyond_curve_is_an_error() {
        let mut net = HydraulicNetwork::new();
        let r = net.add_fixed_head("src", 50.0);
        let j = net.add_junction("m", 0.0, 5000.0);
        net.add_pump("ps-1", r, j, pump_curve(), 1, None);
        match solve_step(&net, &SolverOptions::default()) {
            Err(HydraulicError::PumpOutOfRange { pump, .. }) => assert_eq!(pump, "ps-1"),
            other => panic!("expected range error, got {other:?}"),
        }
    }

    #[test]
    fn check_valve_blocks_reverse_flow() {
        let mut net = HydraulicNetwork::new();
        let low = net.add_fixed_head("low", 0.0);
        let high = net.add_fixed_head("high", 100.0);
        let j = net.add_junction("m", 0.0, 100.0);
        net.add_pump("ps", low, j, pump_curve(), 1, None);
        net.add_pipe("p", high, j, 1000.0, 0.5, 0.02);
        let sol = solve_step(&net, &SolverOptions::default()).unwrap();
        assert!(sol.converged);
        assert_eq!(sol.pumps[0].flow, 0.0);
        assert_abs_diff_eq!(sol.pipes[0].flow, 100.0, epsilon = 1e-6);
    }

    #[test]
    fn iteration_cap_flags_nonconvergence() {
        let opts = SolverOptions { max_iterations: 1, ..SolverOptions::default() };
        let sol = solve_step(&two_node(50.0, 360.0), &opts).unwrap();
        assert!(!sol.converged);
        assert_eq!(sol.iterations, 1);
    }
}
