//! Text exporters for cross-checking a network against other tools.

use std::fmt::Write;

use super::{HydraulicNetwork, HydraulicSolution, Node, SolverOptions};

fn node_name(net: &HydraulicNetwork, node: Node) -> &str {
    match node {
        Node::Junction(j) => &net.junctions[j].id,
        Node::Fixed(f) => &net.fixed_heads[f].id,
    }
}

/// Absolute roughness (mm) that gives Darcy factor `f` in fully rough flow.
fn equivalent_roughness_mm(f: f64, diameter: f64) -> f64 {
    3.7 * diameter * 10f64.powf(-1.0 / (2.0 * f.sqrt())) * 1000.0
}

/// Render the network as an EPANET INP file (CMH units, D-W headloss, PDA).
///
/// EPANET takes absolute roughness rather than a friction factor, so each pipe
/// gets the fully-rough equivalent roughness; parallel pump units become
/// separate pump links sharing one curve.
pub fn to_inp(net: &HydraulicNetwork, options: &SolverOptions) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "[TITLE]\naqueduct export\n");
    let _ = writeln!(out, "[JUNCTIONS]\n;ID\tElev\tDemand");
    for j in &net.junctions {
        let _ = writeln!(out, "{}\t{:.4}\t{:.6}", j.id, j.elevation, j.demand);
    }
    let _ = writeln!(out, "\n[RESERVOIRS]\n;ID\tHead");
    for f in &net.fixed_heads {
        let _ = writeln!(out, "{}\t{:.4}", f.id, f.head);
    }
    let _ = writeln!(out, "\n[PIPES]\n;ID\tNode1\tNode2\tLength\tDiameter\tRoughness\tMinorLoss\tStatus");
    for p in &net.pipes {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{:.3}\t{:.3}\t{:.6}\t0\tOpen",
            p.id,
            node_name(net, p.from),
            node_name(net, p.to),
            p.length,
            p.diameter * 1000.0,
            equivalent_roughness_mm(p.friction, p.diameter)
        );
    }
    let _ = writeln!(out, "\n[PUMPS]\n;ID\tNode1\tNode2\tParameters");
    for p in &net.pumps {
        if p.flow_cap.is_some_and(|c| c <= 0.0) {
            continue;
        }
        for unit in 0..p.units {
            let _ = writeln!(
                out,
                "{}_{}\t{}\t{}\tHEAD {}_curve",
                p.id,
                unit + 1,
                node_name(net, p.from),
                node_name(net, p.to),
                p.id
            );
        }
    }
    let _ = writeln!(out, "\n[CURVES]\n;ID\tX\tY");
    for p in &net.pumps {
        for [q, h] in &p.curve.head {
            let _ = writeln!(out, "{}_curve\t{}\t{}", p.id, q, h);
        }
    }
    let _ = writeln!(
        out,
        "\n[OPTIONS]\nUnits\tCMH\nHeadloss\tD-W\nDemand Model\tPDA\nMinimum Pressure\t0\nRequired Pressure\t{}\nPressure Exponent\t{}\n\n[END]",
        options.required_pressure, options.pressure_exponent
    );
    out
}

/// Plain-text dump of a solved step, one record per line, for diffing.
pub fn to_snapshot(net: &HydraulicNetwork, sol: &HydraulicSolution) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# converged={} iterations={} max_residual={:.3e}", sol.converged, sol.iterations, sol.max_residual);
    for (j, r) in net.junctions.iter().zip(&sol.junctions) {
        let _ = writeln!(
            out,
            "junction {} head={:.6} pressure={:.6} delivered={:.6} undelivered={:.6}",
            j.id, r.head, r.pressure, r.delivered, r.undelivered
        );
    }
    for (p, r) in net.pipes.iter().zip(&sol.pipes) {
        let _ = writeln!(out, "pipe {} flow={:.6} headloss={:.6}", p.id, r.flow, r.headloss);
    }
    for (p, r) in net.pumps.iter().zip(&sol.pumps) {
        let _ = writeln!(
            out,
            "pump {} flow={:.6} head={:.6} electric_kw={:.6}",
            p.id, r.flow, r.head_gain, r.electric_kw
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hydraulics::{solve_step, PumpCurve};
    use std::sync::Arc;

    #[test]
    fn inp_sections_present() {
        let mut net = HydraulicNetwork::new();
        let r = net.add_fixed_head("R1", 5.0);
        let a = net.add_junction("A", 1.0, 100.0);
        let b = net.add_junction("B", 2.0, 50.0);
        net.add_pipe("P1", a, b, 1000.0, 0.4, 0.02);
        let curve = Arc::new(PumpCurve {
            head: vec![[0.0, 70.0], [300.0, 40.0]],
            efficiency: vec![[0.0, 0.5], [300.0, 0.8]],
        });
        net.add_pump("PS1", r, a, curve, 2, None);
        let inp = to_inp(&net, &SolverOptions::default());
        for section in ["[JUNCTIONS]", "[RESERVOIRS]", "[PIPES]", "[PUMPS]", "[CURVES]", "[OPTIONS]", "[END]"] {
            assert!(inp.contains(section), "{section} missing");
        }
        assert!(inp.contains("PS1_2\tR1\tA\tHEAD PS1_curve"));
        let sol = solve_step(&net, &SolverOptions::default()).unwrap();
        let snap = to_snapshot(&net, &sol);
        assert_eq!(snap.lines().count(), 1 + 2 + 1 + 1);
    }

    #[test]
    fn roughness_inverts_von_karman() {
        let eps = equivalent_roughness_mm(0.02, 0.5) / 1000.0;
        let f = (-2.0 * (eps / (3.7 * 0.5)).log10()).powi(-2);
        assert!((f - 0.02).abs() < 1e-12);
    }
}
