//! Tabulated pump head and efficiency curves.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{GRAVITY, WATER_DENSITY};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CurveError {
    #[error("curve needs at least two points, got {0}")]
    TooFewPoints(usize),
    #[error("curve flows must be strictly increasing")]
    FlowsNotIncreasing,
    #[error("pump head must be strictly decreasing with flow")]
    HeadNotDecreasing,
    #[error("efficiency must lie in (0, 1], got {0}")]
    BadEfficiency(f64),
    #[error("head and efficiency curves cover different flow ranges")]
    DomainMismatch,
    #[error("flow {flow} m3/h outside tabulated range [{min}, {max}]")]
    OutOfRange { flow: f64, min: f64, max: f64 },
}

/// Head and efficiency curves of one pump unit. Flows in m³/h, head in m.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PumpCurve {
    pub head: Vec<[f64; 2]>,
    pub efficiency: Vec<[f64; 2]>,
}

/// Piecewise-linear interpolation on sorted knots; `None` outside the range.
pub fn interpolate(points: &[[f64; 2]], x: f64) -> Option<f64> {
    let first = points.first()?;
    let last = points.last()?;
    if x < first[0] || x > last[0] {
        return None;
    }
    let idx = points.partition_point(|p| p[0] <= x);
    if idx == 0 {
        return Some(first[1]);
    }
    if idx >= points.len() {
        return Some(last[1]);
    }
    let [x0, y0] = points[idx - 1];
    let [x1, y1] = points[idx];
    if x == x0 {
        return Some(y0);
    }
    Some(y0 + (y1 - y0) * (x - x0) / (x1 - x0))
}

impl PumpCurve {
    pub fn validate(&self) -> Result<(), CurveError> {
        for pts in [&self.head, &self.efficiency] {
            if pts.len() < 2 {
                return Err(CurveError::TooFewPoints(pts.len()));
            }
            if pts.windows(2).any(|w| w[1][0] <= w[0][0]) || pts[0][0] < 0.0 {
                return Err(CurveError::FlowsNotIncreasing);
            }
        }
        if self.head.windows(2).any(|w| w[1][1] >= w[0][1]) {
            return Err(CurveError::HeadNotDecreasing);
        }
        if let Some(bad) = self.efficiency.iter().map(|p| p[1]).find(|e| !(*e > 0.0 && *e <= 1.0)) {
            return Err(CurveError::BadEfficiency(bad));
        }
        let same = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(1.0);
        if !same(self.head[0][0], self.efficiency[0][0])
            || !same(self.head[self.head.len() - 1][0], self.efficiency[self.efficiency.len() - 1][0])
        {
            return Err(CurveError::DomainMismatch);
        }
        Ok(())
    }

    pub fn min_flow(&self) -> f64 {
        self.head[0][0]
    }

    pub fn max_flow(&self) -> f64 {
        self.head[self.head.len() - 1][0]
    }

    pub fn shutoff_head(&self) -> f64 {
        self.head[0][1]
    }

    fn out_of_range(&self, flow: f64) -> CurveError {
        CurveError::OutOfRange { flow, min: self.min_flow(), max: self.max_flow() }
    }

    pub fn head_at(&self, flow: f64) -> Result<f64, CurveError> {
        interpolate(&self.head, flow).ok_or_else(|| self.out_of_range(flow))
    }

    pub fn efficiency_at(&self, flow: f64) -> Result<f64, CurveError> {
        interpolate(&self.efficiency, flow).ok_or_else(|| self.out_of_range(flow))
    }

    /// Unit flow (m³/h) delivered against a head gain, with its derivative
    /// d(flow)/d(gain). Outside the table the end segments are extended so the
    /// solver sees a monotone law; callers check the final operating point.
    /// Above shutoff the extension goes negative; the check valve is applied
    /// by the caller.
    pub(crate) fn flow_for_gain(&self, gain: f64) -> (f64, f64) {
        let pts = &self.head;
        let n = pts.len();
        let segment = |i: usize| {
            let [q0, h0] = pts[i];
            let [q1, h1] = pts[i + 1];
            let slope = (q1 - q0) / (h1 - h0);
            (q0 + (gain - h0) * slope, slope)
        };
        if gain >= pts[0][1] {
            return segment(0);
        }
        if gain <= pts[n - 1][1] {
            return segment(n - 2);
        }
        // heads are decreasing, so search on the reversed order
        let i = pts.partition_point(|p| p[1] > gain);
        segment(i - 1)
    }
}

/// Electric power (kW) drawn by one unit pumping `flow_per_unit` m³/h against
/// `head` m, with efficiency interpolated on the unit's curve.
pub fn pump_electric_power(curve: &PumpCurve, flow_per_unit: f64, head: f64) -> Result<f64, CurveError> {
    let eta = curve.efficiency_at(flow_per_unit)?;
    Ok(hydraulic_power_kw(flow_per_unit, head) / eta)
}

/// Hydraulic power (kW) for a flow in m³/h and a head in m.
pub fn hydraulic_power_kw(flow: f64, head: f64) -> f64 {
    WATER_DENSITY * GRAVITY * (flow / 3600.0) * head / 1000.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn curve() -> PumpCurve {
        PumpCurve {
            head: vec![[0.0, 80.0], [500.0, 70.0], [1000.0, 50.0]],
            efficiency: vec![[0.0, 0.4], [360.0, 0.75], [1000.0, 0.7]],
        }
    }

    #[test]
    fn electric_power_hand_values() {
        let c = curve();
        // rho g Q H / eta = 1000 * 9.81 * 0.1 * 40 / 0.75
        assert_abs_diff_eq!(pump_electric_power(&c, 360.0, 40.0).unwrap(), 52.32, epsilon = 1e-9);
        let lossless = PumpCurve {
            head: c.head.clone(),
            efficiency: vec![[0.0, 1.0], [1000.0, 1.0]],
        };
        assert_abs_diff_eq!(pump_electric_power(&lossless, 360.0, 40.0).unwrap(), 39.24, epsilon = 1e-9);
        assert_abs_diff_eq!(hydraulic_power_kw(360.0, 40.0), 39.24, epsilon = 1e-9);
    }

    #[test]
    fn knot_uses_tabulated_efficiency() {
        assert_eq!(curve().efficiency_at(360.0).unwrap(), 0.75);
        assert_eq!(curve().efficiency_at(1000.0).unwrap(), 0.7);
    }

    #[test]
    fn extrapolation_is_refused() {
        let c = curve();
        assert!(matches!(pump_electric_power(&c, 1000.1, 10.0), Err(CurveError::OutOfRange { .. })));
        assert!(c.head_at(-1.0).is_err());
    }

    #[test]
    fn validation_rules() {
        assert!(curve().validate().is_ok());
        let mut c = curve();
        c.head[1][1] = 85.0;
        assert_eq!(c.validate(), Err(CurveError::HeadNotDecreasing));
        let mut c = curve();
        c.efficiency[2][0] = 900.0;
        assert_eq!(c.validate(), Err(CurveError::DomainMismatch));
        let mut c = curve();
        c.efficiency[0][1] = 0.0;
        assert_eq!(c.validate(), Err(CurveError::BadEfficiency(0.0)));
    }

    #[test]
    fn inverse_curve_is_consistent() {
        let c = curve();
        for q in [0.0, 100.0, 500.0, 750.0, 1000.0] {
            let h = c.head_at(q).unwrap();
            let (back, _) = c.flow_for_gain(h);
            assert_abs_diff_eq!(back, q, epsilon = 1e-9);
        }
        assert_eq!(c.flow_for_gain(95.0), (-750.0, -50.0));
        assert!(c.flow_for_gain(40.0).0 > 1000.0);
    }
}
