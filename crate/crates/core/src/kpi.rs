//! The four evaluation metrics and their slicing.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{HouseholdClassId, MunicipalityId, UtilityId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KpiError {
    #[error("asset lifetime must be positive, got {0}")]
    BadLifetime(f64),
    #[error("20th-percentile income must be positive, got {0}")]
    BadIncome(f64),
    #[error("bad slice {0:?}: expected national, utility:ID, municipality:ID, class:ID or years:A-B")]
    BadSlice(String),
}

/// Annualised capital cost for the year: each item is (K, L) and contributes K/L.
pub fn annualised_capex(items: &[(f64, f64)]) -> Result<f64, KpiError> {
    items.iter().try_fold(0.0, |acc, (k, l)| {
        if *l > 0.0 {
            Ok(acc + k / l)
        } else {
            Err(KpiError::BadLifetime(*l))
        }
    })
}

/// TAC for one year: sum K_j/L_j + OPEX + sum coupon_b * P_b over outstanding bonds.
pub fn tac(items: &[(f64, f64)], opex: f64, bonds: &[(f64, f64)]) -> Result<f64, KpiError> {
    let interest: f64 = bonds.iter().map(|(coupon, principal)| coupon * principal).sum();
    Ok(annualised_capex(items)? + opex + interest)
}

/// Embedded emissions (total tCO2eq, lifetime) annualised, plus operational
/// emissions from hourly energy (kWh) and emission factors (kg/kWh).
pub fn ghg(embedded: &[(f64, f64)], energy: &[(f64, f64)]) -> Result<f64, KpiError> {
    let emb = annualised_capex(embedded)?;
    let op: f64 = energy.iter().map(|(e, ef)| e * ef / 1000.0).sum();
    Ok(emb + op)
}

/// 1 - sum U / sum D over (demand, delivered) cells, with U = max(D - Q, 0).
/// `None` when the slice has no demand.
pub fn reliability(cells: &[(f64, f64)]) -> Option<f64> {
    let d: f64 = cells.iter().map(|(d, _)| d).sum();
    if d <= 0.0 {
        return None;
    }
    let u: f64 = cells.iter().map(|(d, q)| (d - q).max(0.0)).sum();
    Some(1.0 - u / d)
}

/// AF = (p_v * V_lifeline + F_fixed) / I_p20 * 100, in percent.
pub fn affordability(volumetric: f64, lifeline: f64, fixed: f64, income_p20: f64) -> Result<f64, KpiError> {
    if !(income_p20 > 0.0) {
        return Err(KpiError::BadIncome(income_p20));
    }
    Ok((volumetric * lifeline + fixed) / income_p20 * 100.0)
}

/// Nearest-rank percentile of unsorted values; `None` for an empty slice.
pub fn nearest_rank(values: &[f64], pct: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    Some(v[rank.min(v.len()) - 1])
}

/// Demand and undelivered volume of one household class in one municipality-year, m³.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceCell {
    pub utility: UtilityId,
    pub municipality: MunicipalityId,
    pub class: HouseholdClassId,
    pub year: i32,
    pub demand: f64,
    pub undelivered: f64,
}

/// Monthly bill inputs of one household class in one municipality-year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffordabilityCell {
    pub utility: UtilityId,
    pub municipality: MunicipalityId,
    pub class: HouseholdClassId,
    pub year: i32,
    /// €/m³
    pub volumetric: f64,
    /// €/month
    pub fixed: f64,
    /// m³/month
    pub lifeline: f64,
    /// €/month
    pub income: f64,
}

/// Cost and emission totals of one utility-year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostCell {
    pub utility: UtilityId,
    pub year: i32,
    pub annualised_capex: f64,
    pub opex: f64,
    pub interest: f64,
    pub embedded_t: f64,
    pub operational_t: f64,
}

impl CostCell {
    pub fn tac(&self) -> f64 {
        self.annualised_capex + self.opex + self.interest
    }

    pub fn ghg(&self) -> f64 {
        self.embedded_t + self.operational_t
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KpiInputs {
    pub service: Vec<ServiceCell>,
    pub affordability: Vec<AffordabilityCell>,
    pub cost: Vec<CostCell>,
}

/// Filters on the dimensions of the inputs; an empty filter keeps everything.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Slice {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub utilities: Vec<UtilityId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub municipalities: Vec<MunicipalityId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub classes: Vec<HouseholdClassId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub years: Option<(i32, i32)>,
}

impl Slice {
    pub fn national() -> Self {
        Self::default()
    }

    /// Parse `national`, `utility:ID`, `municipality:ID`, `class:ID` or
    /// `years:A-B`; several terms are joined with commas.
    pub fn parse(text: &str) -> Result<Self, KpiError> {
        let mut s = Slice::default();
        for term in text.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let bad = || KpiError::BadSlice(term.to_owned());
            if term == "national" {
                continue;
            }
            let (key, value) = term.split_once(':').ok_or_else(bad)?;
            match key {
                "utility" => s.utilities.push(value.into()),
                "municipality" => s.municipalities.push(value.into()),
                "class" => s.classes.push(value.into()),
                "years" => {
                    let (a, b) = value.split_once('-').ok_or_else(bad)?;
                    s.years = Some((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?));
                }
                _ => return Err(bad()),
            }
        }
        Ok(s)
    }

    fn year_ok(&self, y: i32) -> bool {
        self.years.is_none_or(|(a, b)| a <= y && y <= b)
    }

    fn keep(&self, u: &UtilityId, m: Option<&MunicipalityId>, c: Option<&HouseholdClassId>, y: i32) -> bool {
        (self.utilities.is_empty() || self.utilities.contains(u))
            && m.is_none_or(|m| self.municipalities.is_empty() || self.municipalities.contains(m))
            && c.is_none_or(|c| self.classes.is_empty() || self.classes.contains(c))
            && self.year_ok(y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpiReport {
    pub slice: Slice,
    /// €, cumulative over the slice
    pub tac: f64,
    /// tCO2eq, cumulative over the slice
    pub ghg: f64,
    /// `None` when the slice carries no demand.
    pub reliability: Option<f64>,
    /// %, `None` when the slice has no households.
    pub affordability: Option<f64>,
    pub per_year: Vec<YearKpi>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YearKpi {
    pub year: i32,
    pub tac: f64,
    pub ghg: f64,
    pub reliability: Option<f64>,
    pub affordability: Option<f64>,
}

fn af_of(cells: &[&AffordabilityCell]) -> Option<f64> {
    let incomes: Vec<f64> = cells.iter().map(|c| c.income).collect();
    let p20 = nearest_rank(&incomes, 20.0)?;
    let bill = cells.iter().map(|c| c.volumetric * c.lifeline + c.fixed).sum::<f64>() / cells.len() as f64;
    affordability(1.0, bill, 0.0, p20).ok()
}

/// Evaluate a slice. Cost metrics ignore municipality and class filters
/// because costs are booked per utility.
pub fn evaluate(inputs: &KpiInputs, slice: &Slice) -> KpiReport {
    let mut years: BTreeMap<i32, (f64, f64, f64, f64, Vec<&AffordabilityCell>)> = BTreeMap::new();
    for c in inputs.cost.iter().filter(|c| slice.keep(&c.utility, None, None, c.year)) {
        let e = years.entry(c.year).or_default();
        e.0 += c.tac();
        e.1 += c.ghg();
    }
    for c in inputs
        .service
        .iter()
        .filter(|c| slice.keep(&c.utility, Some(&c.municipality), Some(&c.class), c.year))
    {
        let e = years.entry(c.year).or_default();
        e.2 += c.demand;
        e.3 += c.undelivered.clamp(0.0, c.demand.max(0.0));
    }
    let af_cells: Vec<&AffordabilityCell> = inputs
        .affordability
        .iter()
        .filter(|c| slice.keep(&c.utility, Some(&c.municipality), Some(&c.class), c.year))
        .collect();
    for c in &af_cells {
        years.entry(c.year).or_default().4.push(c);
    }
    let per_year: Vec<YearKpi> = years
        .iter()
        .map(|(year, (tac, ghg, d, u, af))| YearKpi {
            year: *year,
            tac: *tac,
            ghg: *ghg,
            reliability: (*d > 0.0).then(|| 1.0 - u / d),
            affordability: af_of(af),
        })
        .collect();
    let d: f64 = years.values().map(|v| v.2).sum();
    let u: f64 = years.values().map(|v| v.3).sum();
    KpiReport {
        slice: slice.clone(),
        tac: years.values().map(|v| v.0).sum(),
        ghg: years.values().map(|v| v.1).sum(),
        reliability: (d > 0.0).then(|| 1.0 - u / d),
        affordability: af_of(&af_cells),
        per_year,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_owned(), |x| format!("{x:.6}"))
}

impl KpiReport {
    /// Columnar text: one header, one row per year, then a `total` row.
    pub fn to_columns(&self) -> String {
        let mut out = String::from("year\ttac_eur\tghg_t\treliability\taffordability_pct\n");
        for y in &self.per_year {
            let _ = writeln!(out, "{}\t{:.2}\t{:.6}\t{}\t{}", y.year, y.tac, y.ghg, opt(y.reliability), opt(y.affordability));
        }
        let _ = writeln!(
            out,
            "total\t{:.2}\t{:.6}\t{}\t{}",
            self.tac,
            self.ghg,
            opt(self.reliability),
            opt(self.affordability)
        );
        out
    }

    /// The four headline metrics, one per line.
    pub fn summary(&self) -> String {
        format!(
            "tac_eur\t{:.2}\nghg_t\t{:.6}\nreliability\t{}\naffordability_pct\t{}\n",
            self.tac,
            self.ghg,
            opt(self.reliability),
            opt(self.affordability)
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn formula_examples() {
        assert_eq!(tac(&[(1000.0, 10.0)], 50.0, &[]).unwrap(), 150.0);
        assert_eq!(tac(&[], 50.0, &[]).unwrap(), 50.0);
        assert_eq!(tac(&[(1000.0, 10.0)], 50.0, &[(0.04, 200.0)]).unwrap(), 158.0);
        assert!(tac(&[(1.0, 0.0)], 0.0, &[]).is_err());
        assert!((ghg(&[], &[(1000.0, 0.4)]).unwrap() - 0.4).abs() < 1e-15);
        assert!((ghg(&[(100.0 * 0.2, 50.0)], &[]).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(ghg(&[], &[(1000.0, 0.0)]).unwrap(), 0.0);
        assert_eq!(reliability(&[(100.0, 100.0)]), Some(1.0));
        assert_eq!(reliability(&[(100.0, 80.0)]), Some(0.8));
        assert_eq!(reliability(&[(100.0, 120.0)]), Some(1.0));
        assert_eq!(reliability(&[(0.0, 0.0)]), None);
        assert!((affordability(1.0, 4.5, 10.0, 1500.0).unwrap() - 0.9667).abs() < 1e-4);
        assert_eq!(affordability(0.0, 4.5, 0.0, 1500.0).unwrap(), 0.0);
        assert_eq!(affordability(1.0, 4.5, 10.0, 3000.0).unwrap() * 2.0, affordability(1.0, 4.5, 10.0, 1500.0).unwrap());
        assert!(affordability(1.0, 4.5, 10.0, 0.0).is_err());
    }

    #[test]
    fn nearest_rank_percentile() {
        assert_eq!(nearest_rank(&[5.0, 1.0, 4.0, 2.0, 3.0], 20.0), Some(1.0));
        assert_eq!(nearest_rank(&[5.0, 1.0, 4.0, 2.0, 3.0, 6.0], 20.0), Some(2.0));
        assert_eq!(nearest_rank(&[], 20.0), None);
    }

    #[test]
    fn slice_parsing() {
        assert_eq!(Slice::parse("national").unwrap(), Slice::national());
        let s = Slice::parse("utility:U1, years:2030-2034").unwrap();
        assert_eq!(s.utilities, vec![UtilityId::from("U1")]);
        assert_eq!(s.years, Some((2030, 2034)));
        assert!(Slice::parse("planet:earth").is_err());
        assert!(Slice::parse("years:2030").is_err());
    }

    fn cell(m: &str, c: &str, year: i32, demand: f64, undelivered: f64) -> ServiceCell {
        ServiceCell {
            utility: "U".into(),
            municipality: m.into(),
            class: c.into(),
            year,
            demand,
            undelivered,
        }
    }

    proptest! {
        #[test]
        fn national_reliability_pools_slices(cells in prop::collection::vec((0usize..4, 0usize..2, 2030i32..2033, 1.0f64..1e4, 0.0f64..1.0), 1..40)) {
            let service: Vec<ServiceCell> = cells
                .iter()
                .map(|(m, c, y, d, frac)| cell(&format!("M{m}"), &format!("C{c}"), *y, *d, d * frac))
                .collect();
            let inputs = KpiInputs { service: service.clone(), ..Default::default() };
            let national = evaluate(&inputs, &Slice::national()).reliability.unwrap();
            let mut du = (0.0, 0.0);
            for m in 0..4 {
                let r = evaluate(&inputs, &Slice { municipalities: vec![format!("M{m}").as_str().into()], ..Default::default() });
                let d: f64 = service.iter().filter(|s| s.municipality.as_str() == format!("M{m}")).map(|s| s.demand).sum();
                if let Some(r) = r.reliability {
                    du.0 += d;
                    du.1 += (1.0 - r) * d;
                }
            }
            prop_assert!((national - (1.0 - du.1 / du.0)).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&national));

            let mut reversed = inputs.clone();
            reversed.service.reverse();
            let again = evaluate(&reversed, &Slice::national()).reliability.unwrap();
            prop_assert!((again - national).abs() < 1e-12);
        }
    }
}
