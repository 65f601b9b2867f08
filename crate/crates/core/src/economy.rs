//! Budgets, bonds, tariffs, inflation and electricity prices.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::UtilityId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EconomyError {
    #[error("allocation rule {rule} needs positive {what} for every utility")]
    NonPositive { rule: &'static str, what: &'static str },
    #[error("custom allocation has {got} weights for {want} utilities")]
    WeightCount { got: usize, want: usize },
    #[error("custom weights must be non-negative and sum to 1, got sum {0}")]
    WeightSum(f64),
    #[error("inflation path does not cover years {from}..{to}")]
    PathTooShort { from: i32, to: i32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "weights")]
pub enum AllocationRule {
    PerCapita,
    InversePopulation,
    IncomeBased,
    Equity,
    Custom(Vec<f64>),
}

impl AllocationRule {
    pub fn name(&self) -> &'static str {
        match self {
            AllocationRule::PerCapita => "per_capita",
            AllocationRule::InversePopulation => "inverse_population",
            AllocationRule::IncomeBased => "income_based",
            AllocationRule::Equity => "equity",
            AllocationRule::Custom(_) => "custom",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtilityStats {
    pub population: f64,
    pub income_index: f64,
}

/// Split `total` (€) across utilities. Shares are rounded to cents with the
/// largest-remainder method, so they add up to the total to the cent.
pub fn allocate_budget(total: f64, rule: &AllocationRule, stats: &[UtilityStats]) -> Result<Vec<f64>, EconomyError> {
    let positive = |vals: &[f64], what: &'static str| {
        if vals.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(EconomyError::NonPositive { rule: rule.name(), what })
        }
    };
    let pops: Vec<f64> = stats.iter().map(|s| s.population).collect();
    let incomes: Vec<f64> = stats.iter().map(|s| s.income_index).collect();
    let weights: Vec<f64> = match rule {
        AllocationRule::PerCapita => {
            if pops.iter().any(|p| *p < 0.0) || pops.iter().sum::<f64>() <= 0.0 {
                return Err(EconomyError::NonPositive { rule: rule.name(), what: "population" });
            }
            pops
        }
        AllocationRule::InversePopulation => {
            positive(&pops, "population")?;
            pops.iter().map(|p| 1.0 / p).collect()
        }
        AllocationRule::IncomeBased => {
            positive(&incomes, "income index")?;
            incomes
        }
        AllocationRule::Equity => {
            positive(&incomes, "income index")?;
            incomes.iter().map(|i| 1.0 / i).collect()
        }
        AllocationRule::Custom(w) => {
            if w.len() != stats.len() {
                return Err(EconomyError::WeightCount { got: w.len(), want: stats.len() });
            }
            let sum: f64 = w.iter().sum();
            if w.iter().any(|x| *x < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(EconomyError::WeightSum(sum));
            }
            w.clone()
        }
    };
    let wsum: f64 = weights.iter().sum();
    let cents = (total * 100.0).round() as i64;
    let raw: Vec<f64> = weights.iter().map(|w| cents as f64 * w / wsum).collect();
    let mut alloc: Vec<i64> = raw.iter().map(|r| r.floor() as i64).collect();
    let mut left = cents - alloc.iter().sum::<i64>();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle().take(order.len() * 2) {
        if left <= 0 {
            break;
        }
        alloc[i] += 1;
        left -= 1;
    }
    Ok(alloc.into_iter().map(|c| c as f64 / 100.0).collect())
}

/// Market conditions in the year a bond is issued.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BondMarket {
    pub risk_free: f64,
    pub credit_spread: f64,
    pub demand_sensitivity: f64,
    /// Investor demand factor in [0.8, 1.2].
    pub demand: f64,
}

/// coupon = r_f + cs + a(1 - d). The two spread terms are added first, which
/// keeps the result correctly rounded for typical inputs.
pub fn coupon_rate(risk_free: f64, credit_spread: f64, sensitivity: f64, demand: f64) -> f64 {
    risk_free + (credit_spread + sensitivity * (1.0 - demand))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bond {
    pub issue_year: i32,
    pub principal: f64,
    pub coupon: f64,
    pub issue_price: f64,
    pub maturity_year: i32,
    pub market: BondMarket,
}

impl Bond {
    /// Interest falls due in every year after issue up to and including maturity.
    pub fn interest_in(&self, year: i32) -> f64 {
        if year > self.issue_year && year <= self.maturity_year {
            self.coupon * self.principal
        } else {
            0.0
        }
    }

    pub fn outstanding_in(&self, year: i32) -> bool {
        year > self.issue_year && year <= self.maturity_year
    }
}

/// Bond covering `shortfall`, issued at par; `None` when there is no shortfall.
pub fn issue_bond_if_needed(shortfall: f64, market: &BondMarket, year: i32, maturity: u32) -> Option<Bond> {
    if shortfall <= 0.0 {
        return None;
    }
    Some(Bond {
        issue_year: year,
        principal: shortfall,
        coupon: coupon_rate(market.risk_free, market.credit_spread, market.demand_sensitivity, market.demand),
        issue_price: shortfall,
        maturity_year: year + maturity as i32,
        market: *market,
    })
}

/// Yearly revenue from a fixed charge per household and a volumetric charge on billed water.
pub fn tariff_revenue(households: f64, fixed_per_month: f64, billed_volume: f64, volumetric: f64) -> f64 {
    households * fixed_per_month * 12.0 + billed_volume * volumetric
}

/// Compound `value` over the inflation rates of years `from+1 ..= to`.
/// `rates[k]` is the rate of year `base_year + k`.
pub fn escalate(value: f64, rates: &[f64], base_year: i32, from: i32, to: i32) -> Result<f64, EconomyError> {
    if to <= from {
        return Ok(value);
    }
    let lo = from + 1 - base_year;
    let hi = to - base_year;
    if lo < 0 || hi as usize >= rates.len() {
        return Err(EconomyError::PathTooShort { from, to });
    }
    Ok(rates[lo as usize..=hi as usize].iter().fold(value, |v, r| v * (1.0 + r)))
}

/// Scale a daily price shape so its mean is one.
pub fn normalise_shape(shape: &[f64; 24]) -> [f64; 24] {
    let mean = shape.iter().sum::<f64>() / 24.0;
    let mut out = *shape;
    if mean > 0.0 {
        for v in &mut out {
            *v /= mean;
        }
    }
    out
}

/// €/kWh in `hour` of a day, for a yearly level and a mean-one daily shape.
pub fn hourly_electricity_price(level: f64, shape: &[f64; 24], hour: usize) -> f64 {
    level * shape[hour % 24]
}

/// Money flows of one utility in one year. The identity
/// `remaining = carried + allocated + revenue + bond_issued - capex - opex
/// - fines - interest - principal_repaid` holds with `remaining >= 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerYear {
    pub utility: UtilityId,
    pub year: i32,
    pub carried: f64,
    pub allocated: f64,
    pub revenue: f64,
    pub capex: f64,
    pub opex: f64,
    pub fines: f64,
    pub interest: f64,
    pub principal_repaid: f64,
    pub bond_issued: f64,
    pub remaining: f64,
}

impl LedgerYear {
    pub fn identity_gap(&self) -> f64 {
        self.carried + self.allocated + self.revenue + self.bond_issued
            - self.capex
            - self.opex
            - self.fines
            - self.interest
            - self.principal_repaid
            - self.remaining
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UtilityFinance {
    /// Unspent budget carried into the next year.
    pub cash: f64,
    pub bonds: Vec<Bond>,
}

/// Flows booked during a year before closing the books.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct YearFlows {
    pub allocated: f64,
    pub revenue: f64,
    pub capex: f64,
    pub opex: f64,
    pub fines: f64,
}

impl UtilityFinance {
    pub fn interest_due(&self, year: i32) -> f64 {
        self.bonds.iter().map(|b| b.interest_in(year)).sum()
    }

    pub fn principal_due(&self, year: i32) -> f64 {
        self.bonds.iter().filter(|b| b.maturity_year == year).map(|b| b.principal).sum()
    }

    /// Close the year: pay interest and maturing principal, issue a bond
    /// for any deficit and carry the rest forward.
    pub fn close_year(
        &mut self,
        utility: &UtilityId,
        year: i32,
        flows: YearFlows,
        market: &BondMarket,
        maturity: u32,
    ) -> LedgerYear {
        let interest = self.interest_due(year);
        let principal_repaid = self.principal_due(year);
        let carried = self.cash;
        let balance =
            carried + flows.allocated + flows.revenue - flows.capex - flows.opex - flows.fines - interest - principal_repaid;
        let mut bond_issued = 0.0;
        if let Some(b) = issue_bond_if_needed(-balance, market, year, maturity) {
            bond_issued = b.principal;
            self.bonds.push(b);
        }
        let remaining = (balance + bond_issued).max(0.0);
        self.cash = remaining;
        LedgerYear {
            utility: utility.clone(),
            year,
            carried,
            allocated: flows.allocated,
            revenue: flows.revenue,
            capex: flows.capex,
            opex: flows.opex,
            fines: flows.fines,
            interest,
            principal_repaid,
            bond_issued,
            remaining,
        }
    }
}
