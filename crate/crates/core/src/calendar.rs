//! Simulation calendar.
//!
//! The simulator uses a fixed 365-day year of 8760 hours. Calendar dates in
//! input documents are ISO dates; February 29th is folded onto February 28th.

use chrono::{Datelike, NaiveDate};

pub const DAYS_PER_YEAR: usize = 365;
pub const HOURS_PER_DAY: usize = 24;
pub const HOURS_PER_YEAR: usize = DAYS_PER_YEAR * HOURS_PER_DAY;

pub const MONTH_LENGTHS: [usize; 12] = [31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31];

/// Day-of-year (0-based) of the first day of each quarter.
pub const QUARTER_START_DAYS: [usize; 4] = [0, 90, 181, 273];

/// A position in simulated time: calendar year plus 0-based day of year.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SimDay {
    pub year: i32,
    pub day: usize,
}

impl SimDay {
    pub fn new(year: i32, day: usize) -> Self {
        debug_assert!(day < DAYS_PER_YEAR);
        Self { year, day }
    }

    pub fn jan1(year: i32) -> Self {
        Self { year, day: 0 }
    }

    pub fn from_date(date: NaiveDate) -> Self {
        let mut day = date.ordinal0() as usize;
        if is_leap(date.year()) && day >= 59 {
            // Feb 29 and later shift back by one so Dec 31 stays day 364.
            day -= 1;
        }
        Self { year: date.year(), day: day.min(DAYS_PER_YEAR - 1) }
    }

    pub fn to_date(self) -> NaiveDate {
        let (month, dom) = month_and_day(self.day);
        NaiveDate::from_ymd_opt(self.year, month as u32 + 1, dom as u32 + 1)
            .expect("valid calendar day")
    }

    /// Shift by whole years, keeping the day of year.
    pub fn add_years(self, years: i32) -> Self {
        Self { year: self.year + years, day: self.day }
    }

    /// Fractional year, used for prorating yearly quantities.
    pub fn as_fraction(self) -> f64 {
        self.year as f64 + self.day as f64 / DAYS_PER_YEAR as f64
    }
}

fn is_leap(year: i32) -> bool {
    (year % 4 == 0 && year % 100 != 0) || year % 400 == 0
}

/// Month (0-based) and day-of-month (0-based) for a day of year.
pub fn month_and_day(day: usize) -> (usize, usize) {
    let mut rest = day;
    for (m, len) in MONTH_LENGTHS.iter().enumerate() {
        if rest < *len {
            return (m, rest);
        }
        rest -= len;
    }
    (11, 30)
}

pub fn month_start_day(month: usize) -> usize {
    MONTH_LENGTHS[..month].iter().sum()
}

pub fn is_jan1(date: NaiveDate) -> bool {
    date.month() == 1 && date.day() == 1
}

/// True for January, April, July or October 1st.
pub fn is_quarter_start(date: NaiveDate) -> bool {
    date.day() == 1 && matches!(date.month(), 1 | 4 | 7 | 10)
}
