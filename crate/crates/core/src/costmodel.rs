//! Spam cost calculator.
//!
//! All arithmetic is exact rational; rounding (half-up, two decimals for
//! currency) happens only when a value is rendered. Productivity days come
//! from an explicit hours-per-workday divisor (default 8) — they are this
//! module's own figure, not a reproduction of any external calculator.

use num_rational::Ratio;
use num_traits::{Signed, Zero};
use serde_json::json;
use thiserror::Error;

/// Exact rational used throughout; i128 leaves ample headroom.
pub type Rat = Ratio<i128>;

pub const DEFAULT_HOURS_PER_WORKDAY: u32 = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CostError {
    #[error("invalid input: {0}")]
    InvalidInput(&'static str),
    #[error("unparseable decimal {0:?}")]
    BadDecimal(String),
}

/// Parse a non-negative decimal string ("15", "15.00", "2.5") exactly.
pub fn parse_decimal(text: &str) -> Result<Rat, CostError> {
    let bad = || CostError::BadDecimal(text.to_string());
    let (int_part, frac_part) = match text.split_once('.') {
        Some((i, f)) => (i, f),
        None => (text, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(bad());
    }
    let digits = |s: &str| s.is_empty() || s.bytes().all(|b| b.is_ascii_digit());
    if !digits(int_part) || !digits(frac_part) || frac_part.len() > 12 {
        return Err(bad());
    }
    let int: i128 = if int_part.is_empty() { 0 } else { int_part.parse().map_err(|_| bad())? };
    let frac: i128 = if frac_part.is_empty() { 0 } else { frac_part.parse().map_err(|_| bad())? };
    let scale = 10i128.pow(frac_part.len() as u32);
    Ok(Rat::new(int * scale + frac, scale))
}

/// Calculator inputs. Wage is EUR per hour; the two rates may be zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CostInputs {
    pub employees: u32,
    pub workdays_per_year: u32,
    pub hourly_wage: Rat,
    pub spam_per_day_per_employee: Rat,
    pub seconds_per_spam: Rat,
    pub hours_per_workday: Rat,
}

impl CostInputs {
    pub fn new(
        employees: u32,
        workdays_per_year: u32,
        hourly_wage: Rat,
        spam_per_day_per_employee: Rat,
        seconds_per_spam: Rat,
    ) -> Result<Self, CostError> {
        let inputs = CostInputs {
            employees,
            workdays_per_year,
            hourly_wage,
            spam_per_day_per_employee,
            seconds_per_spam,
            hours_per_workday: Rat::from_integer(DEFAULT_HOURS_PER_WORKDAY.into()),
        };
        inputs.validate()?;
        Ok(inputs)
    }

    pub fn with_hours_per_workday(mut self, hours: Rat) -> Result<Self, CostError> {
        self.hours_per_workday = hours;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), CostError> {
        if self.employees == 0 {
            return Err(CostError::InvalidInput("employees must be positive"));
        }
        if self.workdays_per_year == 0 {
            return Err(CostError::InvalidInput("workdays per year must be positive"));
        }
        if self.hourly_wage <= Rat::zero() {
            return Err(CostError::InvalidInput("hourly wage must be positive"));
        }
        if self.spam_per_day_per_employee.is_negative() {
            return Err(CostError::InvalidInput("spam per day cannot be negative"));
        }
        if self.seconds_per_spam.is_negative() {
            return Err(CostError::InvalidInput("seconds per spam cannot be negative"));
        }
        if self.hours_per_workday <= Rat::zero() {
            return Err(CostError::InvalidInput("hours per workday must be positive"));
        }
        Ok(())
    }
}

/// Exact calculator outputs, inputs echoed for rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub inputs: CostInputs,
    pub annual_cost: Rat,
    pub daily_cost: Rat,
    pub annual_cost_per_employee: Rat,
    pub daily_cost_per_employee: Rat,
    pub annual_hours_lost: Rat,
    pub annual_productivity_days: Rat,
    pub per_employee_productivity_days: Rat,
}

/// hours lost = employees x workdays x spam/day x seconds / 3600;
/// costs scale by the hourly wage, per-day and per-employee values divide.
pub fn compute(inputs: &CostInputs) -> Result<CostReport, CostError> {
    inputs.validate()?;
    let employees = Rat::from_integer(inputs.employees.into());
    let workdays = Rat::from_integer(inputs.workdays_per_year.into());

    let annual_hours_lost = employees * workdays * inputs.spam_per_day_per_employee
        * inputs.seconds_per_spam
        / Rat::from_integer(3600);
    let annual_cost = annual_hours_lost * inputs.hourly_wage;
    let daily_cost = annual_cost / workdays;
    let annual_productivity_days = annual_hours_lost / inputs.hours_per_workday;

    Ok(CostReport {
        inputs: inputs.clone(),
        annual_cost,
        daily_cost,
        annual_cost_per_employee: annual_cost / employees,
        daily_cost_per_employee: daily_cost / employees,
        annual_hours_lost,
        annual_productivity_days,
        per_employee_productivity_days: annual_productivity_days / employees,
    })
}

/// Thousands/decimal separator conventions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Locale {
    /// 48,875.00
    #[default]
    En,
    /// 48.875,00
    Eu,
}

impl std::str::FromStr for Locale {
    type Err = CostError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "en" => Ok(Locale::En),
            "eu" => Ok(Locale::Eu),
            _ => Err(CostError::InvalidInput("locale must be en or eu")),
        }
    }
}

/// Round half-up to `decimals` places and return the scaled integer.
fn round_half_up_scaled(x: Rat, decimals: u32) -> i128 {
    let scale = Rat::from_integer(10i128.pow(decimals));
    (x * scale + Rat::new(1, 2)).floor().to_integer()
}

/// Fixed-point rendering with locale separators; rounding is half-up and
/// happens here, never inside the arithmetic.
pub fn format_fixed(x: Rat, decimals: u32, locale: Locale) -> String {
    let (thousands, point) = match locale {
        Locale::En => (',', '.'),
        Locale::Eu => ('.', ','),
    };
    let scaled = round_half_up_scaled(x, decimals);
    let divisor = 10i128.pow(decimals);
    let int_part = scaled / divisor;
    let frac_part = (scaled % divisor).abs();

    let digits = int_part.abs().to_string();
    let mut grouped = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            grouped.push(thousands);
        }
        grouped.push(c);
    }
    let sign = if int_part < 0 { "-" } else { "" };
    if decimals == 0 {
        format!("{sign}{grouped}")
    } else {
        format!("{sign}{grouped}{point}{frac:0width$}", frac = frac_part, width = decimals as usize)
    }
}

pub fn format_currency(x: Rat, locale: Locale) -> String {
    format_fixed(x, 2, locale)
}

/// Exact value as an integer or reduced fraction string, for JSON output.
fn exact_string(x: Rat) -> String {
    if x.denom() == &1 {
        x.numer().to_string()
    } else {
        format!("{}/{}", x.numer(), x.denom())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Text,
    Json,
}

/// Render the calculator results: a two-column text table (corporate,
/// per-employee) or JSON carrying both the exact rationals and the rounded
/// display strings.
pub fn render_cost_table(report: &CostReport, format: TableFormat, locale: Locale) -> String {
    match format {
        TableFormat::Text => render_text(report, locale),
        TableFormat::Json => {
            serde_json::to_string_pretty(&cost_json(report, locale)).expect("static json")
        }
    }
}

fn render_text(report: &CostReport, locale: Locale) -> String {
    let i = &report.inputs;
    let money = |x: Rat| format_currency(x, locale);
    let days = |x: Rat| format_fixed(x, 2, locale);
    let mut out = String::new();
    out.push_str("Input data\n");
    let inputs: [(&str, String); 5] = [
        ("Number of employees with email accounts", i.employees.to_string()),
        ("Number of workdays per year per employee", i.workdays_per_year.to_string()),
        ("Average hourly wage per employee (EUR)", money(i.hourly_wage)),
        ("Average number of spam emails per day per employee", format_fixed(i.spam_per_day_per_employee, 0, locale)),
        ("Number of seconds wasted with each spam message", format_fixed(i.seconds_per_spam, 0, locale)),
    ];
    for (label, value) in inputs {
        out.push_str(&format!("  {label:<52} {value:>12}\n"));
    }
    out.push('\n');
    out.push_str("Output data                             Total Corporate   Per Employee\n");
    let rows: [(&str, String, String); 4] = [
        (
            "Financial cost (EUR), per year",
            money(report.annual_cost),
            money(report.annual_cost_per_employee),
        ),
        (
            "Financial cost (EUR), per day",
            money(report.daily_cost),
            money(report.daily_cost_per_employee),
        ),
        (
            "Productivity lost (days), per year",
            days(report.annual_productivity_days),
            days(report.per_employee_productivity_days),
        ),
        (
            "Working time lost (hours), per year",
            days(report.annual_hours_lost),
            days(report.annual_hours_lost / Rat::from_integer(i.employees.into())),
        ),
    ];
    for (label, corporate, per_employee) in rows {
        out.push_str(&format!("  {label:<37} {corporate:>14} {per_employee:>14}\n"));
    }
    out
}

/// JSON shape: every value carries the exact rational and a display string.
pub fn cost_json(report: &CostReport, locale: Locale) -> serde_json::Value {
    let i = &report.inputs;
    let value = |x: Rat, decimals: u32| {
        json!({ "exact": exact_string(x), "display": format_fixed(x, decimals, locale) })
    };
    json!({
        "inputs": {
            "employees": i.employees,
            "workdays_per_year": i.workdays_per_year,
            "hourly_wage": value(i.hourly_wage, 2),
            "spam_per_day_per_employee": value(i.spam_per_day_per_employee, 2),
            "seconds_per_spam": value(i.seconds_per_spam, 2),
            "hours_per_workday": value(i.hours_per_workday, 2),
        },
        "outputs": {
            "annual_cost": value(report.annual_cost, 2),
            "daily_cost": value(report.daily_cost, 2),
            "annual_cost_per_employee": value(report.annual_cost_per_employee, 2),
            "daily_cost_per_employee": value(report.daily_cost_per_employee, 2),
            "annual_hours_lost": value(report.annual_hours_lost, 2),
            "annual_productivity_days": value(report.annual_productivity_days, 2),
            "per_employee_productivity_days": value(report.per_employee_productivity_days, 2),
        },
    })
}
