//! Crowd spend bookkeeping and the expert-annotation cost model.

use std::fmt;
use std::ops::{Add, AddAssign, Mul};

use serde::{Deserialize, Serialize};

/// Currency amount in micro-dollars.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Money(pub i64);

impl Money {
    pub const ZERO: Money = Money(0);

    pub fn from_cents(cents: i64) -> Self {
        Money(cents * 10_000)
    }

    pub fn from_dollars_f64(d: f64) -> Self {
        Money((d * 1e6).round() as i64)
    }

    pub fn as_dollars(self) -> f64 {
        self.0 as f64 / 1e6
    }

    /// Whole cents, rounding half away from zero.
    pub fn cents(self) -> i64 {
        let q = self.0 / 10_000;
        let r = self.0 % 10_000;
        if r.abs() >= 5_000 {
            q + self.0.signum()
        } else {
            q
        }
    }
}

impl fmt::Display for Money {
    /// `$1,234.56`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cents = self.cents();
        let sign = if cents < 0 { "-" } else { "" };
        let cents = cents.unsigned_abs();
        let dollars = (cents / 100).to_string();
        let mut grouped = String::new();
        for (i, ch) in dollars.chars().enumerate() {
            if i > 0 && (dollars.len() - i).is_multiple_of(3) {
                grouped.push(',');
            }
            grouped.push(ch);
        }
        write!(f, "{sign}${grouped}.{:02}", cents % 100)
    }
}

impl Add for Money {
    type Output = Money;
    fn add(self, rhs: Money) -> Money {
        Money(self.0 + rhs.0)
    }
}

impl AddAssign for Money {
    fn add_assign(&mut self, rhs: Money) {
        self.0 += rhs.0;
    }
}

impl Mul<u64> for Money {
    type Output = Money;
    fn mul(self, rhs: u64) -> Money {
        Money(self.0 * rhs as i64)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub price_per_task: Money,
    pub tasks_issued: u64,
    pub tasks_paid: u64,
    pub tasks_rejected: u64,
    pub total_crowd_cost: Money,
    /// Non-gold answers from accepted tasks.
    pub annotations_collected: u64,
}

impl CostLedger {
    pub fn new(price_per_task: Money) -> Self {
        Self {
            price_per_task,
            tasks_issued: 0,
            tasks_paid: 0,
            tasks_rejected: 0,
            total_crowd_cost: Money::ZERO,
            annotations_collected: 0,
        }
    }

    pub fn pay(&mut self, annotations: u64) {
        self.tasks_paid += 1;
        self.total_crowd_cost = self.price_per_task * self.tasks_paid;
        self.annotations_collected += annotations;
    }
}

impl Default for CostLedger {
    fn default() -> Self {
        Self::new(Money::from_cents(10))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub expert_rate: Money,
    pub derivation: String,
}

impl CostModel {
    /// 16 cents per annotation, the rounded figure quoted for expert labelers.
    pub fn quoted() -> Self {
        Self {
            expert_rate: Money::from_cents(16),
            derivation: "quoted rate: $0.16 per annotation".into(),
        }
    }

    /// Exact rate from an hourly wage and annotation speed.
    pub fn from_wage(wage_per_hour: Money, annotations_per_hour: u32) -> Self {
        assert!(annotations_per_hour > 0);
        let rate = Money(
            (wage_per_hour.0 as f64 / f64::from(annotations_per_hour)).round() as i64,
        );
        Self {
            expert_rate: rate,
            derivation: format!("{wage_per_hour}/hour at {annotations_per_hour} annotations/hour"),
        }
    }
}

impl Default for CostModel {
    fn default() -> Self {
        Self::quoted()
    }
}

pub fn expert_cost_estimate(n_annotations: u64, model: &CostModel) -> Money {
    model.expert_rate * n_annotations
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub tasks_paid: u64,
    pub tasks_rejected: u64,
    pub price_per_task: Money,
    pub total_crowd_cost: Money,
    pub annotations: u64,
    pub expert_rate: Money,
    pub expert_estimate: Money,
    /// Expert estimate divided by crowd spend; `None` when nothing was spent.
    pub savings_ratio: Option<f64>,
}

pub fn cost_report(ledger: &CostLedger, model: &CostModel) -> CostReport {
    let expert = expert_cost_estimate(ledger.annotations_collected, model);
    let savings_ratio = (ledger.total_crowd_cost.0 > 0)
        .then(|| expert.0 as f64 / ledger.total_crowd_cost.0 as f64);
    CostReport {
        tasks_paid: ledger.tasks_paid,
        tasks_rejected: ledger.tasks_rejected,
        price_per_task: ledger.price_per_task,
        total_crowd_cost: ledger.total_crowd_cost,
        annotations: ledger.annotations_collected,
        expert_rate: model.expert_rate,
        expert_estimate: expert,
        savings_ratio,
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "crowd: {} accepted task(s) x {} = {} ({} rejected, unpaid)",
            self.tasks_paid, self.price_per_task, self.total_crowd_cost, self.tasks_rejected
        )?;
        write!(
            f,
            "expert estimate: {} annotation(s) x {} = {}",
            self.annotations, self.expert_rate, self.expert_estimate
        )?;
        if let Some(r) = self.savings_ratio {
            write!(f, " ({r:.1}x crowd spend)")?;
        }
        Ok(())
    }
}
