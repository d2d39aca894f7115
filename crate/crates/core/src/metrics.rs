//! KPI aggregation over replications, interval-based comparison, cost
//! conversion and Pareto fronts.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::chamber::BatchRecord;
use crate::stoppol::PolicySpec;
use crate::sweep::DesignPoint;

pub const PRICE_PER_KWH: f64 = 0.197;
pub const WAGE_PER_HOUR: f64 = 40.90;
pub const MINUTES_PER_INSPECTION: f64 = 15.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no post-warm-up batches to summarise")]
    NoBatches,
    #[error("no replications for point {0}")]
    NoReplications(u64),
    #[error("point {0} has no {1} interval (needs at least 2 replications)")]
    MissingInterval(u64, Level),
    #[error("no design point matches the filter")]
    EmptySelection,
    #[error("Welch test needs at least 2 values per sample")]
    TooFewSamples,
}

/// Run-level sufficient statistics over post-warm-up batches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub batches: usize,
    pub mean_energy: f64,
    pub rework_ratio: f64,
    pub mean_inspections: f64,
}

impl RunSummary {
    /// Summarises the records that are not flagged as warm-up.
    pub fn from_records<'a>(
        records: impl IntoIterator<Item = &'a BatchRecord>,
    ) -> Result<Self, MetricsError> {
        let (mut n, mut energy, mut reworked, mut inspections) = (0usize, 0.0, 0usize, 0u64);
        for r in records.into_iter().filter(|r| !r.in_warmup) {
            n += 1;
            energy += r.total_reported_energy;
            reworked += usize::from(r.needed_rework());
            inspections += u64::from(r.inspection_count);
        }
        if n == 0 {
            return Err(MetricsError::NoBatches);
        }
        let nf = n as f64;
        Ok(Self {
            batches: n,
            mean_energy: energy / nf,
            rework_ratio: reworked as f64 / nf,
            mean_inspections: inspections as f64 / nf,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    P95,
    P99,
}

impl Level {
    pub fn alpha(&self) -> f64 {
        match self {
            Level::P95 => 0.05,
            Level::P99 => 0.01,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Level::P95 => f.write_str("95%"),
            Level::P99 => f.write_str("99%"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn half_width(&self) -> f64 {
        0.5 * (self.hi - self.lo)
    }

    pub fn contains(&self, other: &Interval) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }
}

/// Two-sided Student-t quantile `t_{1 - alpha/2, df}`.
pub fn t_quantile(alpha: f64, df: f64) -> f64 {
    StudentsT::new(0.0, 1.0, df)
        .expect("positive degrees of freedom")
        .inverse_cdf(1.0 - alpha / 2.0)
}

/// Student-t interval for the mean of `values`.
pub fn mean_interval(values: &[f64], level: Level) -> Option<Interval> {
    let n = values.len();
    if n < 2 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = sample_sd(values, mean);
    let h = t_quantile(level.alpha(), (n - 1) as f64) * sd / (n as f64).sqrt();
    Some(Interval {
        lo: mean - h,
        hi: mean + h,
    })
}

fn sample_sd(values: &[f64], mean: f64) -> f64 {
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// KPIs of one design point over its replications.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KpiSummary {
    pub point_id: u64,
    pub replications: usize,
    pub mean_energy_per_batch: f64,
    pub rework_ratio: f64,
    pub mean_inspections_per_batch: f64,
    pub ci95: Option<Interval>,
    pub ci99: Option<Interval>,
}

impl KpiSummary {
    pub fn interval(&self, level: Level) -> Option<Interval> {
        match level {
            Level::P95 => self.ci95,
            Level::P99 => self.ci99,
        }
    }
}

/// Averages replication summaries; intervals are `None` below two replications.
pub fn aggregate(point_id: u64, runs: &[RunSummary]) -> Result<KpiSummary, MetricsError> {
    if runs.is_empty() {
        return Err(MetricsError::NoReplications(point_id));
    }
    let n = runs.len() as f64;
    let mut energies: Vec<f64> = runs.iter().map(|r| r.mean_energy).collect();
    // summation order must not depend on replication order
    energies.sort_by(f64::total_cmp);
    let mean_of = |f: fn(&RunSummary) -> f64| {
        let mut v: Vec<f64> = runs.iter().map(f).collect();
        v.sort_by(f64::total_cmp);
        v.iter().sum::<f64>() / n
    };
    Ok(KpiSummary {
        point_id,
        replications: runs.len(),
        mean_energy_per_batch: energies.iter().sum::<f64>() / n,
        rework_ratio: mean_of(|r| r.rework_ratio),
        mean_inspections_per_batch: mean_of(|r| r.mean_inspections),
        ci95: mean_interval(&energies, Level::P95),
        ci99: mean_interval(&energies, Level::P99),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    ABetter,
    BBetter,
    Indistinguishable,
}

/// Lower energy wins when the intervals do not overlap.
pub fn compare(a: &KpiSummary, b: &KpiSummary, level: Level) -> Result<Verdict, MetricsError> {
    let ia = a
        .interval(level)
        .ok_or(MetricsError::MissingInterval(a.point_id, level))?;
    let ib = b
        .interval(level)
        .ok_or(MetricsError::MissingInterval(b.point_id, level))?;
    Ok(if ia.hi < ib.lo {
        Verdict::ABetter
    } else if ib.hi < ia.lo {
        Verdict::BBetter
    } else {
        Verdict::Indistinguishable
    })
}

/// Two-sided Welch t-test p-value.
pub fn welch_test(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(MetricsError::TooFewSamples);
    }
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let s = sample_sd(v, m);
        (m, s * s / n, n)
    };
    let (ma, va, na) = stats(a);
    let (mb, vb, nb) = stats(b);
    let se2 = va + vb;
    if se2 == 0.0 {
        return Ok(if ma == mb { 1.0 } else { 0.0 });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    Ok(2.0 * dist.sf(t.abs()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRates {
    pub price_per_kwh: f64,
    pub wage_per_hour: f64,
    pub minutes_per_inspection: f64,
}

impl Default for CostRates {
    fn default() -> Self {
        Self {
            price_per_kwh: PRICE_PER_KWH,
            wage_per_hour: WAGE_PER_HOUR,
            minutes_per_inspection: MINUTES_PER_INSPECTION,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub point_id: u64,
    pub energy_cost: f64,
    pub personnel_cost: f64,
}

impl ParetoPoint {
    /// No worse in both costs and better in one.
    pub fn dominates(&self, other: &ParetoPoint) -> bool {
        self.energy_cost <= other.energy_cost
            && self.personnel_cost <= other.personnel_cost
            && (self.energy_cost < other.energy_cost || self.personnel_cost < other.personnel_cost)
    }
}

pub fn to_costs(summary: &KpiSummary, rates: &CostRates) -> ParetoPoint {
    ParetoPoint {
        point_id: summary.point_id,
        energy_cost: summary.mean_energy_per_batch * rates.price_per_kwh,
        personnel_cost: summary.mean_inspections_per_batch * rates.minutes_per_inspection / 60.0
            * rates.wage_per_hour,
    }
}

fn by_costs(a: &ParetoPoint, b: &ParetoPoint) -> Ordering {
    a.energy_cost
        .total_cmp(&b.energy_cost)
        .then(a.personnel_cost.total_cmp(&b.personnel_cost))
}

/// Non-dominated points ordered by energy cost; exact duplicates are kept.
pub fn pareto_front(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let mut sorted = points.to_vec();
    sorted.sort_by(by_costs);
    let mut front = Vec::new();
    // lowest personnel cost among points with strictly lower energy cost
    let mut best_before = f64::INFINITY;
    let mut i = 0;
    while i < sorted.len() {
        let e = sorted[i].energy_cost;
        let mut j = i;
        while j < sorted.len() && sorted[j].energy_cost == e {
            j += 1;
        }
        let group_min = sorted[i].personnel_cost;
        if group_min < best_before {
            front.extend(
                sorted[i..j]
                    .iter()
                    .filter(|p| p.personnel_cost == group_min),
            );
            best_before = group_min;
        }
        i = j;
    }
    front
}

/// Argmin of mean energy over the points accepted by `filter`. Ties go to the
/// lower rework factor, then the lower policy parameter, then the lower id.
pub fn best_per_scenario<F>(
    rows: &[(DesignPoint, KpiSummary)],
    mut filter: F,
) -> Result<&(DesignPoint, KpiSummary), MetricsError>
where
    F: FnMut(&DesignPoint) -> bool,
{
    rows.iter()
        .filter(|(p, _)| filter(p))
        .min_by(|(pa, ka), (pb, kb)| {
            ka.mean_energy_per_batch
                .total_cmp(&kb.mean_energy_per_batch)
                .then(pa.rework_factor.total_cmp(&pb.rework_factor))
                .then(policy_level(&pa.policy).total_cmp(&policy_level(&pb.policy)))
                .then(pa.point_id.cmp(&pb.point_id))
        })
        .ok_or(MetricsError::EmptySelection)
}

/// The tuned parameter of a policy: beta for the sensor-driven policy, the
/// main factor for fixed-time ones.
pub fn policy_level(policy: &PolicySpec) -> f64 {
    match policy {
        PolicySpec::Sba(p) => p.beta,
        other => other.main_factor().unwrap_or(0.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(id: u64, energies: &[f64]) -> KpiSummary {
        let runs: Vec<RunSummary> = energies
            .iter()
            .map(|&e| RunSummary {
                batches: 10,
                mean_energy: e,
                rework_ratio: 0.5,
                mean_inspections: 1.2,
            })
            .collect();
        aggregate(id, &runs).unwrap()
    }

    #[test]
    fn hand_computed_t_interval() {
        let s = summary(0, &[10.0, 12.0, 14.0, 16.0, 18.0]);
        assert_eq!(s.mean_energy_per_batch, 14.0);
        let h = s.ci95.unwrap().half_width();
        // t_{0.975,4} = 2.7764451051977987, sd = sqrt(10)
        let oracle = 2.776_445_105_197_799 * 10f64.sqrt() / 5f64.sqrt();
        assert!((h - oracle).abs() < 1e-9, "{h}");
        assert!((h - 3.926).abs() < 1e-3);
        assert!(s.ci99.unwrap().contains(&s.ci95.unwrap()));
    }

    #[test]
    fn identical_replications_give_zero_width() {
        let s = summary(0, &[5.0; 4]);
        assert_eq!(s.ci95.unwrap().half_width(), 0.0);
        assert_eq!(s.ci99.unwrap().half_width(), 0.0);
    }

    #[test]
    fn single_replication_has_no_interval() {
        let s = summary(3, &[5.0]);
        assert!(s.ci95.is_none());
        assert_eq!(
            compare(&s, &s, Level::P95),
            Err(MetricsError::MissingInterval(3, Level::P95))
        );
        assert_eq!(aggregate(1, &[]), Err(MetricsError::NoReplications(1)));
    }

    #[test]
    fn compare_cases() {
        let a = summary(0, &[1.0, 2.0, 1.5, 1.5]);
        let b = summary(1, &[30.0, 31.0, 30.5, 30.5]);
        assert_eq!(compare(&a, &b, Level::P95).unwrap(), Verdict::ABetter);
        assert_eq!(compare(&b, &a, Level::P99).unwrap(), Verdict::BBetter);
        assert_eq!(
            compare(&a, &a, Level::P95).unwrap(),
            Verdict::Indistinguishable
        );
    }

    #[test]
    fn cost_examples() {
        let mut s = summary(0, &[1000.0, 1000.0]);
        s.mean_inspections_per_batch = 1.27;
        let c = to_costs(&s, &CostRates::default());
        assert!((c.energy_cost - 197.0).abs() < 1e-9);
        assert!((c.personnel_cost - 12.98575).abs() < 1e-9);
        s.mean_inspections_per_batch = 0.0;
        assert_eq!(to_costs(&s, &CostRates::default()).personnel_cost, 0.0);
    }

    #[test]
    fn pareto_examples() {
        let p = |id, e, c| ParetoPoint {
            point_id: id,
            energy_cost: e,
            personnel_cost: c,
        };
        let pts = [p(0, 1.0, 5.0), p(1, 2.0, 2.0), p(2, 3.0, 3.0)];
        let ids: Vec<u64> = pareto_front(&pts).iter().map(|q| q.point_id).collect();
        assert_eq!(ids, vec![0, 1]);
        let same = [p(0, 1.0, 1.0), p(1, 1.0, 1.0), p(2, 1.0, 1.0)];
        assert_eq!(pareto_front(&same).len(), 3);
        assert_eq!(pareto_front(&pts[..1]), vec![pts[0]]);
        assert!(pareto_front(&[]).is_empty());
    }

    #[test]
    fn welch_detects_shift() {
        let a = [10.0, 11.0, 9.0, 10.5, 9.5];
        let b = [20.0, 21.0, 19.0, 20.5, 19.5];
        assert!(welch_test(&a, &b).unwrap() < 1e-6);
        assert!((welch_test(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(welch_test(&a[..1], &b).is_err());
    }
}
