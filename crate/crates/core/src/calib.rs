//! Back-calculation of expected minimum energies from inspection statistics,
//! program demand shares, and the share-weighted baseline parameters.
//!
//! The planned energy is read as the `(1 - r)` quantile of a Gaussian with
//! mean `E` and standard deviation `cv * E`, where `r` is the observed rework
//! ratio; solving for `E` gives `planned / (1 + cv * z)`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chamber::ProgramId;
use crate::plantsim::ScenarioConfig;
use crate::randkit::{standard_normal_quantile, RandError};

const BUNDLED_INSPECTIONS: &str = include_str!("../data/inspections.csv");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibError {
    #[error("rework ratio {0} must lie strictly between 0 and 1")]
    Ratio(f64),
    #[error("lead CV {0} must be positive")]
    Cv(f64),
    #[error("1 + cv * z = {0} is not positive")]
    Denominator(f64),
    #[error("planned energy {0} must be positive")]
    Energy(f64),
    #[error("program {0} has no inspection statistics")]
    NoStatistics(ProgramId),
    #[error("shares sum to {0}, not 1")]
    Shares(f64),
    #[error("inspection table: {0}")]
    Format(String),
    #[error(transparent)]
    Rand(#[from] RandError),
}

/// One program's planned processing and inspection statistics. Programs
/// without inspections leave the statistics empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InspectionRow {
    pub program_id: ProgramId,
    pub planned_time_maturation_h: f64,
    pub cum_energy_maturation_kwh: f64,
    pub planned_time_drying_h: f64,
    pub cum_energy_drying_kwh: f64,
    pub lead_cv: Option<f64>,
    pub inspections: Option<u32>,
    pub reworks: Option<u32>,
    /// Published expected curing requirement, used when statistics are missing.
    pub reference_curing_kwh: Option<f64>,
    pub reference_humidity_kwh: Option<f64>,
}

impl InspectionRow {
    pub fn rework_ratio(&self) -> Option<f64> {
        match (self.inspections, self.reworks) {
            (Some(n), Some(k)) if n > 0 => Some(f64::from(k) / f64::from(n)),
            _ => None,
        }
    }

    fn stats(&self) -> Result<(f64, f64), CalibError> {
        match (self.lead_cv, self.rework_ratio()) {
            (Some(cv), Some(r)) => Ok((cv, r)),
            _ => Err(CalibError::NoStatistics(self.program_id)),
        }
    }

    /// Provided-to-required ratio, from the reference requirement when given.
    pub fn provided_ratio(&self) -> Result<f64, CalibError> {
        let e = match self.reference_curing_kwh {
            Some(e) => e,
            None => estimate_expected_min_energy(self)?,
        };
        Ok(self.cum_energy_maturation_kwh / e)
    }
}

/// Expected requirement whose Gaussian `(1 - rework_ratio)` quantile is `planned`.
pub fn back_calculate(planned: f64, cv: f64, rework_ratio: f64) -> Result<f64, CalibError> {
    if !(planned.is_finite() && planned > 0.0) {
        return Err(CalibError::Energy(planned));
    }
    if !(cv.is_finite() && cv > 0.0) {
        return Err(CalibError::Cv(cv));
    }
    if !(rework_ratio > 0.0 && rework_ratio < 1.0) {
        return Err(CalibError::Ratio(rework_ratio));
    }
    let z = standard_normal_quantile(1.0 - rework_ratio);
    let d = 1.0 + cv * z;
    if d <= 0.0 {
        return Err(CalibError::Denominator(d));
    }
    Ok(planned / d)
}

/// Planned energy that a requirement of mean `expected` would put at the
/// `(1 - rework_ratio)` quantile.
pub fn forward_quantile(expected: f64, cv: f64, rework_ratio: f64) -> f64 {
    expected * (1.0 + cv * standard_normal_quantile(1.0 - rework_ratio))
}

/// Expected curing requirement of one row.
pub fn estimate_expected_min_energy(row: &InspectionRow) -> Result<f64, CalibError> {
    let (cv, r) = row.stats()?;
    back_calculate(row.cum_energy_maturation_kwh, cv, r)
}

/// Expected humidity requirement, using the same ratio as curing.
pub fn estimate_expected_humidity_energy(row: &InspectionRow) -> Result<f64, CalibError> {
    let (cv, r) = row.stats()?;
    back_calculate(row.cum_energy_drying_kwh, cv, r)
}

/// Pallet-demand share per program: probability times mean lot size, normalised.
pub fn demand_shares(config: &ScenarioConfig) -> BTreeMap<ProgramId, f64> {
    let mut shares = BTreeMap::new();
    for t in &config.plate_types {
        *shares.entry(t.program).or_insert(0.0) += t.probability * t.lot_mean;
    }
    let total: f64 = shares.values().sum();
    for v in shares.values_mut() {
        *v /= total;
    }
    shares
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct WeightedBaseline {
    pub cv: f64,
    pub factor: f64,
}

/// Share-weighted CV (over rows with statistics, renormalised) and
/// share-weighted provided-to-required ratio (over all rows).
pub fn weighted_baseline(
    rows: &[InspectionRow],
    shares: &BTreeMap<ProgramId, f64>,
) -> Result<WeightedBaseline, CalibError> {
    let total: f64 = rows
        .iter()
        .map(|r| shares.get(&r.program_id).copied().unwrap_or(0.0))
        .sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(CalibError::Shares(total));
    }
    let (mut cv_sum, mut cv_weight, mut factor) = (0.0, 0.0, 0.0);
    for r in rows {
        let w = shares.get(&r.program_id).copied().unwrap_or(0.0);
        if let Some(cv) = r.lead_cv {
            cv_sum += w * cv;
            cv_weight += w;
        }
        factor += w * r.provided_ratio()?;
    }
    Ok(WeightedBaseline {
        cv: if cv_weight > 0.0 {
            cv_sum / cv_weight
        } else {
            0.0
        },
        factor,
    })
}

pub fn parse_inspections(text: &str) -> Result<Vec<InspectionRow>, CalibError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    reader
        .deserialize()
        .map(|r| r.map_err(|e| CalibError::Format(e.to_string())))
        .collect()
}

pub fn load_inspections(path: impl AsRef<Path>) -> Result<Vec<InspectionRow>, CalibError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| CalibError::Format(format!("{}: {e}", path.display())))?;
    parse_inspections(&text)
}

pub fn bundled_inspections() -> Vec<InspectionRow> {
    parse_inspections(BUNDLED_INSPECTIONS).expect("bundled inspection table parses")
}

/// One line of the calibration report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CalibrationLine {
    pub program_id: ProgramId,
    pub rework_ratio: Option<f64>,
    pub estimated_curing_kwh: Option<f64>,
    pub estimated_humidity_kwh: Option<f64>,
    pub reference_curing_kwh: Option<f64>,
    pub reference_humidity_kwh: Option<f64>,
    pub provided_ratio: Option<f64>,
    pub demand_share: f64,
}

pub fn calibration_report(
    rows: &[InspectionRow],
    shares: &BTreeMap<ProgramId, f64>,
) -> Vec<CalibrationLine> {
    rows.iter()
        .map(|r| CalibrationLine {
            program_id: r.program_id,
            rework_ratio: r.rework_ratio(),
            estimated_curing_kwh: estimate_expected_min_energy(r).ok(),
            estimated_humidity_kwh: estimate_expected_humidity_energy(r).ok(),
            reference_curing_kwh: r.reference_curing_kwh,
            reference_humidity_kwh: r.reference_humidity_kwh,
            provided_ratio: r.provided_ratio().ok(),
            demand_share: shares.get(&r.program_id).copied().unwrap_or(0.0),
        })
        .collect()
}
