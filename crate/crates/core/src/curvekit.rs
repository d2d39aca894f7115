//! Energy-input curves: piecewise-linear input rate over time, discretised
//! into cumulative energy per iteration, and inverted back to iteration
//! counts.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CurveError {
    #[error("curve needs at least 2 breakpoints, got {0}")]
    TooFewBreakpoints(usize),
    #[error("first breakpoint must be at minute 0, got {0}")]
    NonZeroStart(f64),
    #[error("breakpoint times must be strictly increasing (row {row}: {prev} then {next})")]
    Unordered { row: usize, prev: f64, next: f64 },
    #[error("input rate must be finite and non-negative (row {row}: {rate})")]
    NegativeRate { row: usize, rate: f64 },
    #[error("time step must be positive, got {0}")]
    NonPositiveTau(f64),
    #[error("target energy {0} must be finite and non-negative")]
    InvalidTarget(f64),
    #[error("target energy {target} kWh is unreachable: curve plateaus at {plateau} kWh")]
    Unreachable { target: f64, plateau: f64 },
    #[error("curve file: {0}")]
    Format(String),
}

/// Which main process step a curve drives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepLabel {
    Maturation,
    Drying,
}

impl fmt::Display for StepLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepLabel::Maturation => f.write_str("maturation"),
            StepLabel::Drying => f.write_str("drying"),
        }
    }
}

/// Input rate (kW) over time (minutes), linear between breakpoints and held
/// at the final rate beyond the last one.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyCurve {
    program_id: String,
    step: StepLabel,
    breakpoints: Vec<(f64, f64)>,
}

impl EnergyCurve {
    pub fn new(
        program_id: impl Into<String>,
        step: StepLabel,
        breakpoints: Vec<(f64, f64)>,
    ) -> Result<Self, CurveError> {
        if breakpoints.len() < 2 {
            return Err(CurveError::TooFewBreakpoints(breakpoints.len()));
        }
        if breakpoints[0].0 != 0.0 {
            return Err(CurveError::NonZeroStart(breakpoints[0].0));
        }
        for (row, &(_, rate)) in breakpoints.iter().enumerate() {
            if !(rate.is_finite() && rate >= 0.0) {
                return Err(CurveError::NegativeRate { row, rate });
            }
        }
        for (row, w) in breakpoints.windows(2).enumerate() {
            if !(w[1].0.is_finite() && w[1].0 > w[0].0) {
                return Err(CurveError::Unordered {
                    row: row + 1,
                    prev: w[0].0,
                    next: w[1].0,
                });
            }
        }
        Ok(Self {
            program_id: program_id.into(),
            step,
            breakpoints,
        })
    }

    /// Parses the `minute,kw` table format.
    pub fn parse_csv(
        program_id: impl Into<String>,
        step: StepLabel,
        text: &str,
    ) -> Result<Self, CurveError> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        match lines.next() {
            Some(h) if h.replace(' ', "").eq_ignore_ascii_case("minute,kw") => {}
            Some(h) => {
                return Err(CurveError::Format(format!(
                    "expected header `minute,kw`, got `{h}`"
                )))
            }
            None => return Err(CurveError::Format("empty curve file".into())),
        }
        let mut points = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut cols = line.split(',');
            let (Some(t), Some(r), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(CurveError::Format(format!(
                    "row {}: expected 2 columns",
                    i + 1
                )));
            };
            let parse = |s: &str| {
                f64::from_str(s.trim())
                    .map_err(|e| CurveError::Format(format!("row {}: `{}`: {e}", i + 1, s.trim())))
            };
            points.push((parse(t)?, parse(r)?));
        }
        Self::new(program_id, step, points)
    }

    pub fn load(
        path: impl AsRef<Path>,
        program_id: impl Into<String>,
        step: StepLabel,
    ) -> Result<Self, CurveError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CurveError::Format(format!("{}: {e}", path.display())))?;
        Self::parse_csv(program_id, step, &text)
    }

    pub fn program_id(&self) -> &str {
        &self.program_id
    }

    pub fn step(&self) -> StepLabel {
        self.step
    }

    pub fn breakpoints(&self) -> &[(f64, f64)] {
        &self.breakpoints
    }

    pub fn last_time(&self) -> f64 {
        self.breakpoints[self.breakpoints.len() - 1].0
    }

    pub fn final_rate(&self) -> f64 {
        self.breakpoints[self.breakpoints.len() - 1].1
    }

    /// Input rate in kW at minute `t` (t < 0 is treated as 0).
    pub fn rate_at(&self, t: f64) -> f64 {
        let bp = &self.breakpoints;
        if t >= self.last_time() {
            return self.final_rate();
        }
        if t <= 0.0 {
            return bp[0].1;
        }
        let i = bp.partition_point(|&(bt, _)| bt <= t);
        let (t0, r0) = bp[i - 1];
        let (t1, r1) = bp[i];
        r0 + (r1 - r0) * (t - t0) / (t1 - t0)
    }

    /// Energy in kWh delivered over [0, t]; trapezoidal on the breakpoints,
    /// which is exact for the piecewise-linear rate.
    pub fn energy_until(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let mut kwh = 0.0;
        for w in self.breakpoints.windows(2) {
            let (t0, r0) = w[0];
            let (t1, r1) = w[1];
            if t <= t0 {
                return kwh;
            }
            let end = t.min(t1);
            let r_end = r0 + (r1 - r0) * (end - t0) / (t1 - t0);
            kwh += 0.5 * (r0 + r_end) * (end - t0) / 60.0;
            if t <= t1 {
                return kwh;
            }
        }
        kwh + self.final_rate() * (t - self.last_time()) / 60.0
    }
}

/// Cumulative energy per iteration of length `tau`.
///
/// `cum_energy[k]` is the energy delivered by the end of iteration `k`,
/// i.e. at physical time `(k + 1) * tau`. Beyond the measured range each
/// further iteration adds `extrapolation_slope`.
#[derive(Clone, Debug, PartialEq)]
pub struct CumulativeCurve {
    tau: f64,
    cum_energy: Vec<f64>,
    extrapolation_slope: f64,
    final_rate: f64,
}

pub fn build_cumulative(curve: &EnergyCurve, tau: f64) -> Result<CumulativeCurve, CurveError> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(CurveError::NonPositiveTau(tau));
    }
    // first iteration that ends at or after the last breakpoint
    let last = ((curve.last_time() / tau).ceil() as usize).max(1) - 1;
    let mut cum_energy = Vec::with_capacity(last + 1);
    let mut prev = 0.0_f64;
    for k in 0..=last {
        // max() guards the non-decreasing invariant against rounding
        let e = curve.energy_until((k + 1) as f64 * tau).max(prev);
        cum_energy.push(e);
        prev = e;
    }
    Ok(CumulativeCurve {
        tau,
        cum_energy,
        extrapolation_slope: curve.final_rate() * tau / 60.0,
        final_rate: curve.final_rate(),
    })
}

impl CumulativeCurve {
    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn measured(&self) -> &[f64] {
        &self.cum_energy
    }

    pub fn last_measured_index(&self) -> usize {
        self.cum_energy.len() - 1
    }

    pub fn extrapolation_slope(&self) -> f64 {
        self.extrapolation_slope
    }

    pub fn cumulative_at(&self, k: usize) -> f64 {
        let m = self.last_measured_index();
        if k <= m {
            self.cum_energy[k]
        } else {
            self.cum_energy[m] + (k - m) as f64 * self.extrapolation_slope
        }
    }

    /// Energy delivered during iteration `k` alone.
    pub fn iteration_energy(&self, k: usize) -> f64 {
        if k == 0 {
            self.cumulative_at(0)
        } else {
            self.cumulative_at(k) - self.cumulative_at(k - 1)
        }
    }

    /// Mean input rate (kW) of iteration `k`.
    pub fn rate_in_iteration(&self, k: usize) -> f64 {
        if k > self.last_measured_index() {
            self.final_rate
        } else {
            self.iteration_energy(k) * 60.0 / self.tau
        }
    }

    /// Smallest `k` with `cumulative_at(k) >= target`.
    pub fn invert(&self, target: f64) -> Result<usize, CurveError> {
        if !(target.is_finite() && target >= 0.0) {
            return Err(CurveError::InvalidTarget(target));
        }
        let m = self.last_measured_index();
        let top = self.cum_energy[m];
        if target <= top {
            return Ok(self.cum_energy.partition_point(|&e| e < target));
        }
        if self.extrapolation_slope <= 0.0 {
            return Err(CurveError::Unreachable {
                target,
                plateau: top,
            });
        }
        let mut k = m + ((target - top) / self.extrapolation_slope).ceil().max(1.0) as usize;
        // settle float rounding in either direction
        while self.cumulative_at(k) < target {
            k += 1;
        }
        while k > m + 1 && self.cumulative_at(k - 1) >= target {
            k -= 1;
        }
        Ok(k)
    }
}
