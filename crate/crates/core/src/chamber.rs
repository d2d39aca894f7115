//! One batch in the heat-treatment chamber: loading, the curing stopping
//! problem (maturation plus post-maturation rework), the humidity stopping
//! problem (drying plus post-drying rework), and unloading.
//!
//! Energy per stopping problem is the main-step cumulative input plus, for
//! every rework cycle, a fixed re-warm-up and a fixed rework input.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curvekit::{build_cumulative, CumulativeCurve, CurveError, EnergyCurve, StepLabel};
use crate::randkit::{LogNormalMeanCV, RandError, RngStream};
use crate::stoppol::{
    fixed_iterations, ideal_iterations, sba_drive, PolicyError, PolicySpec, SbaConfig,
};

/// Fixed re-warm-up duration after opening the chamber.
pub const REWARM_MINUTES: f64 = 60.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChamberError {
    #[error("program {0}: {1}")]
    Program(ProgramId, String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Curve(#[from] CurveError),
    #[error(transparent)]
    Rand(#[from] RandError),
    #[error("rework factor {0} must be positive")]
    ReworkFactor(f64),
    #[error("minimum-energy draw {0} must be positive")]
    Requirement(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProgramId {
    Negative,
    Positive,
    PositiveVap,
    StartStop,
}

impl ProgramId {
    pub const ALL: [ProgramId; 4] = [
        ProgramId::Negative,
        ProgramId::Positive,
        ProgramId::PositiveVap,
        ProgramId::StartStop,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ProgramId::Negative => "Negative",
            ProgramId::Positive => "Positive",
            ProgramId::PositiveVap => "PositiveVap",
            ProgramId::StartStop => "StartStop",
        }
    }
}

impl fmt::Display for ProgramId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProgramId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ProgramId::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown program `{s}`"))
    }
}

/// The two stopping problems of a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Problem {
    Curing,
    Humidity,
}

impl Problem {
    pub const BOTH: [Problem; 2] = [Problem::Curing, Problem::Humidity];

    pub fn main_step(&self) -> StepLabel {
        match self {
            Problem::Curing => StepLabel::Maturation,
            Problem::Humidity => StepLabel::Drying,
        }
    }
}

impl fmt::Display for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Problem::Curing => f.write_str("curing"),
            Problem::Humidity => f.write_str("humidity"),
        }
    }
}

/// A heat-treatment program with its curves discretised at `tau`.
#[derive(Clone, Debug)]
pub struct HeatTreatmentProgram {
    id: ProgramId,
    maturation_curve: EnergyCurve,
    drying_curve: EnergyCurve,
    maturation: CumulativeCurve,
    drying: CumulativeCurve,
    expected_min_energy_curing: f64,
    expected_min_energy_humidity: f64,
    rewarm_energy: f64,
    rewarm_time: f64,
}

impl HeatTreatmentProgram {
    /// `rewarm_energy` defaults to the first hour of the drying curve.
    pub fn new(
        id: ProgramId,
        maturation_curve: EnergyCurve,
        drying_curve: EnergyCurve,
        expected_min_energy_curing: f64,
        expected_min_energy_humidity: f64,
        rewarm_energy: Option<f64>,
        tau: f64,
    ) -> Result<Self, ChamberError> {
        let bad = |m: String| Err(ChamberError::Program(id, m));
        for (name, e) in [
            ("curing", expected_min_energy_curing),
            ("humidity", expected_min_energy_humidity),
        ] {
            if !(e.is_finite() && e > 0.0) {
                return bad(format!("expected {name} energy {e} must be positive"));
            }
        }
        let rewarm_energy =
            rewarm_energy.unwrap_or_else(|| drying_curve.energy_until(REWARM_MINUTES));
        if !(rewarm_energy.is_finite() && rewarm_energy > 0.0) {
            return bad(format!("re-warm energy {rewarm_energy} must be positive"));
        }
        let maturation = build_cumulative(&maturation_curve, tau)?;
        let drying = build_cumulative(&drying_curve, tau)?;
        Ok(Self {
            id,
            maturation_curve,
            drying_curve,
            maturation,
            drying,
            expected_min_energy_curing,
            expected_min_energy_humidity,
            rewarm_energy,
            rewarm_time: REWARM_MINUTES,
        })
    }

    pub fn id(&self) -> ProgramId {
        self.id
    }

    pub fn tau(&self) -> f64 {
        self.maturation.tau()
    }

    pub fn curve(&self, problem: Problem) -> &EnergyCurve {
        match problem {
            Problem::Curing => &self.maturation_curve,
            Problem::Humidity => &self.drying_curve,
        }
    }

    pub fn cumulative(&self, problem: Problem) -> &CumulativeCurve {
        match problem {
            Problem::Curing => &self.maturation,
            Problem::Humidity => &self.drying,
        }
    }

    pub fn expected_min_energy(&self, problem: Problem) -> f64 {
        match problem {
            Problem::Curing => self.expected_min_energy_curing,
            Problem::Humidity => self.expected_min_energy_humidity,
        }
    }

    pub fn rewarm_energy(&self) -> f64 {
        self.rewarm_energy
    }

    pub fn rewarm_time(&self) -> f64 {
        self.rewarm_time
    }

    /// Energy of one rework cycle's processing (without re-warm-up).
    pub fn rework_energy(&self, problem: Problem, rework_factor: f64) -> f64 {
        rework_factor * self.expected_min_energy(problem)
    }
}

/// Main-step policy plus the rework energy factor, applied to both problems.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchPolicy {
    pub policy: PolicySpec,
    pub rework_factor: f64,
}

impl BatchPolicy {
    pub fn validate(&self) -> Result<(), ChamberError> {
        self.policy.validate()?;
        if !(self.rework_factor.is_finite() && self.rework_factor > 0.0) {
            return Err(ChamberError::ReworkFactor(self.rework_factor));
        }
        Ok(())
    }
}

/// Outcome of one stopping problem.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepResult {
    pub stopping_iteration: usize,
    /// Minutes of main-step processing, `(N + 1) * tau`.
    pub applied_time: f64,
    pub main_energy: f64,
    pub rework_cycles: u32,
    pub rework_energy_total: f64,
    pub rewarm_energy_total: f64,
    /// Minutes spent in re-warm-up and rework cycles.
    pub rework_time_total: f64,
    pub inspections: u32,
    pub hidden_min_energy: f64,
    /// Final posterior estimate, for the sensor-driven policy only.
    pub terminal_estimate: Option<f64>,
}

impl StepResult {
    pub fn total_energy(&self) -> f64 {
        self.main_energy + self.rewarm_energy_total + self.rework_energy_total
    }

    /// Energy counted against the requirement (re-warm-up excluded).
    pub fn constraint_energy(&self) -> f64 {
        self.main_energy + self.rework_energy_total
    }
}

/// Fewest rework cycles of `rework_energy` each that lift `main` to `phi`.
pub fn rework_cycles(main: f64, phi: f64, rework_energy: f64) -> u32 {
    if main >= phi {
        return 0;
    }
    let mut j = ((phi - main) / rework_energy).ceil().max(1.0) as u32;
    while main + f64::from(j) * rework_energy < phi {
        j += 1;
    }
    while j > 1 && main + f64::from(j - 1) * rework_energy >= phi {
        j -= 1;
    }
    j
}

#[allow(clippy::too_many_arguments)]
pub fn run_stopping_problem(
    program: &HeatTreatmentProgram,
    problem: Problem,
    policy: &BatchPolicy,
    phi_draw: f64,
    cv_min_energy: f64,
    sigma_estimate: f64,
    rng: &mut RngStream,
) -> Result<StepResult, ChamberError> {
    if !(phi_draw.is_finite() && phi_draw > 0.0) {
        return Err(ChamberError::Requirement(phi_draw));
    }
    if !(policy.rework_factor.is_finite() && policy.rework_factor > 0.0) {
        return Err(ChamberError::ReworkFactor(policy.rework_factor));
    }
    let curve = program.cumulative(problem);
    let expected = program.expected_min_energy(problem);
    let (n, terminal_estimate) = match policy.policy {
        PolicySpec::Sba(params) => {
            let cfg = SbaConfig::new(params, curve.tau(), sigma_estimate, expected, cv_min_energy)?;
            let stop = sba_drive(&cfg, curve, phi_draw, rng, |_| {})?;
            (stop.stopping_iteration, Some(stop.terminal_estimate))
        }
        PolicySpec::Ideal => (ideal_iterations(curve, phi_draw)?, None),
        fixed => {
            let factor = fixed.main_factor().expect("fixed-time policy");
            (fixed_iterations(curve, factor, expected)?, None)
        }
    };
    let main_energy = curve.cumulative_at(n);
    let applied_time = (n + 1) as f64 * curve.tau();
    let psi_g = program.rework_energy(problem, policy.rework_factor);
    let j = rework_cycles(main_energy, phi_draw, psi_g);
    let mut rate = program.curve(problem).rate_at(applied_time);
    if rate <= 0.0 {
        rate = main_energy * 60.0 / applied_time;
    }
    let cycle_minutes = program.rewarm_time() + if rate > 0.0 { psi_g * 60.0 / rate } else { 0.0 };
    let inspections = match problem {
        Problem::Curing => 1 + j,
        Problem::Humidity => j,
    };
    Ok(StepResult {
        stopping_iteration: n,
        applied_time,
        main_energy,
        rework_cycles: j,
        rework_energy_total: f64::from(j) * psi_g,
        rewarm_energy_total: f64::from(j) * program.rewarm_energy(),
        rework_time_total: f64::from(j) * cycle_minutes,
        inspections,
        hidden_min_energy: phi_draw,
        terminal_estimate,
    })
}

/// Stochastic inputs shared by all batches of a run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchEnvironment {
    pub cv_min_energy: f64,
    pub loading_per_pallet: LogNormalMeanCV,
    pub unloading_per_pallet: LogNormalMeanCV,
}

/// Per-batch simulation output.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchRecord {
    pub order_id: u64,
    pub batch_id: u64,
    /// Position of the batch within its order.
    pub batch_index: u32,
    pub program_id: ProgramId,
    pub pallets: u32,
    pub curing: StepResult,
    pub humidity: StepResult,
    pub loading_time: f64,
    pub unloading_time: f64,
    pub total_reported_energy: f64,
    pub inspection_count: u32,
    pub started_at: f64,
    pub completed_at: f64,
    pub in_warmup: bool,
}

impl BatchRecord {
    pub fn needed_rework(&self) -> bool {
        self.curing.rework_cycles + self.humidity.rework_cycles > 0
    }

    pub fn step(&self, problem: Problem) -> &StepResult {
        match problem {
            Problem::Curing => &self.curing,
            Problem::Humidity => &self.humidity,
        }
    }

    pub fn duration(&self) -> f64 {
        self.completed_at - self.started_at
    }
}

/// Identity and timing of a batch entering the chamber.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchSlot {
    pub order_id: u64,
    pub batch_id: u64,
    pub batch_index: u32,
    pub pallets: u32,
    pub started_at: f64,
    pub warmup_end: f64,
}

/// Runs a full batch. Environment draws come from `env` in a fixed order
/// (loading, curing requirement, humidity requirement, unloading) so they
/// line up across policies; sensor noise comes from `sensor`.
pub fn run_batch(
    program: &HeatTreatmentProgram,
    policy: &BatchPolicy,
    environment: &BatchEnvironment,
    sigma: (f64, f64),
    slot: BatchSlot,
    env: &mut RngStream,
    sensor: &mut RngStream,
) -> Result<BatchRecord, ChamberError> {
    let loading_time: f64 = (0..slot.pallets)
        .map(|_| environment.loading_per_pallet.sample(env))
        .sum();
    let cv = environment.cv_min_energy;
    let phi_curing =
        LogNormalMeanCV::new(program.expected_min_energy(Problem::Curing), cv)?.sample(env);
    let phi_humidity =
        LogNormalMeanCV::new(program.expected_min_energy(Problem::Humidity), cv)?.sample(env);
    let unloading_time: f64 = (0..slot.pallets)
        .map(|_| environment.unloading_per_pallet.sample(env))
        .sum();

    let curing = run_stopping_problem(
        program,
        Problem::Curing,
        policy,
        phi_curing,
        cv,
        sigma.0,
        sensor,
    )?;
    let humidity = run_stopping_problem(
        program,
        Problem::Humidity,
        policy,
        phi_humidity,
        cv,
        sigma.1,
        sensor,
    )?;
    let duration = loading_time
        + curing.applied_time
        + curing.rework_time_total
        + humidity.applied_time
        + humidity.rework_time_total
        + unloading_time;
    let completed_at = slot.started_at + duration;
    Ok(BatchRecord {
        order_id: slot.order_id,
        batch_id: slot.batch_id,
        batch_index: slot.batch_index,
        program_id: program.id(),
        pallets: slot.pallets,
        total_reported_energy: curing.total_energy() + humidity.total_energy(),
        inspection_count: 1 + curing.rework_cycles + humidity.rework_cycles,
        curing,
        humidity,
        loading_time,
        unloading_time,
        started_at: slot.started_at,
        completed_at,
        in_warmup: completed_at < slot.warmup_end,
    })
}
