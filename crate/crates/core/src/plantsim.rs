//! Order flow through a single chamber: order generation, lot splitting,
//! strict FIFO processing over a multi-year horizon with a warm-up period.
//!
//! Random draws are split over two environment streams (orders, batch
//! environment) and the run's own stream (sensor noise). Orders and batch
//! environments therefore line up across policies that share a seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chamber::{
    run_batch, BatchEnvironment, BatchPolicy, BatchRecord, BatchSlot, ChamberError,
    HeatTreatmentProgram, Problem, ProgramId,
};
use crate::curvekit::{CurveError, EnergyCurve, StepLabel};
use crate::randkit::{LogNormalMeanCV, RandError, RngStream, ENVIRONMENT_STREAM};
use crate::stoppol::{PolicySpec, SbaConfig};

pub const MINUTES_PER_DAY: f64 = 1440.0;

const ORDER_STREAM: u64 = ENVIRONMENT_STREAM;
const BATCH_ENV_STREAM: u64 = ENVIRONMENT_STREAM - 1;

const BUNDLED_SCENARIO: &str = include_str!("../data/scenario.toml");
const BUNDLED_CURVES: [(&str, &str); 8] = [
    (
        "curves/negative_maturation.csv",
        include_str!("../data/curves/negative_maturation.csv"),
    ),
    (
        "curves/negative_drying.csv",
        include_str!("../data/curves/negative_drying.csv"),
    ),
    (
        "curves/positive_maturation.csv",
        include_str!("../data/curves/positive_maturation.csv"),
    ),
    (
        "curves/positive_drying.csv",
        include_str!("../data/curves/positive_drying.csv"),
    ),
    (
        "curves/positive_vap_maturation.csv",
        include_str!("../data/curves/positive_vap_maturation.csv"),
    ),
    (
        "curves/positive_vap_drying.csv",
        include_str!("../data/curves/positive_vap_drying.csv"),
    ),
    (
        "curves/start_stop_maturation.csv",
        include_str!("../data/curves/start_stop_maturation.csv"),
    ),
    (
        "curves/start_stop_drying.csv",
        include_str!("../data/curves/start_stop_drying.csv"),
    ),
];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("curve `{path}`: {source}")]
    Curve { path: String, source: CurveError },
    #[error(transparent)]
    Chamber(#[from] ChamberError),
    #[error(transparent)]
    Rand(#[from] RandError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanCv {
    pub mean: f64,
    pub cv: f64,
}

impl MeanCv {
    pub fn distribution(&self) -> Result<LogNormalMeanCV, RandError> {
        LogNormalMeanCV::new(self.mean, self.cv)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProgramConfig {
    pub id: ProgramId,
    pub maturation_curve: String,
    pub drying_curve: String,
    pub expected_min_energy_curing: f64,
    pub expected_min_energy_humidity: f64,
    /// Defaults to the first hour of the drying curve.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewarm_energy_kwh: Option<f64>,
    /// Overrides the scenario-wide CV of the minimum-energy requirement.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cv_min_energy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlateType {
    pub id: u32,
    pub probability: f64,
    pub lot_mean: f64,
    pub lot_cv: f64,
    pub program: ProgramId,
}

fn default_working_days() -> f64 {
    260.0
}

/// Scenario file contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub tau_minutes: f64,
    pub horizon_years: f64,
    pub warmup_years: f64,
    #[serde(default = "default_working_days")]
    pub working_days_per_year: f64,
    pub chamber_capacity: u32,
    pub cv_min_energy: f64,
    pub interarrival_days: MeanCv,
    pub predelay_days: MeanCv,
    pub loading_minutes_per_pallet: MeanCv,
    pub unloading_minutes_per_pallet: MeanCv,
    pub programs: Vec<ProgramConfig>,
    pub plate_types: Vec<PlateType>,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))
    }

    /// Checks everything that does not need the curve files.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.tau_minutes) {
            return bad(format!("tau_minutes {} must be positive", self.tau_minutes));
        }
        if !positive(self.horizon_years) {
            return bad(format!(
                "horizon_years {} must be positive",
                self.horizon_years
            ));
        }
        if !(self.warmup_years >= 0.0 && self.warmup_years < self.horizon_years) {
            return bad(format!(
                "warmup_years {} must lie in [0, horizon_years)",
                self.warmup_years
            ));
        }
        if !positive(self.working_days_per_year) {
            return bad("working_days_per_year must be positive".into());
        }
        if self.chamber_capacity == 0 {
            return bad("chamber_capacity must be positive".into());
        }
        if !(self.cv_min_energy.is_finite() && self.cv_min_energy >= 0.0) {
            return bad(format!(
                "cv_min_energy {} must be non-negative",
                self.cv_min_energy
            ));
        }
        for (name, d) in [
            ("interarrival_days", self.interarrival_days),
            ("predelay_days", self.predelay_days),
            (
                "loading_minutes_per_pallet",
                self.loading_minutes_per_pallet,
            ),
            (
                "unloading_minutes_per_pallet",
                self.unloading_minutes_per_pallet,
            ),
        ] {
            if let Err(e) = d.distribution() {
                return bad(format!("{name}: {e}"));
            }
        }
        let mut seen = BTreeMap::new();
        for p in &self.programs {
            if seen.insert(p.id, ()).is_some() {
                return bad(format!("program {} listed twice", p.id));
            }
            if let Some(cv) = p.cv_min_energy {
                if !(cv.is_finite() && cv >= 0.0) {
                    return bad(format!(
                        "program {}: cv_min_energy {cv} must be non-negative",
                        p.id
                    ));
                }
            }
        }
        if self.plate_types.is_empty() {
            return bad("no plate types".into());
        }
        let mut ids = BTreeMap::new();
        let mut total = 0.0;
        for t in &self.plate_types {
            if ids.insert(t.id, ()).is_some() {
                return bad(format!("plate type {} listed twice", t.id));
            }
            if !(0.0..=1.0).contains(&t.probability) {
                return bad(format!(
                    "plate type {}: probability {} outside [0, 1]",
                    t.id, t.probability
                ));
            }
            if !positive(t.lot_mean) || !(t.lot_cv.is_finite() && t.lot_cv >= 0.0) {
                return bad(format!("plate type {}: bad lot size distribution", t.id));
            }
            if !seen.contains_key(&t.program) {
                return bad(format!(
                    "plate type {}: program {} not defined",
                    t.id, t.program
                ));
            }
            total += t.probability;
        }
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("plate type probabilities sum to {total}, not 1"));
        }
        Ok(())
    }
}

/// A validated scenario with its curves loaded and discretised.
#[derive(Clone, Debug)]
pub struct Scenario {
    config: ScenarioConfig,
    programs: Arc<BTreeMap<ProgramId, HeatTreatmentProgram>>,
    digest: String,
}

impl Scenario {
    /// Builds a scenario, fetching curve files through `read_curve`.
    pub fn from_toml<F>(text: &str, mut read_curve: F) -> Result<Self, ScenarioError>
    where
        F: FnMut(&str) -> Result<String, ScenarioError>,
    {
        let config = ScenarioConfig::from_toml(text)?;
        config.validate()?;
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        let mut programs = BTreeMap::new();
        for p in &config.programs {
            let mut curve = |path: &str, step| -> Result<EnergyCurve, ScenarioError> {
                let body = read_curve(path)?;
                hasher.update(path.as_bytes());
                hasher.update(body.as_bytes());
                EnergyCurve::parse_csv(p.id.as_str(), step, &body).map_err(|source| {
                    ScenarioError::Curve {
                        path: path.to_string(),
                        source,
                    }
                })
            };
            let maturation = curve(&p.maturation_curve, StepLabel::Maturation)?;
            let drying = curve(&p.drying_curve, StepLabel::Drying)?;
            let program = HeatTreatmentProgram::new(
                p.id,
                maturation,
                drying,
                p.expected_min_energy_curing,
                p.expected_min_energy_humidity,
                p.rewarm_energy_kwh,
                config.tau_minutes,
            )?;
            programs.insert(p.id, program);
        }
        Ok(Self {
            config,
            programs: Arc::new(programs),
            digest: hex::encode(hasher.finalize()),
        })
    }

    /// Loads a scenario file; curve paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let io = |p: &Path, e: std::io::Error| ScenarioError::Io {
            path: p.to_path_buf(),
            message: e.to_string(),
        };
        let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, |rel| {
            let p = base.join(rel);
            std::fs::read_to_string(&p).map_err(|e| io(&p, e))
        })
    }

    /// The scenario shipped with the crate.
    pub fn bundled() -> Self {
        Self::from_toml(BUNDLED_SCENARIO, |rel| {
            BUNDLED_CURVES
                .iter()
                .find(|(name, _)| *name == rel)
                .map(|(_, body)| body.to_string())
                .ok_or_else(|| ScenarioError::Invalid(format!("no bundled curve `{rel}`")))
        })
        .expect("bundled scenario is valid")
    }

    pub fn bundled_toml() -> &'static str {
        BUNDLED_SCENARIO
    }

    /// Every program uses `cv` for its minimum-energy requirement.
    pub fn with_cv(&self, cv: f64) -> Result<Self, ScenarioError> {
        let mut out = self.clone();
        out.config.cv_min_energy = cv;
        for p in &mut out.config.programs {
            p.cv_min_energy = None;
        }
        out.config.validate()?;
        out.rehash();
        Ok(out)
    }

    pub fn with_horizon(
        &self,
        horizon_years: f64,
        warmup_years: f64,
    ) -> Result<Self, ScenarioError> {
        let mut out = self.clone();
        out.config.horizon_years = horizon_years;
        out.config.warmup_years = warmup_years;
        out.config.validate()?;
        out.rehash();
        Ok(out)
    }

    /// Same scenario with a different plate-type mix.
    pub fn with_plate_types(&self, plate_types: Vec<PlateType>) -> Result<Self, ScenarioError> {
        let mut out = self.clone();
        out.config.plate_types = plate_types;
        out.config.validate()?;
        out.rehash();
        Ok(out)
    }

    /// Folds the edited configuration into the digest of the original files.
    fn rehash(&mut self) {
        let mut hasher = Sha256::new();
        hasher.update(self.digest.as_bytes());
        hasher.update(
            toml::to_string(&self.config)
                .expect("config serialises")
                .as_bytes(),
        );
        self.digest = hex::encode(hasher.finalize());
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    /// Hex SHA-256 over the scenario text and its curve files.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn program(&self, id: ProgramId) -> &HeatTreatmentProgram {
        &self.programs[&id]
    }

    pub fn programs(&self) -> impl Iterator<Item = &HeatTreatmentProgram> {
        self.programs.values()
    }

    pub fn cv_for(&self, id: ProgramId) -> f64 {
        self.config
            .programs
            .iter()
            .find(|p| p.id == id)
            .and_then(|p| p.cv_min_energy)
            .unwrap_or(self.config.cv_min_energy)
    }

    pub fn minutes_per_year(&self) -> f64 {
        self.config.working_days_per_year * MINUTES_PER_DAY
    }

    pub fn horizon_minutes(&self) -> f64 {
        self.config.horizon_years * self.minutes_per_year()
    }

    pub fn warmup_minutes(&self) -> f64 {
        self.config.warmup_years * self.minutes_per_year()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProductionOrder {
    pub order_id: u64,
    pub type_id: u32,
    pub program: ProgramId,
    pub lot_size: u32,
    pub arrival_time: f64,
    /// Arrival plus the pre-production delay.
    pub release_time: f64,
}

/// Orders arriving before `horizon` minutes. Each order consumes exactly four
/// draws (inter-arrival, type, lot size, delay).
pub fn generate_orders(
    config: &ScenarioConfig,
    rng: &mut RngStream,
    horizon: f64,
) -> Result<Vec<ProductionOrder>, RandError> {
    let interarrival = config.interarrival_days.distribution()?;
    let predelay = config.predelay_days.distribution()?;
    let lots = config
        .plate_types
        .iter()
        .map(|t| LogNormalMeanCV::new(t.lot_mean, t.lot_cv))
        .collect::<Result<Vec<_>, _>>()?;
    let mut cumulative = Vec::with_capacity(config.plate_types.len());
    let mut acc = 0.0;
    for t in &config.plate_types {
        acc += t.probability;
        cumulative.push(acc);
    }
    let mut orders = Vec::new();
    let mut t = 0.0;
    loop {
        t += interarrival.sample(rng) * MINUTES_PER_DAY;
        let u = rng.uniform() * acc;
        let idx = cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(cumulative.len() - 1);
        let lot = lots[idx].sample(rng).round().max(1.0) as u32;
        let delay = predelay.sample(rng) * MINUTES_PER_DAY;
        if t >= horizon {
            break;
        }
        let kind = &config.plate_types[idx];
        orders.push(ProductionOrder {
            order_id: orders.len() as u64,
            type_id: kind.id,
            program: kind.program,
            lot_size: lot,
            arrival_time: t,
            release_time: t + delay,
        });
    }
    Ok(orders)
}

/// Pallet counts of the sequential batches of one lot.
pub fn split_into_batches(lot_size: u32, capacity: u32) -> Vec<u32> {
    assert!(capacity > 0, "chamber capacity must be positive");
    let mut out = vec![capacity; (lot_size / capacity) as usize];
    if !lot_size.is_multiple_of(capacity) {
        out.push(lot_size % capacity);
    }
    out
}

/// Threshold spread used by the sensor-driven policy for one problem.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SigmaEstimate {
    pub program: ProgramId,
    pub problem: Problem,
    pub value: f64,
    pub samples: usize,
    pub from_warmup: bool,
}

/// Sample standard deviation of terminal estimates over warm-up records of
/// one program and problem; falls back to `seed` below two records.
pub fn sigma_from_warmup(
    records: &[BatchRecord],
    program: ProgramId,
    problem: Problem,
    seed: f64,
) -> SigmaEstimate {
    let values: Vec<f64> = records
        .iter()
        .filter(|r| r.in_warmup && r.program_id == program)
        .filter_map(|r| r.step(problem).terminal_estimate)
        .collect();
    let n = values.len();
    if n < 2 {
        warn!("{program}/{problem}: {n} warm-up estimates, keeping seed sigma {seed:.2}");
        return SigmaEstimate {
            program,
            problem,
            value: seed,
            samples: n,
            from_warmup: false,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    SigmaEstimate {
        program,
        problem,
        value: (ss / (n - 1) as f64).sqrt(),
        samples: n,
        from_warmup: true,
    }
}

/// Everything one simulation run produced.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulationRun {
    pub records: Vec<BatchRecord>,
    pub orders: Vec<ProductionOrder>,
    pub horizon_minutes: f64,
    pub warmup_minutes: f64,
    /// Chamber occupation clipped to the horizon.
    pub busy_minutes: f64,
    /// Frozen post-warm-up spreads (sensor-driven policy only).
    pub sigma: Vec<SigmaEstimate>,
}

impl SimulationRun {
    pub fn utilization(&self) -> f64 {
        self.busy_minutes / self.horizon_minutes
    }

    pub fn post_warmup(&self) -> impl Iterator<Item = &BatchRecord> {
        self.records.iter().filter(|r| !r.in_warmup)
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Chamber(#[from] ChamberError),
    #[error(transparent)]
    Rand(#[from] RandError),
    #[error("policy: {0}")]
    Policy(String),
}

/// Runs one replication. Batches start in order of arrival (and batch index
/// within an order) as soon as the chamber is free and the order released.
/// Batches that would complete after the horizon are not recorded.
pub fn simulate(
    scenario: &Scenario,
    policy: &BatchPolicy,
    stream: &RngStream,
) -> Result<SimulationRun, SimError> {
    policy.validate()?;
    let cfg = scenario.config();
    let horizon = scenario.horizon_minutes();
    let warmup_end = scenario.warmup_minutes();
    let mut order_rng = stream.sibling(ORDER_STREAM);
    let mut env_rng = stream.sibling(BATCH_ENV_STREAM);
    let mut sensor = stream.clone();
    let orders = generate_orders(cfg, &mut order_rng, horizon)?;

    let loading = cfg.loading_minutes_per_pallet.distribution()?;
    let unloading = cfg.unloading_minutes_per_pallet.distribution()?;
    let is_sba = matches!(policy.policy, PolicySpec::Sba(_));
    let seed_sigma = |id: ProgramId, problem: Problem| {
        SbaConfig::seed_sigma(
            scenario.program(id).expected_min_energy(problem),
            scenario.cv_for(id),
        )
    };
    let mut frozen: Option<BTreeMap<ProgramId, (f64, f64)>> = None;
    let mut sigma_log = Vec::new();

    let mut records = Vec::new();
    let mut clock = 0.0_f64;
    let mut busy = 0.0;
    let mut batch_id = 0u64;
    'orders: for order in &orders {
        let program = scenario.program(order.program);
        let environment = BatchEnvironment {
            cv_min_energy: scenario.cv_for(order.program),
            loading_per_pallet: loading,
            unloading_per_pallet: unloading,
        };
        for (index, pallets) in split_into_batches(order.lot_size, cfg.chamber_capacity)
            .into_iter()
            .enumerate()
        {
            let start = clock.max(order.release_time);
            if start >= horizon {
                break 'orders;
            }
            if is_sba && frozen.is_none() && start >= warmup_end {
                let mut map = BTreeMap::new();
                for id in ProgramId::ALL
                    .into_iter()
                    .filter(|id| scenario.programs.contains_key(id))
                {
                    let c = sigma_from_warmup(
                        &records,
                        id,
                        Problem::Curing,
                        seed_sigma(id, Problem::Curing),
                    );
                    let h = sigma_from_warmup(
                        &records,
                        id,
                        Problem::Humidity,
                        seed_sigma(id, Problem::Humidity),
                    );
                    map.insert(id, (c.value, h.value));
                    sigma_log.extend([c, h]);
                }
                frozen = Some(map);
            }
            let sigma = match &frozen {
                Some(map) => map[&order.program],
                None => (
                    seed_sigma(order.program, Problem::Curing),
                    seed_sigma(order.program, Problem::Humidity),
                ),
            };
            let slot = BatchSlot {
                order_id: order.order_id,
                batch_id,
                batch_index: index as u32,
                pallets,
                started_at: start,
                warmup_end,
            };
            batch_id += 1;
            let record = run_batch(
                program,
                policy,
                &environment,
                sigma,
                slot,
                &mut env_rng,
                &mut sensor,
            )?;
            busy += record.completed_at.min(horizon) - start;
            clock = record.completed_at;
            if record.completed_at > horizon {
                break 'orders;
            }
            records.push(record);
        }
    }
    Ok(SimulationRun {
        records,
        orders,
        horizon_minutes: horizon,
        warmup_minutes: warmup_end,
        busy_minutes: busy,
        sigma: sigma_log,
    })
}

/// Batch records as a delimited table with a header row.
pub fn records_csv(records: &[BatchRecord]) -> String {
    let mut out = String::from(
        "order_id,batch_id,batch_index,program,pallets,in_warmup,started_at,completed_at,\
         curing_n,curing_phi,curing_main,curing_j,humidity_n,humidity_phi,humidity_main,\
         humidity_j,total_energy,inspections\n",
    );
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.order_id,
            r.batch_id,
            r.batch_index,
            r.program_id,
            r.pallets,
            r.in_warmup,
            r.started_at,
            r.completed_at,
            r.curing.stopping_iteration,
            r.curing.hidden_min_energy,
            r.curing.main_energy,
            r.curing.rework_cycles,
            r.humidity.stopping_iteration,
            r.humidity.hidden_min_energy,
            r.humidity.main_energy,
            r.humidity.rework_cycles,
            r.total_reported_energy,
            r.inspection_count
        ));
    }
    out
}
