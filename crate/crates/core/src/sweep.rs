//! Full-factorial experiment grids and their resumable, parallel execution.
//!
//! Every (design point, replication) pair runs with `seed_for(point_id,
//! replication)` and lands in its own file under `runs/`, written to a
//! temporary name and renamed. Consolidation reads those files in sorted
//! order, so the final store does not depend on worker count or timing.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chamber::BatchPolicy;
use crate::metrics::{MetricsError, RunSummary};
use crate::plantsim::{records_csv, simulate, Scenario, ScenarioError, SimError, SimulationRun};
use crate::randkit::seed_for;
use crate::stoppol::{PolicySpec, SbaParams};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

const BUNDLED_DESK_GRID: &str = include_str!("../data/grids/desk.toml");

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("grid parse error: {0}")]
    Parse(String),
    #[error("invalid grid: {0}")]
    Invalid(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("output directory holds a sweep with a different {0}; use a fresh directory")]
    Mismatch(&'static str),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SweepError + '_ {
    move |e| SweepError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Factor levels: an explicit list or an inclusive `{min, max, step}` range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Levels {
    List(Vec<f64>),
    Range { min: f64, max: f64, step: f64 },
}

impl Levels {
    pub fn values(&self) -> Result<Vec<f64>, SweepError> {
        let v = match self {
            Levels::List(v) => v.clone(),
            Levels::Range { min, max, step } => {
                if !(step.is_finite() && *step > 0.0 && max >= min) {
                    return Err(SweepError::Invalid(format!(
                        "bad range {min}..{max} step {step}"
                    )));
                }
                let n = ((max - min) / step + 1e-9).floor() as usize + 1;
                (0..n)
                    .map(|i| ((min + i as f64 * step) * 1e9).round() / 1e9)
                    .collect()
            }
        };
        if v.is_empty() {
            return Err(SweepError::Invalid("empty level list".into()));
        }
        if v.iter().any(|x| !x.is_finite()) || v.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SweepError::Invalid(format!(
                "levels must be finite and strictly increasing: {v:?}"
            )));
        }
        Ok(v)
    }
}

fn range(min: f64, max: f64, step: f64) -> Levels {
    Levels::Range { min, max, step }
}

fn default_cv() -> Levels {
    Levels::List(vec![0.15, 0.30, 0.45])
}
fn default_alpha0() -> Levels {
    range(0.05, 0.50, 0.05)
}
fn default_main() -> Levels {
    range(0.70, 1.25, 0.05)
}
fn default_rework() -> Levels {
    range(0.05, 0.60, 0.05)
}
fn default_beta() -> Levels {
    range(0.40, 0.95, 0.05)
}
fn default_replications() -> u32 {
    20
}
fn default_floor() -> f64 {
    0.02
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignGrid {
    #[serde(default = "default_cv")]
    pub cv_levels: Levels,
    #[serde(default = "default_alpha0")]
    pub alpha0_levels: Levels,
    #[serde(default = "default_main")]
    pub main_factor_levels: Levels,
    #[serde(default = "default_rework")]
    pub rework_factor_levels: Levels,
    #[serde(default = "default_beta")]
    pub beta_levels: Levels,
    #[serde(default = "default_replications")]
    pub replications: u32,
    #[serde(default = "default_floor")]
    pub alpha_floor: f64,
    /// Adds one fixed-factor 1.2 point per CV and rework factor.
    #[serde(default)]
    pub include_baseline: bool,
    /// Adds one perfect-knowledge point per CV.
    #[serde(default)]
    pub include_ideal: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon_years: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_years: Option<f64>,
}

impl Default for DesignGrid {
    fn default() -> Self {
        Self {
            cv_levels: default_cv(),
            alpha0_levels: default_alpha0(),
            main_factor_levels: default_main(),
            rework_factor_levels: default_rework(),
            beta_levels: default_beta(),
            replications: default_replications(),
            alpha_floor: default_floor(),
            include_baseline: false,
            include_ideal: false,
            horizon_years: None,
            warmup_years: None,
        }
    }
}

impl DesignGrid {
    pub fn from_toml(text: &str) -> Result<Self, SweepError> {
        let grid: Self = toml::from_str(text).map_err(|e| SweepError::Parse(e.to_string()))?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SweepError> {
        let path = path.as_ref();
        Self::from_toml(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    /// Reduced grid over a shorter horizon for quick studies.
    pub fn desk() -> Self {
        Self::from_toml(BUNDLED_DESK_GRID).expect("bundled desk grid is valid")
    }

    pub fn validate(&self) -> Result<(), SweepError> {
        for l in [
            &self.cv_levels,
            &self.alpha0_levels,
            &self.main_factor_levels,
            &self.rework_factor_levels,
            &self.beta_levels,
        ] {
            l.values()?;
        }
        if self.replications == 0 {
            return Err(SweepError::Invalid(
                "replications must be at least 1".into(),
            ));
        }
        if !(self.alpha_floor >= 0.0 && self.alpha_floor.is_finite()) {
            return Err(SweepError::Invalid(
                "alpha_floor must be non-negative".into(),
            ));
        }
        for p in enumerate(self)? {
            p.batch_policy()
                .validate()
                .map_err(|e| SweepError::Invalid(format!("point {}: {e}", p.point_id)))?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("grid serialises")
    }

    /// Hex SHA-256 of the canonical serialisation.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Scenario for one CV level, with this grid's horizon override.
    pub fn scenario_for(&self, base: &Scenario, cv: f64) -> Result<Scenario, ScenarioError> {
        let s = base.with_cv(cv)?;
        match (self.horizon_years, self.warmup_years) {
            (None, None) => Ok(s),
            (h, w) => s.with_horizon(
                h.unwrap_or(s.config().horizon_years),
                w.unwrap_or(s.config().warmup_years),
            ),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignPoint {
    pub point_id: u64,
    pub policy: PolicySpec,
    pub cv: f64,
    pub rework_factor: f64,
}

impl DesignPoint {
    pub fn batch_policy(&self) -> BatchPolicy {
        BatchPolicy {
            policy: self.policy,
            rework_factor: self.rework_factor,
        }
    }

    pub fn alpha0(&self) -> Option<f64> {
        match self.policy {
            PolicySpec::Sba(p) => Some(p.alpha0),
            _ => None,
        }
    }

    pub fn beta(&self) -> Option<f64> {
        match self.policy {
            PolicySpec::Sba(p) => Some(p.beta),
            _ => None,
        }
    }
}

/// Fixed-factor points first, then sensor-driven points, then the optional
/// Baseline and Ideal points; ids follow that order.
pub fn enumerate(grid: &DesignGrid) -> Result<Vec<DesignPoint>, SweepError> {
    let cvs = grid.cv_levels.values()?;
    let alphas = grid.alpha0_levels.values()?;
    let factors = grid.main_factor_levels.values()?;
    let reworks = grid.rework_factor_levels.values()?;
    let betas = grid.beta_levels.values()?;
    let mut out = Vec::new();
    let mut push = |policy, cv, rework_factor| {
        out.push(DesignPoint {
            point_id: out.len() as u64,
            policy,
            cv,
            rework_factor,
        })
    };
    for &cv in &cvs {
        for &factor in &factors {
            for &rf in &reworks {
                push(PolicySpec::Opt { factor }, cv, rf);
            }
        }
    }
    for &cv in &cvs {
        for &alpha0 in &alphas {
            for &beta in &betas {
                for &rf in &reworks {
                    let params = SbaParams {
                        beta,
                        alpha0,
                        alpha_floor: grid.alpha_floor.min(alpha0),
                    };
                    push(PolicySpec::Sba(params), cv, rf);
                }
            }
        }
    }
    if grid.include_baseline {
        for &cv in &cvs {
            for &rf in &reworks {
                push(PolicySpec::Baseline, cv, rf);
            }
        }
    }
    if grid.include_ideal {
        for &cv in &cvs {
            push(PolicySpec::Ideal, cv, reworks[0]);
        }
    }
    Ok(out)
}

/// One row of the results store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub point_id: u64,
    pub replication: u32,
    pub policy: String,
    pub cv: f64,
    pub alpha0: Option<f64>,
    pub beta: Option<f64>,
    pub alpha_floor: Option<f64>,
    pub main_factor: Option<f64>,
    pub rework_factor: f64,
    pub batches: usize,
    pub mean_energy: f64,
    pub rework_ratio: f64,
    pub mean_inspections: f64,
    pub utilization: f64,
}

impl ResultRow {
    pub fn new(
        point: &DesignPoint,
        replication: u32,
        summary: &RunSummary,
        utilization: f64,
    ) -> Self {
        let sba = match point.policy {
            PolicySpec::Sba(p) => Some(p),
            _ => None,
        };
        Self {
            point_id: point.point_id,
            replication,
            policy: point.policy.kind_name().to_string(),
            cv: point.cv,
            alpha0: sba.map(|p| p.alpha0),
            beta: sba.map(|p| p.beta),
            alpha_floor: sba.map(|p| p.alpha_floor),
            main_factor: point.policy.main_factor(),
            rework_factor: point.rework_factor,
            batches: summary.batches,
            mean_energy: summary.mean_energy,
            rework_ratio: summary.rework_ratio,
            mean_inspections: summary.mean_inspections,
            utilization,
        }
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            batches: self.batches,
            mean_energy: self.mean_energy,
            rework_ratio: self.rework_ratio,
            mean_inspections: self.mean_inspections,
        }
    }

    /// Rebuilds the design point from the row's parameter columns.
    pub fn point(&self) -> Result<DesignPoint, SweepError> {
        let missing = |c: &str| SweepError::Invalid(format!("row {}: missing {c}", self.point_id));
        let policy = match self.policy.as_str() {
            "sba" => PolicySpec::Sba(SbaParams {
                beta: self.beta.ok_or_else(|| missing("beta"))?,
                alpha0: self.alpha0.ok_or_else(|| missing("alpha0"))?,
                alpha_floor: self.alpha_floor.ok_or_else(|| missing("alpha_floor"))?,
            }),
            "opt" => PolicySpec::Opt {
                factor: self.main_factor.ok_or_else(|| missing("main_factor"))?,
            },
            "baseline" => PolicySpec::Baseline,
            "ideal" => PolicySpec::Ideal,
            other => {
                return Err(SweepError::Invalid(format!("unknown policy `{other}`")));
            }
        };
        Ok(DesignPoint {
            point_id: self.point_id,
            policy,
            cv: self.cv,
            rework_factor: self.rework_factor,
        })
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Simulates one replication of `point` on a scenario already set to its CV.
pub fn run_point(
    scenario: &Scenario,
    point: &DesignPoint,
    replication: u32,
) -> Result<(ResultRow, SimulationRun), RunError> {
    let run = simulate(
        scenario,
        &point.batch_policy(),
        &seed_for(point.point_id, replication),
    )?;
    let summary = RunSummary::from_records(&run.records)?;
    Ok((
        ResultRow::new(point, replication, &summary, run.utilization()),
        run,
    ))
}

/// A run that did not produce a row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedRun {
    pub point_id: u64,
    pub replication: u32,
    pub error: String,
}

fn pool(parallelism: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .expect("thread pool")
}

fn scenarios_by_cv(
    grid: &DesignGrid,
    base: &Scenario,
    points: &[DesignPoint],
) -> Result<Vec<(f64, Scenario)>, ScenarioError> {
    let mut out: Vec<(f64, Scenario)> = Vec::new();
    for p in points {
        if !out.iter().any(|(cv, _)| *cv == p.cv) {
            out.push((p.cv, grid.scenario_for(base, p.cv)?));
        }
    }
    Ok(out)
}

/// Runs every (point, replication) pair in memory, sorted by pair.
pub fn evaluate(
    grid: &DesignGrid,
    base: &Scenario,
    points: &[DesignPoint],
    parallelism: usize,
) -> Result<(Vec<ResultRow>, Vec<FailedRun>), SweepError> {
    let scenarios = scenarios_by_cv(grid, base, points)?;
    let pairs: Vec<(&DesignPoint, u32)> = points
        .iter()
        .flat_map(|p| (0..grid.replications).map(move |r| (p, r)))
        .collect();
    let results: Vec<Result<ResultRow, FailedRun>> = pool(parallelism).install(|| {
        pairs
            .par_iter()
            .map(|&(p, r)| {
                let s = &scenarios
                    .iter()
                    .find(|(cv, _)| *cv == p.cv)
                    .expect("cv scenario")
                    .1;
                run_point(s, p, r)
                    .map(|(row, _)| row)
                    .map_err(|e| FailedRun {
                        point_id: p.point_id,
                        replication: r,
                        error: e.to_string(),
                    })
            })
            .collect()
    });
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    for r in results {
        match r {
            Ok(row) => rows.push(row),
            Err(f) => failed.push(f),
        }
    }
    Ok((rows, failed))
}

#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub output_dir: PathBuf,
    pub parallelism: usize,
    /// Also write every batch record of every run.
    pub batch_detail: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub version: String,
    pub scenario_name: String,
    pub scenario_digest: String,
    pub grid_digest: String,
    pub points: usize,
    pub replications: u32,
    pub completed_runs: usize,
    pub failed_runs: usize,
    pub grid: DesignGrid,
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub total_runs: usize,
    pub executed: usize,
    pub skipped: usize,
    pub failed: Vec<FailedRun>,
    pub results_path: PathBuf,
    pub manifest: SweepManifest,
}

fn run_file(dir: &Path, point: u64, rep: u32) -> PathBuf {
    dir.join(format!("p{point:05}_r{rep:03}.csv"))
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), SweepError> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn rows_to_csv(rows: &[ResultRow], comment: Option<&str>) -> Vec<u8> {
    let mut buf = Vec::new();
    if let Some(c) = comment {
        buf.extend_from_slice(format!("# {c}\n").as_bytes());
    }
    let mut w = csv::Writer::from_writer(buf);
    for r in rows {
        w.serialize(r).expect("in-memory csv write");
    }
    w.into_inner().expect("in-memory csv flush")
}

/// Reads a results table, skipping `#` comment lines.
pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<ResultRow>, SweepError> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| SweepError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    reader
        .deserialize()
        .map(|r| {
            r.map_err(|e| SweepError::Io {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn provenance(scenario_digest: &str, grid_digest: &str) -> String {
    format!(
        "heatstop {VERSION} scenario={scenario_digest} grid={grid_digest} seeds=replication,point_id"
    )
}

/// Executes the grid into `options.output_dir`, skipping runs whose files
/// already exist, then rebuilds `results.csv`, `failed.csv` and
/// `manifest.toml`.
pub fn run_sweep(
    grid: &DesignGrid,
    scenario: &Scenario,
    options: &SweepOptions,
) -> Result<SweepReport, SweepError> {
    grid.validate()?;
    let points = enumerate(grid)?;
    let dir = &options.output_dir;
    let runs_dir = dir.join("runs");
    fs::create_dir_all(&runs_dir).map_err(io_err(&runs_dir))?;
    let manifest_path = dir.join("manifest.toml");
    let grid_digest = grid.digest();
    if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let old: SweepManifest =
            toml::from_str(&text).map_err(|e| SweepError::Parse(e.to_string()))?;
        if old.grid_digest != grid_digest {
            return Err(SweepError::Mismatch("grid"));
        }
        if old.scenario_digest != scenario.digest() {
            return Err(SweepError::Mismatch("scenario"));
        }
    }
    let mut manifest = SweepManifest {
        version: VERSION.to_string(),
        scenario_name: scenario.config().name.clone(),
        scenario_digest: scenario.digest().to_string(),
        grid_digest: grid_digest.clone(),
        points: points.len(),
        replications: grid.replications,
        completed_runs: 0,
        failed_runs: 0,
        grid: grid.clone(),
    };
    write_atomic(
        &manifest_path,
        toml::to_string(&manifest).expect("manifest").as_bytes(),
    )?;

    let scenarios = scenarios_by_cv(grid, scenario, &points)?;
    let all: Vec<(&DesignPoint, u32)> = points
        .iter()
        .flat_map(|p| (0..grid.replications).map(move |r| (p, r)))
        .collect();
    let todo: Vec<(&DesignPoint, u32)> = all
        .iter()
        .copied()
        .filter(|(p, r)| !run_file(&runs_dir, p.point_id, *r).exists())
        .collect();
    log::info!("{} of {} runs to execute", todo.len(), all.len());

    let outcomes: Vec<Option<FailedRun>> = pool(options.parallelism).install(|| {
        todo.par_iter()
            .map(|&(p, r)| {
                let fail = |error: String| {
                    Some(FailedRun {
                        point_id: p.point_id,
                        replication: r,
                        error,
                    })
                };
                let s = &scenarios
                    .iter()
                    .find(|(cv, _)| *cv == p.cv)
                    .expect("cv scenario")
                    .1;
                let (row, run) = match run_point(s, p, r) {
                    Ok(x) => x,
                    Err(e) => return fail(e.to_string()),
                };
                if options.batch_detail {
                    let path = runs_dir.join(format!("p{:05}_r{r:03}.batches.csv", p.point_id));
                    if let Err(e) = write_atomic(&path, records_csv(&run.records).as_bytes()) {
                        return fail(e.to_string());
                    }
                }
                let path = run_file(&runs_dir, p.point_id, r);
                match write_atomic(&path, &rows_to_csv(&[row], None)) {
                    Ok(()) => None,
                    Err(e) => fail(e.to_string()),
                }
            })
            .collect()
    });
    let executed = todo.len();
    let mut failed: Vec<FailedRun> = outcomes.into_iter().flatten().collect();

    let mut rows = Vec::with_capacity(all.len());
    for &(p, r) in &all {
        let path = run_file(&runs_dir, p.point_id, r);
        if !path.exists() {
            continue;
        }
        match read_results(&path) {
            Ok(mut v) if v.len() == 1 => rows.push(v.remove(0)),
            Ok(_) => failed.push(FailedRun {
                point_id: p.point_id,
                replication: r,
                error: format!("{}: expected one row", path.display()),
            }),
            Err(e) => failed.push(FailedRun {
                point_id: p.point_id,
                replication: r,
                error: e.to_string(),
            }),
        }
    }
    failed.sort_by_key(|f| (f.point_id, f.replication));
    failed.dedup_by_key(|f| (f.point_id, f.replication));

    let results_path = dir.join("results.csv");
    let comment = provenance(scenario.digest(), &grid_digest);
    write_atomic(&results_path, &rows_to_csv(&rows, Some(&comment)))?;
    let mut failed_csv = csv::Writer::from_writer(Vec::new());
    for f in &failed {
        failed_csv.serialize(f).expect("in-memory csv write");
    }
    let failed_bytes = failed_csv.into_inner().expect("in-memory csv flush");
    let failed_path = dir.join("failed.csv");
    if failed.is_empty() {
        if failed_path.exists() {
            fs::remove_file(&failed_path).map_err(io_err(&failed_path))?;
        }
    } else {
        write_atomic(&failed_path, &failed_bytes)?;
    }
    manifest.completed_runs = rows.len();
    manifest.failed_runs = failed.len();
    write_atomic(
        &manifest_path,
        toml::to_string(&manifest).expect("manifest").as_bytes(),
    )?;
    Ok(SweepReport {
        total_runs: all.len(),
        executed,
        skipped: all.len() - executed,
        failed,
        results_path,
        manifest,
    })
}
