use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use heatstop::calib::{
    bundled_inspections, calibration_report, demand_shares, load_inspections, weighted_baseline,
};
use heatstop::chamber::{BatchPolicy, Problem};
use heatstop::metrics::{
    aggregate, best_per_scenario, compare, pareto_front, to_costs, CostRates, KpiSummary, Level,
    RunSummary, Verdict,
};
use heatstop::plantsim::{records_csv, simulate as run_simulation, Scenario};
use heatstop::randkit::{replication_seed, seed_for, LogNormalMeanCV, RngStream};
use heatstop::stoppol::{sba_run, PolicySpec, SbaConfig, SbaParams};
use heatstop::sweep::{
    enumerate, read_results, run_sweep, write_atomic, DesignGrid, DesignPoint, ResultRow,
    SweepError, SweepOptions, VERSION,
};
use log::info;
use thiserror::Error;

use crate::{PolicyArg, SimulateArgs, TraceArgs};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{failed} of {total} runs failed; run the sweep again to retry them")]
    Partial { failed: usize, total: usize },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::Partial { .. } => 4,
        }
    }

    /// One-line JSON record for stderr.
    pub fn record(&self) -> String {
        let kind = match self {
            CliError::Validation(_) => "validation",
            CliError::Runtime(_) => "runtime",
            CliError::Partial { .. } => "partial_sweep",
        };
        serde_json::json!({
            "error": kind,
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        })
        .to_string()
    }
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn sweep_err(e: SweepError) -> CliError {
    match e {
        SweepError::Io { .. } => runtime(e),
        _ => invalid(e),
    }
}

pub struct Context {
    pub scenario: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub parallelism: usize,
}

impl Context {
    fn scenario(&self) -> Result<Scenario, CliError> {
        match &self.scenario {
            Some(p) => Scenario::load(p).map_err(invalid),
            None => Ok(Scenario::bundled()),
        }
    }

    fn grid(&self, path: Option<&Path>) -> Result<DesignGrid, CliError> {
        match path {
            Some(p) => DesignGrid::load(p).map_err(sweep_err),
            None => Ok(DesignGrid::desk()),
        }
    }

    fn results_path(&self, given: Option<&Path>) -> PathBuf {
        given.map_or_else(|| self.output_dir.join("results.csv"), Path::to_path_buf)
    }
}

fn provenance(scenario: &str, grid: &str, seed: &str) -> String {
    format!("# heatstop {VERSION} scenario={scenario} grid={grid} seed={seed}\n")
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()).map_err(runtime),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn validate(ctx: &Context, grid: Option<&Path>) -> Result<(), CliError> {
    let s = ctx.scenario()?;
    let cfg = s.config();
    println!(
        "scenario {} ok: {} programs, {} plate types, digest {}",
        cfg.name,
        cfg.programs.len(),
        cfg.plate_types.len(),
        s.digest()
    );
    if let Some(path) = grid {
        let g = ctx.grid(Some(path))?;
        g.scenario_for(&s, cfg.cv_min_energy).map_err(invalid)?;
        let points = enumerate(&g).map_err(sweep_err)?;
        println!(
            "grid ok: {} points, {} runs, digest {}",
            points.len(),
            points.len() * g.replications as usize,
            g.digest()
        );
    }
    Ok(())
}

pub fn simulate(ctx: &Context, args: &SimulateArgs) -> Result<(), CliError> {
    let mut s = ctx.scenario()?;
    if let Some(cv) = args.cv {
        s = s.with_cv(cv).map_err(invalid)?;
    }
    if let (Some(h), Some(w)) = (args.horizon_years, args.warmup_years) {
        s = s.with_horizon(h, w).map_err(invalid)?;
    }
    let policy = match args.policy {
        PolicyArg::Sba => PolicySpec::Sba(SbaParams {
            beta: args.beta,
            alpha0: args.alpha0,
            alpha_floor: args.alpha_floor,
        }),
        PolicyArg::Opt => PolicySpec::Opt {
            factor: args.factor,
        },
        PolicyArg::Baseline => PolicySpec::Baseline,
        PolicyArg::Ideal => PolicySpec::Ideal,
    };
    let policy = BatchPolicy {
        policy,
        rework_factor: args.rework_factor,
    };
    policy.validate().map_err(invalid)?;
    let run = run_simulation(&s, &policy, &seed_for(args.point, args.seed)).map_err(runtime)?;
    let post = RunSummary::from_records(&run.records).ok();
    info!(
        "{} batches ({} after warm-up), utilization {:.3}, mean energy {}",
        run.records.len(),
        run.post_warmup().count(),
        run.utilization(),
        num(post.map(|p| p.mean_energy))
    );
    let seed = format!("{}:{}", args.point, args.seed);
    let text = provenance(s.digest(), "-", &seed) + &records_csv(&run.records);
    emit(args.out.as_deref(), &text)
}

pub fn sweep(ctx: &Context, grid: Option<&Path>, batch_detail: bool) -> Result<(), CliError> {
    let s = ctx.scenario()?;
    let g = ctx.grid(grid)?;
    let options = SweepOptions {
        output_dir: ctx.output_dir.clone(),
        parallelism: ctx.parallelism,
        batch_detail,
    };
    let report = run_sweep(&g, &s, &options).map_err(sweep_err)?;
    println!(
        "{} runs: {} executed, {} already stored, {} failed; results in {}",
        report.total_runs,
        report.executed,
        report.skipped,
        report.failed.len(),
        report.results_path.display()
    );
    if report.failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Partial {
            failed: report.failed.len(),
            total: report.total_runs,
        })
    }
}

/// Header comment of a results table, or a fallback naming the file.
fn results_comment(path: &Path) -> Result<String, CliError> {
    let text = fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    Ok(match text.lines().next() {
        Some(line) if line.starts_with("# ") => format!("{line}\n"),
        _ => provenance("-", "-", &format!("results={}", path.display())),
    })
}

struct PointKpis {
    point: DesignPoint,
    row: ResultRow,
    kpi: KpiSummary,
}

fn point_kpis(path: &Path) -> Result<(String, Vec<PointKpis>), CliError> {
    let comment = results_comment(path)?;
    let rows = read_results(path).map_err(sweep_err)?;
    let mut groups: BTreeMap<u64, Vec<ResultRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.point_id).or_default().push(r);
    }
    let mut out = Vec::with_capacity(groups.len());
    for (id, rows) in groups {
        let point = rows[0].point().map_err(sweep_err)?;
        let runs: Vec<RunSummary> = rows.iter().map(ResultRow::summary).collect();
        let kpi = aggregate(id, &runs).map_err(runtime)?;
        out.push(PointKpis {
            point,
            row: rows.into_iter().next().expect("non-empty group"),
            kpi,
        });
    }
    if out.is_empty() {
        return Err(invalid(format!("{}: no result rows", path.display())));
    }
    Ok((comment, out))
}

fn params(r: &ResultRow) -> String {
    format!(
        "{},{},{},{},{},{}",
        r.policy,
        r.cv,
        num(r.alpha0),
        num(r.beta),
        num(r.main_factor),
        r.rework_factor
    )
}

fn intervals(k: &KpiSummary) -> String {
    let iv = |l| k.interval(l).map(|i| (i.lo, i.hi));
    let (a, b) = (iv(Level::P95), iv(Level::P99));
    format!(
        "{},{},{},{}",
        num(a.map(|x| x.0)),
        num(a.map(|x| x.1)),
        num(b.map(|x| x.0)),
        num(b.map(|x| x.1))
    )
}

fn cv_levels(kpis: &[PointKpis]) -> Vec<f64> {
    let mut cvs: Vec<f64> = kpis.iter().map(|k| k.point.cv).collect();
    cvs.sort_by(f64::total_cmp);
    cvs.dedup();
    cvs
}

pub fn analyze(ctx: &Context, results: Option<&Path>) -> Result<(), CliError> {
    let path = ctx.results_path(results);
    let (comment, kpis) = point_kpis(&path)?;

    let mut table = comment.clone();
    table.push_str(
        "point_id,policy,cv,alpha0,beta,main_factor,rework_factor,replications,mean_energy,\
         ci95_lo,ci95_hi,ci99_lo,ci99_hi,rework_ratio,mean_inspections\n",
    );
    for p in &kpis {
        let k = &p.kpi;
        writeln!(
            table,
            "{},{},{},{},{},{},{}",
            k.point_id,
            params(&p.row),
            k.replications,
            k.mean_energy_per_batch,
            intervals(k),
            k.rework_ratio,
            k.mean_inspections_per_batch
        )
        .expect("write to string");
    }

    let pairs: Vec<(DesignPoint, KpiSummary)> = kpis.iter().map(|p| (p.point, p.kpi)).collect();
    let mut cmp = comment;
    cmp.push_str(
        "cv,policy,point_id,alpha0,beta,main_factor,rework_factor,mean_energy,ci95_lo,ci95_hi,\
         ci99_lo,ci99_hi,saving_vs_baseline,vs_best_opt_95,vs_best_opt_99\n",
    );
    let mut lines = 0;
    for cv in cv_levels(&kpis) {
        let best = |kind: &str| {
            best_per_scenario(&pairs, |p| p.cv == cv && p.policy.kind_name() == kind).ok()
        };
        let baseline = best("baseline");
        let opt = best("opt");
        for kind in ["baseline", "opt", "sba", "ideal"] {
            let Some((point, k)) = best(kind) else {
                continue;
            };
            let row = &kpis
                .iter()
                .find(|p| p.point.point_id == point.point_id)
                .expect("known point")
                .row;
            let saving =
                baseline.map(|(_, b)| 1.0 - k.mean_energy_per_batch / b.mean_energy_per_batch);
            let verdict = |level| match opt {
                Some((o, ok)) if o.point_id != point.point_id => match compare(k, ok, level) {
                    Ok(Verdict::ABetter) => "lower",
                    Ok(Verdict::BBetter) => "higher",
                    Ok(Verdict::Indistinguishable) => "overlap",
                    Err(_) => "",
                },
                _ => "",
            };
            writeln!(
                cmp,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                cv,
                row.policy,
                point.point_id,
                num(row.alpha0),
                num(row.beta),
                num(row.main_factor),
                row.rework_factor,
                k.mean_energy_per_batch,
                intervals(k),
                num(saving),
                verdict(Level::P95),
                verdict(Level::P99)
            )
            .expect("write to string");
            lines += 1;
        }
    }

    fs::create_dir_all(&ctx.output_dir).map_err(runtime)?;
    let kpi_path = ctx.output_dir.join("kpis.csv");
    let cmp_path = ctx.output_dir.join("comparison.csv");
    write_atomic(&kpi_path, table.as_bytes()).map_err(runtime)?;
    write_atomic(&cmp_path, cmp.as_bytes()).map_err(runtime)?;
    println!(
        "{} points -> {}; {} comparison rows -> {}",
        kpis.len(),
        kpi_path.display(),
        lines,
        cmp_path.display()
    );
    Ok(())
}

pub fn pareto(
    ctx: &Context,
    results: Option<&Path>,
    price_per_kwh: f64,
    wage_per_hour: f64,
) -> Result<(), CliError> {
    if !(price_per_kwh >= 0.0 && wage_per_hour >= 0.0) {
        return Err(invalid("cost rates must be non-negative"));
    }
    let rates = CostRates {
        price_per_kwh,
        wage_per_hour,
        ..CostRates::default()
    };
    let path = ctx.results_path(results);
    let (comment, kpis) = point_kpis(&path)?;
    let mut table = comment;
    table.push_str(
        "point_id,policy,cv,alpha0,beta,main_factor,rework_factor,energy_cost,personnel_cost,\
         total_cost,on_front,dominated_by\n",
    );
    let mut front_size = 0;
    for cv in cv_levels(&kpis) {
        let group: Vec<&PointKpis> = kpis.iter().filter(|p| p.point.cv == cv).collect();
        let costs: Vec<_> = group.iter().map(|p| to_costs(&p.kpi, &rates)).collect();
        let front: BTreeSet<u64> = pareto_front(&costs).iter().map(|c| c.point_id).collect();
        front_size += front.len();
        for (p, c) in group.iter().zip(&costs) {
            let by = costs
                .iter()
                .find(|o| o.dominates(c))
                .map(|o| o.point_id.to_string());
            writeln!(
                table,
                "{},{},{},{},{},{},{}",
                c.point_id,
                params(&p.row),
                c.energy_cost,
                c.personnel_cost,
                c.energy_cost + c.personnel_cost,
                front.contains(&c.point_id),
                by.unwrap_or_default()
            )
            .expect("write to string");
        }
    }
    fs::create_dir_all(&ctx.output_dir).map_err(runtime)?;
    let out = ctx.output_dir.join("pareto.csv");
    write_atomic(&out, table.as_bytes()).map_err(runtime)?;
    println!(
        "{} points, {} on the front -> {}",
        kpis.len(),
        front_size,
        out.display()
    );
    Ok(())
}

pub fn calibrate(
    ctx: &Context,
    inspections: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let s = ctx.scenario()?;
    let rows = match inspections {
        Some(p) => load_inspections(p).map_err(invalid)?,
        None => bundled_inspections(),
    };
    let shares = demand_shares(s.config());
    let weighted = weighted_baseline(&rows, &shares).map_err(invalid)?;
    let source = inspections.map_or_else(|| "bundled".to_string(), |p| p.display().to_string());
    let mut text = provenance(s.digest(), "-", "-");
    writeln!(text, "# inspections={source}").expect("write to string");
    text.push_str(
        "program_id,rework_ratio,estimated_curing_kwh,estimated_humidity_kwh,reference_curing_kwh,\
         reference_humidity_kwh,provided_ratio,demand_share\n",
    );
    for l in calibration_report(&rows, &shares) {
        writeln!(
            text,
            "{},{},{},{},{},{},{},{}",
            l.program_id,
            num(l.rework_ratio),
            num(l.estimated_curing_kwh),
            num(l.estimated_humidity_kwh),
            num(l.reference_curing_kwh),
            num(l.reference_humidity_kwh),
            num(l.provided_ratio),
            l.demand_share
        )
        .expect("write to string");
    }
    writeln!(
        text,
        "# weighted cv={} factor={}",
        weighted.cv, weighted.factor
    )
    .expect("write to string");
    emit(out, &text)
}

pub fn trace(ctx: &Context, args: &TraceArgs) -> Result<(), CliError> {
    let s = ctx.scenario()?;
    let program = s.program(args.program);
    let problem = Problem::from(args.problem);
    let expected = args
        .expected
        .unwrap_or_else(|| program.expected_min_energy(problem));
    let cfg = SbaConfig::new(
        SbaParams {
            beta: args.beta,
            alpha0: args.alpha0,
            alpha_floor: args.alpha_floor,
        },
        program.tau(),
        SbaConfig::seed_sigma(expected, args.cv),
        expected,
        args.cv,
    )
    .map_err(invalid)?;
    let mut rng = RngStream::new(replication_seed(args.seed), 0);
    let phi = match args.phi {
        Some(phi) if phi.is_finite() && phi >= 0.0 => phi,
        Some(phi) => return Err(invalid(format!("requirement {phi} must be non-negative"))),
        None => LogNormalMeanCV::new(expected, args.cv)
            .map_err(invalid)?
            .sample(&mut rng),
    };
    let (stop, states) =
        sba_run(&cfg, program.cumulative(problem), phi, &mut rng).map_err(runtime)?;
    info!(
        "stopped after {} iterations, estimate {} for requirement {}",
        stop.stopping_iteration, stop.terminal_estimate, phi
    );
    let mut text = provenance(s.digest(), "-", &args.seed.to_string());
    writeln!(
        text,
        "# program={} problem={} expected={} cv={} beta={} alpha0={} alpha_floor={} phi={}",
        args.program, problem, expected, args.cv, args.beta, args.alpha0, args.alpha_floor, phi
    )
    .expect("write to string");
    text.push_str(
        "n,cum_energy,hidden_min_energy,sensor_reading,deviation,estimate,threshold,remaining_time,action\n",
    );
    for st in &states {
        writeln!(
            text,
            "{},{},{},{},{},{},{},{},{}",
            st.n,
            st.cum_energy,
            st.hidden_min_energy,
            st.sensor_reading,
            st.deviation,
            st.estimate,
            st.threshold,
            st.remaining_time,
            format!("{:?}", st.action).to_lowercase()
        )
        .expect("write to string");
    }
    emit(args.out.as_deref(), &text)
}
