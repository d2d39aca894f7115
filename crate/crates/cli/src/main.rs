mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use heatstop::chamber::{Problem, ProgramId};

use commands::CliError;

#[derive(Parser, Debug)]
#[command(version, about = "Sensor-based stopping for battery-plate heat treatment", long_about = None)]
struct Cli {
    /// Scenario file; the bundled plant scenario when omitted
    #[arg(long, global = true, value_name = "FILE")]
    scenario: Option<PathBuf>,

    /// Directory for sweep stores and analysis tables
    #[arg(long, global = true, env = "HEATSTOP_OUTPUT_DIR", default_value = ".")]
    output_dir: PathBuf,

    /// Worker threads for sweeps (defaults to the available cores)
    #[arg(long, global = true, env = "HEATSTOP_PARALLELISM")]
    parallelism: Option<usize>,

    /// More log output (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check scenario and grid files
    Validate {
        #[arg(long, value_name = "FILE")]
        grid: Option<PathBuf>,
    },
    /// Run one replication and print its batch records
    Simulate(SimulateArgs),
    /// Run a design grid into the output directory (resumable)
    Sweep {
        /// Grid file; the bundled desk grid when omitted
        #[arg(long, value_name = "FILE")]
        grid: Option<PathBuf>,
        /// Also keep per-batch records of every run
        #[arg(long)]
        batch_detail: bool,
    },
    /// KPI and comparison tables from a results store
    Analyze {
        /// Results table; `<output-dir>/results.csv` when omitted
        #[arg(long, value_name = "FILE")]
        results: Option<PathBuf>,
    },
    /// Energy and personnel cost table with dominance
    Pareto {
        #[arg(long, value_name = "FILE")]
        results: Option<PathBuf>,
        #[arg(long, default_value_t = heatstop::metrics::PRICE_PER_KWH)]
        price_per_kwh: f64,
        #[arg(long, default_value_t = heatstop::metrics::WAGE_PER_HOUR)]
        wage_per_hour: f64,
    },
    /// Back-calculate expected requirements from inspection data
    Calibrate {
        /// Inspection table; the bundled plant data when omitted
        #[arg(long, value_name = "FILE")]
        inspections: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Per-iteration state of the sensor-driven loop for one batch
    Trace(TraceArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum PolicyArg {
    Sba,
    Opt,
    Baseline,
    Ideal,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum ProblemArg {
    Curing,
    Humidity,
}

impl From<ProblemArg> for Problem {
    fn from(p: ProblemArg) -> Self {
        match p {
            ProblemArg::Curing => Problem::Curing,
            ProblemArg::Humidity => Problem::Humidity,
        }
    }
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long, value_enum, default_value_t = PolicyArg::Sba)]
    pub policy: PolicyArg,
    /// Main-step factor for `opt`
    #[arg(long, default_value_t = 1.0)]
    pub factor: f64,
    #[arg(long, default_value_t = 0.6)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.2)]
    pub alpha0: f64,
    #[arg(long, default_value_t = 0.02)]
    pub alpha_floor: f64,
    #[arg(long, default_value_t = 0.1)]
    pub rework_factor: f64,
    /// Overrides every program's requirement CV
    #[arg(long)]
    pub cv: Option<f64>,
    /// Replication index
    #[arg(long, default_value_t = 0)]
    pub seed: u32,
    /// Design point id (selects the sensor stream)
    #[arg(long, default_value_t = 0)]
    pub point: u64,
    #[arg(long, requires = "warmup_years")]
    pub horizon_years: Option<f64>,
    #[arg(long, requires = "horizon_years")]
    pub warmup_years: Option<f64>,
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TraceArgs {
    #[arg(long, default_value_t = ProgramId::Negative)]
    pub program: ProgramId,
    #[arg(long, value_enum, default_value_t = ProblemArg::Curing)]
    pub problem: ProblemArg,
    /// Expected requirement in kWh; the program's value when omitted
    #[arg(long)]
    pub expected: Option<f64>,
    #[arg(long, default_value_t = 0.30)]
    pub cv: f64,
    #[arg(long, default_value_t = 0.95)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.2)]
    pub alpha0: f64,
    #[arg(long, default_value_t = 0.02)]
    pub alpha_floor: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u32,
    /// Fixes the hidden requirement instead of drawing it
    #[arg(long)]
    pub phi: Option<f64>,
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.verbose, &cli.command) {
        // per-run sigma fallbacks would repeat for every replication of a sweep
        (0, Command::Sweep { .. }) => "warn,heatstop::plantsim=error",
        (0, _) => "warn",
        (1, _) => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let ctx = commands::Context {
        scenario: cli.scenario,
        output_dir: cli.output_dir,
        parallelism: cli.parallelism.unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        }),
    };
    match cli.command {
        Command::Validate { grid } => commands::validate(&ctx, grid.as_deref()),
        Command::Simulate(args) => commands::simulate(&ctx, &args),
        Command::Sweep { grid, batch_detail } => {
            commands::sweep(&ctx, grid.as_deref(), batch_detail)
        }
        Command::Analyze { results } => commands::analyze(&ctx, results.as_deref()),
        Command::Pareto {
            results,
            price_per_kwh,
            wage_per_hour,
        } => commands::pareto(&ctx, results.as_deref(), price_per_kwh, wage_per_hour),
        Command::Calibrate { inspections, out } => {
            commands::calibrate(&ctx, inspections.as_deref(), out.as_deref())
        }
        Command::Trace(args) => commands::trace(&ctx, &args),
    }
}
