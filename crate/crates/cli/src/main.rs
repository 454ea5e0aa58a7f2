mod commands;
mod reproduce;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use distrack::Error;

/// Optimal-transport tools for finite-horizon distributional tracking.
#[derive(Debug, Parser)]
#[command(name = "distrack", version, about)]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Diagnostic verbosity on stderr.
    #[arg(long, global = true, value_enum, default_value_t = LogLevel::Warn)]
    log_level: LogLevel,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LogLevel {
    Error,
    Warn,
    Info,
    Debug,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Wasserstein distance between two particle ensembles (exact LP).
    Wasserstein(WassersteinArgs),
    /// Brenier map between two Gaussians.
    GaussMap(GaussMapArgs),
    /// Displacement interpolation between two Gaussians.
    Interpolate(InterpolateArgs),
    /// Affine state feedback steering a Gaussian sequence.
    Feedback(FeedbackArgs),
    /// Dynamic transport between two grid densities.
    BbSolve(BbSolveArgs),
    /// Propagate a particle ensemble through a vector field.
    Propagate(PropagateArgs),
    /// Output-map refinement of a linear Gaussian model.
    Refine(RefineArgs),
    /// Output-map refinement from predicted and measured samples.
    RefineEmpirical(RefineEmpiricalArgs),
    /// Regenerate one of the reference experiments.
    Reproduce(ReproduceArgs),
}

#[derive(Debug, Args)]
struct WassersteinArgs {
    /// Source ensemble CSV (x1..xd,weight[,density]).
    #[arg(long)]
    src: PathBuf,
    /// Target ensemble CSV.
    #[arg(long)]
    tgt: PathBuf,
    /// Write the optimal plan as CSV `i,j,mass`.
    #[arg(long)]
    plan: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GaussMapArgs {
    /// Source Gaussian JSON {"mean","cov"}.
    #[arg(long)]
    src: PathBuf,
    /// Target Gaussian JSON.
    #[arg(long)]
    tgt: PathBuf,
    /// Also print the displacement interpolant at this s in [0, 1].
    #[arg(long)]
    s: Option<f64>,
}

#[derive(Debug, Args)]
struct InterpolateArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    /// Number of intervals; k + 1 Gaussians are written.
    #[arg(long, default_value_t = 10)]
    steps: usize,
    /// Output directory for step_###.json and profile.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FeedbackArgs {
    /// System JSON {"A","B"}, or a list of them, one per horizon.
    #[arg(long)]
    system: PathBuf,
    /// Gaussian JSONs g0 g1 ... gM.
    #[arg(long, num_args = 2.., required = true)]
    pdfs: Vec<PathBuf>,
    /// Free pair JSON {"R","r"}; default (0, 0), the minimum-norm law.
    #[arg(long)]
    free_pair: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BbSolveArgs {
    /// Source grid JSON.
    #[arg(long)]
    src: PathBuf,
    /// Target grid JSON.
    #[arg(long)]
    tgt: PathBuf,
    /// Time intervals on s in [0, 1].
    #[arg(long, default_value_t = 16)]
    time_steps: usize,
    /// Continuity residual tolerance (relative to max|m| / cell width).
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    /// Relative energy change allowed over 50 iterations.
    #[arg(long, default_value_t = 1e-5)]
    energy_tol: f64,
    #[arg(long, default_value_t = 20_000)]
    max_iter: usize,
    /// Splitting step, in units of the peak endpoint density.
    #[arg(long, default_value_t = 0.05)]
    gamma: f64,
    /// Douglas-Rachford relaxation.
    #[arg(long, default_value_t = 1.8)]
    relaxation: f64,
    /// Endpoint density floor, relative to the maximum.
    #[arg(long, default_value_t = 1e-10)]
    floor: f64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FieldKind {
    /// x1' = x2, x2' = -a x1^3 - b x1 - d x2; params a,b,d.
    Duffing,
    /// x' = M x + c in 2-D; params m11,m12,m21,m22,c1,c2.
    Affine,
}

#[derive(Debug, Args)]
struct PropagateArgs {
    #[arg(long, value_enum, default_value_t = FieldKind::Duffing)]
    field: FieldKind,
    /// Comma-separated field parameters.
    #[arg(long, default_value = "1,-1,0.5", allow_hyphen_values = true)]
    params: String,
    /// Initial ensemble: `uniform:lo,hi` on the square, or `csv:path`.
    #[arg(long, default_value = "uniform:-2,2", allow_hyphen_values = true)]
    init: String,
    /// Samples for a uniform initial ensemble.
    #[arg(long, default_value_t = 500)]
    n: usize,
    /// ChaCha8 seed for a uniform initial ensemble.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Snapshot times `start:step:end`, starting after t = 0.
    #[arg(long, default_value = "0.5:0.5:5.0")]
    times: String,
    /// RK4 steps per unit time.
    #[arg(long, default_value_t = 100.0)]
    steps_per_unit: f64,
    /// Output directory for eta_##.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the path kinetic energy over [t0, t1] of the ensemble at t0.
    #[arg(long, num_args = 2, value_names = ["T0", "T1"])]
    kinetic: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
struct RefineArgs {
    /// True model JSON {"A","C","mean0","P0"}.
    #[arg(long)]
    truth: PathBuf,
    /// Baseline model JSON.
    #[arg(long)]
    model: PathBuf,
    /// Measurement instants.
    #[arg(long, num_args = 1.., default_values_t = [1, 2, 3])]
    j: Vec<usize>,
    /// Points on each refinement path, s evenly spaced in [0, 1].
    #[arg(long, default_value_t = 11)]
    path_samples: usize,
    /// Push each prediction through the previous correction first.
    #[arg(long, default_value_t = false)]
    chained: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RefineEmpiricalArgs {
    /// Predicted output samples CSV (equal weights).
    #[arg(long)]
    pred: PathBuf,
    /// Measured output samples CSV (equal weights).
    #[arg(long)]
    meas: PathBuf,
    /// Map CSV `x1..xd,y1..yd`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Experiment {
    Duffing,
    RefineLinear,
}

#[derive(Debug, Args)]
struct ReproduceArgs {
    #[arg(value_enum)]
    experiment: Experiment,
    #[arg(long)]
    out: PathBuf,
    /// Duffing: ChaCha8 seed of the initial samples.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Duffing: number of samples.
    #[arg(long, default_value_t = 500)]
    n: usize,
    /// Duffing: grid cells per axis for the density rasters. Cells much
    /// finer than the particle spacing leave holes that stall the solver.
    #[arg(long, default_value_t = 32)]
    grid: usize,
    /// Duffing: time intervals per horizon for the dynamic solver.
    #[arg(long, default_value_t = 16)]
    time_steps: usize,
}

const EXIT_DOMAIN: u8 = 2;
const EXIT_USAGE: u8 = 64;
const EXIT_INTERNAL: u8 = 70;

/// Failure of a subcommand, carrying its exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Domain(String),
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) | Error::Parse(_) => Failure::Usage(e.to_string()),
            Error::SolverStall { .. } => Failure::Internal(e.to_string()),
            other => Failure::Domain(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

pub type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.log_level {
        LogLevel::Error => log::LevelFilter::Error,
        LogLevel::Warn => log::LevelFilter::Warn,
        LogLevel::Info => log::LevelFilter::Info,
        LogLevel::Debug => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    let outcome = std::panic::catch_unwind(|| run(cli.command));
    match outcome {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(Failure::Usage(m))) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Ok(Err(Failure::Domain(m))) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_DOMAIN)
        }
        Ok(Err(Failure::Internal(m))) => {
            eprintln!("internal error: {m}");
            ExitCode::from(EXIT_INTERNAL)
        }
        Err(_) => ExitCode::from(EXIT_INTERNAL),
    }
}

fn run(cmd: Command) -> CmdResult {
    match cmd {
        Command::Wasserstein(a) => commands::wasserstein(&a.src, &a.tgt, a.plan.as_deref()),
        Command::GaussMap(a) => commands::gauss_map(&a.src, &a.tgt, a.s),
        Command::Interpolate(a) => commands::interpolate(&a.src, &a.tgt, a.steps, &a.out),
        Command::Feedback(a) => commands::feedback(&a.system, &a.pdfs, a.free_pair.as_deref()),
        Command::BbSolve(a) => {
            let params = distrack::bb::SolverParams {
                gamma: a.gamma,
                relaxation: a.relaxation,
                tolerance: a.tol,
                energy_tolerance: a.energy_tol,
                max_iter: a.max_iter,
                density_floor: a.floor,
                ..Default::default()
            };
            commands::bb_solve(&a.src, &a.tgt, a.time_steps, &params, &a.out)
        }
        Command::Propagate(a) => commands::propagate(&commands::PropagateOptions {
            field: match a.field {
                FieldKind::Duffing => commands::Field::Duffing,
                FieldKind::Affine => commands::Field::Affine,
            },
            params: a.params,
            init: a.init,
            n: a.n,
            seed: a.seed,
            times: a.times,
            steps_per_unit: a.steps_per_unit,
            out: a.out,
            kinetic: a.kinetic,
        }),
        Command::Refine(a) => commands::refine(&a.truth, &a.model, &a.j, a.path_samples, a.chained, &a.out),
        Command::RefineEmpirical(a) => commands::refine_empirical(&a.pred, &a.meas, &a.out),
        Command::Reproduce(a) => match a.experiment {
            Experiment::Duffing => reproduce::duffing(&a.out, a.seed, a.n, a.grid, a.time_steps),
            Experiment::RefineLinear => reproduce::refine_linear(&a.out),
        },
    }
}
