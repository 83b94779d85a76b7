mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::CliError;

#[derive(Parser)]
#[command(name = "fedvar", version, about = "Federated optimization experiments under the ABC variance condition")]
struct Cli {
    /// Config file (TOML or JSON, chosen by extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base seed; falls back to FEDVAR_SEED, then the config, then 42.
    #[arg(long, global = true, env = "FEDVAR_SEED")]
    seed: Option<u64>,
    /// Worker threads for trials (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by --config and write trajectory CSVs to --out.
    Run,
    /// Check ABC claims, unbiasedness and relaxed-growth violations of every oracle.
    Verify(VerifyArgs),
    /// Report sigma_f*, BGD constants and drift at the optimum.
    Hetero(HeteroArgs),
    /// Heterogeneity measures and final gaps on the quadratic/Huber pair.
    Table2(Table2Args),
    /// Gap curves of FedAvg and SCAFFOLD on the Huber/softplus problem.
    Fig1(Fig1Args),
    /// Print a theory stepsize and the caps it satisfies.
    Stepsize(StepsizeArgs),
}

#[derive(Args)]
struct VerifyArgs {
    /// Offset of the quadratic/Huber pair (default problem: Huber/softplus).
    #[arg(long, allow_negative_numbers = true)]
    d: Option<f64>,
    #[arg(long, default_value_t = -10.0, allow_negative_numbers = true)]
    grid_lo: f64,
    #[arg(long, default_value_t = 30.0, allow_negative_numbers = true)]
    grid_hi: f64,
    #[arg(long, default_value_t = 1000)]
    points: usize,
    /// Draws per point for oracles without finite noise support.
    #[arg(long, default_value_t = 20_000)]
    samples: usize,
}

#[derive(Args)]
struct HeteroArgs {
    /// Offset of the quadratic/Huber pair (default problem: Huber/softplus).
    #[arg(long, allow_negative_numbers = true)]
    d: Option<f64>,
    /// Grid points for the BGD estimate on [-1000, 1000].
    #[arg(long, default_value_t = 100_000)]
    grid: usize,
    /// Skip the BGD estimate.
    #[arg(long)]
    no_bgd: bool,
    /// Local steps for the drift at the optimum; needs --eta.
    #[arg(long = "Q", requires = "eta")]
    q: Option<usize>,
    #[arg(long, requires = "q")]
    eta: Option<f64>,
}

#[derive(Args)]
struct Table2Args {
    /// Offsets, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_value = "-100,-50,-20,-2")]
    d: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    runs: usize,
    #[arg(long = "T", default_value_t = 4000)]
    t: usize,
    #[arg(long = "Q", default_value_t = 17)]
    q: usize,
    #[arg(long, default_value_t = 0.00046)]
    alpha: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    x0: f64,
    #[arg(long, default_value_t = 100_000)]
    bgd_grid: usize,
}

#[derive(Args)]
struct Fig1Args {
    /// Stepsizes, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0.0005,0.001,0.002,0.004")]
    stepsizes: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    runs: usize,
    #[arg(long = "T", default_value_t = 2000)]
    t: usize,
    #[arg(long = "Q", default_value_t = 17)]
    q: usize,
    #[arg(long, default_value_t = 10)]
    record_every: usize,
    /// Starting point; the minimizer is near the origin.
    #[arg(long, default_value_t = 10.0, allow_negative_numbers = true)]
    x0: f64,
    /// Use exact gradients instead of the noisy oracles.
    #[arg(long)]
    exact: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Alg {
    Fedavg,
    Scaffold,
}

#[derive(Args)]
struct StepsizeArgs {
    #[arg(long, value_enum, default_value = "fedavg")]
    alg: Alg,
    #[arg(long = "L", allow_negative_numbers = true)]
    l: f64,
    #[arg(long = "C", allow_negative_numbers = true)]
    c: f64,
    #[arg(long = "Q")]
    q: usize,
    #[arg(long = "T")]
    t: usize,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    eta_s: f64,
    /// Use the noiseless (C = 0) closed form instead of the general one.
    #[arg(long)]
    noiseless: bool,
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let global = commands::Global {
        config: cli.config,
        out: cli.out,
        seed: cli.seed,
    };
    match cli.command {
        Command::Run => commands::run(&global),
        Command::Verify(a) => commands::verify(&global, a.d, (a.grid_lo, a.grid_hi), a.points, a.samples),
        Command::Hetero(a) => commands::hetero(&global, a.d, a.grid, !a.no_bgd, a.q.zip(a.eta)),
        Command::Table2(a) => commands::table2(
            &global,
            fedvar::harness::Table2Options {
                d_values: a.d,
                t: a.t,
                q: a.q,
                alpha: a.alpha,
                n_runs: a.runs,
                x0: a.x0,
                base_seed: global.seed.unwrap_or(42),
                bgd_grid: a.bgd_grid,
            },
        ),
        Command::Fig1(a) => commands::fig1(
            &global,
            fedvar::harness::Fig1Options {
                stepsizes: a.stepsizes,
                t: a.t,
                q: a.q,
                n_runs: a.runs,
                n_agents: 16,
                x0: a.x0,
                base_seed: global.seed.unwrap_or(42),
                record_every: a.record_every,
                exact_oracles: a.exact,
            },
        ),
        Command::Stepsize(a) => commands::stepsize(
            matches!(a.alg, Alg::Scaffold),
            (a.l, a.c, a.q, a.t, a.n),
            a.eta_s,
            a.noiseless,
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = match cli.jobs {
        Some(0) => {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    };
    let pool = match pool {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match pool.install(|| dispatch(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
