use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use onebit_bht::bench::{
    emit_results, nmse_db, run_monte_carlo, summarize, thread_cap_from_env, write_csv, write_json, Algorithm,
    ExperimentSpec, OutputFormat,
};
use onebit_bht::estimator::SolverOptions;
use onebit_bht::model::{generate_measurements, sample_sparse_signal, ModelParams};
use onebit_bht::pipeline::{run_bht_mle, run_mle_baseline, BhtMleConfig, InfeasiblePolicy};
use onebit_bht::selftest::run_selftest;
use onebit_bht::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use std::process::ExitCode;

/// Sparse recovery from one-bit measurements with a perturbed sensing matrix.
#[derive(Parser, Debug)]
#[command(name = "onebit-bht", version, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Monte Carlo sweep over measurement counts and activity levels.
    Sweep(SweepArgs),
    /// One trial with per-iteration diagnostics.
    Single(SingleArgs),
    /// Run the built-in oracle checks.
    Selftest {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// TOML file with ExperimentSpec fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    m: Option<usize>,
    /// Comma-separated measurement counts.
    #[arg(long = "n-meas", value_delimiter = ',')]
    n_meas: Option<Vec<usize>>,
    /// Comma-separated activity probabilities.
    #[arg(long, value_delimiter = ',')]
    p: Option<Vec<f64>>,
    #[arg(long = "sigma-e")]
    sigma_e: Option<f64>,
    #[arg(long = "sigma-n")]
    sigma_n: Option<f64>,
    #[arg(long = "sigma-r")]
    sigma_r: Option<f64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Base seed for per-trial seed derivation.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated subset of bht_mle, mle, ls_init.
    #[arg(long, value_delimiter = ',')]
    algos: Option<Vec<Algorithm>>,
    /// What to do with infeasible ML solutions: project, zero or abort.
    #[arg(long, value_parser = parse_policy)]
    policy: Option<InfeasiblePolicy>,
    /// Output file; records go to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "csv")]
    format: OutputFormat,
    /// Write zero wall times so repeated runs are byte-identical.
    #[arg(long = "no-timing")]
    no_timing: bool,
}

#[derive(Args, Debug)]
struct SingleArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    m: usize,
    #[arg(long = "n-meas", default_value_t = 400)]
    n_meas: usize,
    #[arg(long, default_value_t = 0.1)]
    p: f64,
    #[arg(long = "sigma-e", default_value_t = 0.1)]
    sigma_e: f64,
    #[arg(long = "sigma-n", default_value_t = 0.1)]
    sigma_n: f64,
    #[arg(long = "sigma-r", default_value_t = 1.0)]
    sigma_r: f64,
    #[arg(long, value_parser = parse_policy, default_value = "project")]
    policy: InfeasiblePolicy,
    /// Number of top scores printed per iteration.
    #[arg(long, default_value_t = 5)]
    top: usize,
}

fn parse_policy(s: &str) -> std::result::Result<InfeasiblePolicy, String> {
    match s {
        "project" => Ok(InfeasiblePolicy::Project),
        "zero" => Ok(InfeasiblePolicy::Zero),
        "abort" => Ok(InfeasiblePolicy::Abort),
        _ => Err(format!("unknown policy {s:?} (expected project, zero or abort)")),
    }
}

fn build_spec(args: &SweepArgs) -> Result<ExperimentSpec> {
    let mut spec = match &args.config {
        Some(path) => ExperimentSpec::from_toml_file(path)?,
        None => ExperimentSpec::default(),
    };
    if let Some(v) = args.m {
        spec.m = v;
    }
    if let Some(v) = &args.n_meas {
        spec.n_meas_grid = v.clone();
    }
    if let Some(v) = &args.p {
        spec.p_grid = v.clone();
    }
    if let Some(v) = args.sigma_e {
        spec.sigma_e = v;
    }
    if let Some(v) = args.sigma_n {
        spec.sigma_n = v;
    }
    if let Some(v) = args.sigma_r {
        spec.sigma_r = v;
    }
    if let Some(v) = args.trials {
        spec.trials = v;
    }
    if let Some(v) = args.seed {
        spec.base_seed = v;
    }
    if let Some(v) = &args.algos {
        spec.algorithms = v.clone();
    }
    if let Some(v) = args.policy {
        spec.infeasible_policy = v;
    }
    if args.no_timing {
        spec.timing = false;
    }
    spec.validate()?;
    Ok(spec)
}

fn sweep(args: &SweepArgs) -> Result<()> {
    let spec = build_spec(args)?;
    log::info!("running {} records", spec.n_records());
    let records = run_monte_carlo(&spec)?;
    match &args.out {
        Some(path) => {
            let summary_path = emit_results(&records, args.format, path)?;
            eprintln!("wrote {} and {}", path.display(), summary_path.display());
        }
        None => {
            let stdout = std::io::stdout().lock();
            match args.format {
                OutputFormat::Csv => write_csv(&records, stdout)?,
                OutputFormat::Json => write_json(&records, stdout)?,
            }
        }
    }
    for c in summarize(&records) {
        eprintln!(
            "{:>8} p={:<5} N={:<5} mean {:>8.3} dB  std {:>7.3}  n={} sentinel={} failed={}  median {:.4}s",
            c.algorithm.as_str(),
            c.p,
            c.n_meas,
            c.mean_nmse_db,
            c.std_nmse_db,
            c.count,
            c.sentinel,
            c.failed,
            c.median_wall_time_s
        );
    }
    Ok(())
}

fn top_scores(scores: &DVector<f64>, k: usize) -> String {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx.iter()
        .take(k)
        .map(|&j| format!("{j}:{:.2}", scores[j]))
        .collect::<Vec<_>>()
        .join(" ")
}

fn single(args: &SingleArgs) -> Result<()> {
    let params = ModelParams {
        m: args.m,
        n_meas: args.n_meas,
        p: args.p,
        sigma_e: args.sigma_e,
        sigma_n: args.sigma_n,
        sigma_r: args.sigma_r,
    };
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let signal = sample_sparse_signal(&params, &mut rng)?;
    let meas = generate_measurements(&signal, &params, &mut rng)?;
    println!(
        "m={} N={} p={} sigma_e={} sigma_n={} seed={}",
        args.m, args.n_meas, args.p, args.sigma_e, args.sigma_n, args.seed
    );
    println!("true support ({}): {:?}", signal.n_active(), signal.support());
    println!("sign flips vs noiseless: {:.3}", meas.flip_fraction(&signal.s));

    let config = BhtMleConfig {
        infeasible_policy: args.policy,
        ..BhtMleConfig::default()
    };
    let bht = run_bht_mle(&meas.a_mat, &meas.y, args.sigma_e, args.sigma_n, &config)?;
    println!("\nBHT-MLE iterations");
    println!(" k  alpha  p_hat  thresh  sigma_z  support  newton  feasible  top scores");
    for t in &bht.trace {
        println!(
            "{:>2}  {:.3}  {:.3}  {:>6.3}  {:>7.4}  {:>7}  {:>6}  {:>8}  {}",
            t.k,
            t.alpha,
            t.p_hat,
            t.threshold,
            t.sigma_z,
            t.support_size,
            t.solver_iterations,
            t.feasible,
            top_scores(&t.scores, args.top)
        );
    }
    let detected = bht.support.as_ref().map(|s| s.active_indices()).unwrap_or_default();
    let truth = signal.support();
    let hits = detected.iter().filter(|j| truth.contains(j)).count();
    println!("detected support ({}): {:?}", detected.len(), detected);
    println!(
        "hits {hits}, false alarms {}, misses {}",
        detected.len() - hits,
        truth.len() - hits
    );
    let flags: Vec<&str> = bht.flags.iter().map(|f| f.as_str()).collect();
    println!("solver stop: {}  flags: [{}]", bht.solver.stop, flags.join(", "));
    println!("BHT-MLE NMSE {:.3} dB  ({:.4} s)", nmse_db(&signal.s, &bht.s_hat), bht.wall_time);

    match run_mle_baseline(
        &meas.a_mat,
        &meas.y,
        args.sigma_e,
        args.sigma_n,
        &SolverOptions::default(),
        args.policy,
    ) {
        Ok(mle) => {
            let flags: Vec<&str> = mle.flags.iter().map(|f| f.as_str()).collect();
            println!(
                "MLE     NMSE {:.3} dB  ({:.4} s, {} newton steps, stop: {}, flags: [{}])",
                nmse_db(&signal.s, &mle.s_hat),
                mle.wall_time,
                mle.solver.iterations,
                mle.solver.stop,
                flags.join(", ")
            );
        }
        Err(e) => println!("MLE     failed: {e}"),
    }
    Ok(())
}

fn selftest(seed: u64) -> bool {
    let outcomes = run_selftest(seed);
    for c in &outcomes {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    outcomes.iter().all(|c| c.passed)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();

    match thread_cap_from_env() {
        Ok(Some(n)) => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("could not size worker pool: {e}");
            }
        }
        Ok(None) => {}
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }

    let outcome = match &cli.command {
        Command::Sweep(args) => sweep(args),
        Command::Single(args) => single(args),
        Command::Selftest { seed } => {
            return if selftest(*seed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            };
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
