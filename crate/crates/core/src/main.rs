use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cefl::allocator::{brute_force_allocate, linear_search_allocate, AllocationPlan};
use cefl::channel::{achievable_rate, comm_time};
use cefl::fedmath::{global_loss, optimal_value, smoothness_constants, ModelVector};
use cefl::harness::analysis::{min_rounds_bound, rounds_to_reach, run_rhos};
use cefl::harness::config::SimConfig;
use cefl::harness::instance::AllocationInstance;
use cefl::harness::report::{emit_csv, write_csv};
use cefl::harness::{build_federation, envelope_check, run_sweep, sweep_seeds};
use cefl::{Algorithm, Error};

#[derive(Parser)]
#[command(
    name = "cefl",
    version,
    about = "Censored federated learning over wireless uplinks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write its per-round CSV.
    Run(RunArgs),
    /// Run consecutive seeds in parallel, one CSV per seed.
    Sweep(SweepArgs),
    /// Solve a single allocation instance.
    Allocate(AllocateArgs),
    /// Check the seed-mean gap against the linear-rate envelope.
    Verify(SweepArgs),
    /// Print L, mu, eta and the optimum of a configuration.
    Oracle(ConfigArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Simulation config (TOML); defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Overrides {
    #[command(flatten)]
    base: ConfigArgs,
    #[arg(long, value_parser = parse_algo)]
    algo: Option<Algorithm>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    /// Output directory for `seed-<n>.csv` files.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AllocateArgs {
    /// Instance file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Also solve by exhaustive search and compare.
    #[arg(long)]
    oracle: bool,
}

fn parse_algo(s: &str) -> Result<Algorithm, String> {
    match s {
        "cefl" => Ok(Algorithm::Cefl),
        "fedavg-uniform" => Ok(Algorithm::FedavgUniform),
        "cefl-uniform" => Ok(Algorithm::CeflUniform),
        other => Err(format!(
            "unknown algorithm {other:?}; expected cefl, fedavg-uniform or cefl-uniform"
        )),
    }
}

/// Exit status for a failed command.
enum Failure {
    Error(Error),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

type Outcome = Result<(), Failure>;

fn load(args: &ConfigArgs) -> Result<SimConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => SimConfig::load(path)?,
        None => SimConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_with(o: &Overrides) -> Result<SimConfig, Error> {
    let mut cfg = load(&o.base)?;
    if let Some(algo) = o.algo {
        cfg.algorithm = algo;
    }
    if let Some(rounds) = o.rounds {
        cfg.rounds = rounds;
    }
    if o.epsilon.is_some() {
        cfg.epsilon = o.epsilon;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: RunArgs) -> Outcome {
    let cfg = load_with(&args.overrides)?;
    let traces = cefl::run_simulation(&cfg)?;
    match &args.out {
        Some(path) => {
            emit_csv(&traces, path)?;
            let last = traces.last();
            eprintln!(
                "{} rounds, final loss {}, cumulative uploads {} -> {}",
                traces.len(),
                last.map_or(f64::NAN, |t| t.loss),
                traces.iter().map(|t| t.uploads_attempted).sum::<usize>(),
                path.display()
            );
        }
        None => write_csv(&traces, std::io::stdout().lock()).map_err(|source| Error::Csv {
            path: PathBuf::from("<stdout>"),
            source,
        })?,
    }
    Ok(())
}

fn sweep(args: SweepArgs) -> Outcome {
    let cfg = load_with(&args.overrides)?;
    let dir = args.out.unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let seeds = sweep_seeds(&cfg, args.seeds);
    let runs = run_sweep(&cfg, &seeds)?;
    for (seed, traces) in seeds.iter().zip(&runs) {
        let path = dir.join(format!("seed-{seed}.csv"));
        emit_csv(traces, &path)?;
        let reached = cfg.epsilon.and_then(|eps| rounds_to_reach(traces, eps));
        println!(
            "seed {seed}: {} rounds, final gap {}, reached epsilon at {}",
            traces.len(),
            traces
                .last()
                .and_then(|t| t.gap)
                .map_or("-".into(), |g| format!("{g:e}")),
            reached.map_or("-".into(), |r| r.to_string())
        );
    }
    Ok(())
}

fn verify(args: SweepArgs) -> Outcome {
    let cfg = load_with(&args.overrides)?;
    let seeds = sweep_seeds(&cfg, args.seeds);
    let report = envelope_check(&cfg, &seeds)?;
    for c in report.failures().take(10) {
        println!(
            "round {}: mean gap {:e} exceeds envelope {:e} + slack {:e}",
            c.round, c.observed, c.bound, c.slack
        );
    }
    if let Some(eps) = cfg.epsilon {
        // Round bound at the smallest per-round factor of the first seed.
        let fed = build_federation(&cfg)?;
        let run = cefl::run_simulation(&cfg)?;
        let rho = run_rhos(&fed.constants, &fed.weights, &run)?
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        let f1 = run.first().and_then(|t| t.gap_before).unwrap_or(f64::NAN);
        match min_rounds_bound(rho, eps, f1) {
            Ok(k) => println!(
                "seed {}: rho_min {rho:.6}, bound {k} rounds, observed {}",
                cfg.seed,
                rounds_to_reach(&run, eps).map_or("-".into(), |r| r.to_string())
            ),
            Err(e) => println!("seed {}: no round bound ({e})", cfg.seed),
        }
    }
    let failed = report.failures().count();
    println!(
        "envelope check over {} seeds, {} rounds: {}",
        report.seeds,
        report.rounds.len(),
        if report.pass {
            "pass".to_string()
        } else {
            format!("FAIL ({failed} rounds)")
        }
    );
    if report.pass {
        Ok(())
    } else {
        Err(Failure::Verification(format!(
            "{failed} rounds above the envelope"
        )))
    }
}

fn print_plan(inst: &AllocationInstance, plan: &AllocationPlan) -> Result<(), Error> {
    let budget = inst.budget()?;
    println!("client  gain          admitted  bandwidth_hz      power_w  comm_time_s");
    for c in &inst.clients {
        let a = plan.get(c.id).copied().unwrap_or_default();
        let t = if a.admitted {
            comm_time(
                budget.packet_bits,
                achievable_rate(a.bandwidth, a.power, c.gain, inst.noise_psd())?,
            )
        } else {
            f64::NAN
        };
        println!(
            "{:<7} {:<13e} {:<9} {:<17} {:<8} {}",
            c.id, c.gain, a.admitted, a.bandwidth, a.power, t
        );
    }
    println!(
        "admitted {} of {}, bandwidth used {} of {} Hz",
        plan.admitted_count(),
        inst.clients.len(),
        plan.bandwidth_used(),
        budget.total_bandwidth
    );
    Ok(())
}

fn allocate(args: AllocateArgs) -> Outcome {
    let inst = AllocationInstance::load(&args.config)?;
    let budget = inst.budget()?;
    let plan = linear_search_allocate(&inst.realizations(), &budget, inst.noise_psd());
    print_plan(&inst, &plan)?;
    if args.oracle {
        let best = brute_force_allocate(&inst.realizations(), &budget, inst.noise_psd())?;
        println!("exhaustive search admits {}", best.admitted_count());
        if best.admitted_count() != plan.admitted_count() {
            return Err(Failure::Verification(
                "linear search is not optimal on this instance".into(),
            ));
        }
    }
    Ok(())
}

fn oracle(args: ConfigArgs) -> Outcome {
    let cfg = load(&args)?;
    let fed = build_federation(&cfg)?;
    let spec = cfg.loss_spec()?;
    let k = smoothness_constants(&fed.datasets, &spec)?;
    let opt = optimal_value(&fed.datasets, &spec)?;
    let f0 = global_loss(&ModelVector::zeros(cfg.dim), &fed.datasets, &spec)?;
    println!("L           {}", k.l);
    println!("mu          {}", k.mu);
    println!("kappa       {}", k.l / k.mu);
    println!("eta         {}", fed.eta);
    println!("f_star      {}", opt.f_star);
    println!("grad_norm   {:e}", opt.grad_norm);
    println!("f(w0)       {}", f0);
    Ok(())
}

fn exit_code(failure: Failure) -> ExitCode {
    match failure {
        Failure::Verification(msg) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(3)
        }
        Failure::Error(e) => {
            eprintln!("error: {e}");
            match e {
                Error::OracleFailure(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn main() -> ExitCode {
    // Exit code 2 is reserved for oracle failures, so usage errors map to 1.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::Allocate(a) => allocate(a),
        Command::Verify(a) => verify(a),
        Command::Oracle(a) => oracle(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => exit_code(f),
    }
}
