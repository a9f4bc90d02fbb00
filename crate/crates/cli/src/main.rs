//! `pinnweights run | probe | compare`.
//!
//! Exit codes: 0 success, 1 run failure, 2 configuration error, 3 a
//! declared ordering check failed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pinnweights::balancing::Strategy;
use pinnweights::experiment::{
    compare, output_dir, run, CompareError, OrderingCheck, ProblemKind, RunConfig, RunError, RunReport,
};

const RUN_FAILURE: u8 = 1;
const CONFIG_ERROR: u8 = 2;
const ORDERING_FAILURE: u8 = 3;

#[derive(Parser)]
#[command(name = "pinnweights", version, about = "Loss-weighting experiments for small physics-informed networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every repetition of a configuration.
    Run(RunArgs),
    /// Measure how residual gradients scale with the residual frequency.
    Probe(RunArgs),
    /// Tabulate finished runs per strategy and check orderings.
    Compare(CompareArgs),
    /// List the built-in presets.
    Presets,
}

#[derive(Args)]
struct RunArgs {
    /// Configuration file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset.
    #[arg(long)]
    preset: Option<String>,
    /// Seed of the first repetition.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of repetitions with consecutive seeds.
    #[arg(long)]
    repetitions: Option<usize>,
    /// Weighting strategy, overriding the configuration.
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Output directory. Defaults to `<root>/<name>-<strategy>` where the
    /// root is $PINNWEIGHTS_OUTPUT_ROOT or `runs`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// Run directories.
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
    /// Ordering on strategy means, e.g. `rel_l2:inverse-dirichlet <= 0.3*uniform`.
    #[arg(long = "check")]
    checks: Vec<OrderingCheck>,
    /// Also write the table as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load(args: &RunArgs, default_preset: &str) -> Result<(RunConfig, String), String> {
    let (mut cfg, name) = match (&args.config, &args.preset) {
        (Some(path), _) => {
            let stem = path.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
            (RunConfig::from_file(path).map_err(|e| e.to_string())?, stem)
        }
        (None, Some(p)) => (RunConfig::preset(p).map_err(|e| e.to_string())?, p.clone()),
        (None, None) => (RunConfig::preset(default_preset).map_err(|e| e.to_string())?, default_preset.to_string()),
    };
    if let Some(s) = args.strategy {
        cfg.training.strategy = s;
    }
    let first = args.seed.unwrap_or_else(|| cfg.seeds.first().copied().unwrap_or(0));
    match args.repetitions {
        Some(0) => return Err("--repetitions must be at least 1".into()),
        Some(n) => cfg.seeds = (first..first + n as u64).collect(),
        None if args.seed.is_some() => cfg.seeds = vec![first],
        None => {}
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok((cfg, name))
}

fn report(r: &RunReport) {
    for s in &r.seeds {
        match s.rel_l1 {
            Some(l1) => println!("seed {}: rel_l2 {:.4e} rel_l1 {:.4e}", s.seed, s.rel_l2, l1),
            None => println!("seed {}: rel_l2 {:.4e}", s.seed, s.rel_l2),
        }
    }
    for p in &r.probes {
        let ratios: Vec<String> = p.ratios.iter().map(|x| format!("{x:.4e}")).collect();
        println!("m={}: k0 {:?} ratios [{}] slope {:.3}", p.m, p.k0, ratios.join(", "), p.slope);
    }
    println!("wrote {}", r.dir.display());
}

fn execute(args: &RunArgs, probe: bool) -> u8 {
    let default_preset = if probe { "stiffness-probe" } else { "sobolev-desk" };
    let (cfg, name) = match load(args, default_preset) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return CONFIG_ERROR;
        }
    };
    if probe != (cfg.problem == ProblemKind::StiffnessProbe) {
        let hint = if probe { "use `run`" } else { "use `probe`" };
        eprintln!("error: problem {} does not fit this subcommand; {hint}", cfg.problem);
        return CONFIG_ERROR;
    }
    if args.dry_run {
        print!("{}", cfg.to_toml());
        return 0;
    }
    let label = if probe { name } else { format!("{name}-{}", cfg.strategy()) };
    let dir = output_dir(args.out.as_deref(), &label);
    match run(&cfg, &dir) {
        Ok(r) => {
            report(&r);
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                CONFIG_ERROR
            } else {
                if matches!(e, RunError::Failed { .. }) {
                    eprintln!("partial results in {}", dir.display());
                }
                RUN_FAILURE
            }
        }
    }
}

fn execute_compare(args: &CompareArgs) -> u8 {
    let r = match compare(&args.dirs, &args.checks) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return match e {
                CompareError::Input(_) => CONFIG_ERROR,
                _ => RUN_FAILURE,
            };
        }
    };
    println!("problem {}", r.problem);
    println!("{:<18} {:>4} {:>24} {:>24}", "strategy", "n", "rel_l2", "rel_l1");
    for row in &r.rows {
        let l1 = row
            .rel_l1
            .map_or("-".to_string(), |(m, s)| format!("{m:.4e} ± {s:.2e}"));
        println!(
            "{:<18} {:>4} {:>24} {:>24}",
            row.strategy,
            row.repetitions,
            format!("{:.4e} ± {:.2e}", row.rel_l2.0, row.rel_l2.1),
            l1
        );
    }
    for o in &r.orderings {
        let verdict = if o.passed { "pass" } else { "FAIL" };
        println!("{verdict}: {} ({:.4e} vs {:.4e})", o.check, o.lhs, o.check.factor * o.rhs);
    }
    if let Some(out) = &args.out {
        if let Err(e) = r.write_csv(out) {
            eprintln!("error: {e}");
            return RUN_FAILURE;
        }
    }
    if r.all_passed() {
        0
    } else {
        ORDERING_FAILURE
    }
}

fn list_presets() -> u8 {
    for name in pinnweights::experiment::preset_names() {
        println!("{name}");
    }
    0
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { CONFIG_ERROR } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let code = match &cli.command {
        Command::Run(a) => execute(a, false),
        Command::Probe(a) => execute(a, true),
        Command::Compare(a) => execute_compare(a),
        Command::Presets => list_presets(),
    };
    ExitCode::from(code)
}
