use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use subnetdp::diagnostics::{mean_present, memory_report};
use subnetdp::engine::{self, assignment_for, ExperimentConfig};
use subnetdp::gradcheck::{self, CheckResult};
use subnetdp::masking::Strategy;
use subnetdp::{Error, ErrorCategory, Result};

#[derive(Parser)]
#[command(name = "subnetdp", version, about = "Subnetwork data-parallel training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write a run directory.
    Run {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
    },
    /// Train every (strategy, P) cell and tabulate final accuracy.
    Sweep {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Overlap values P, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        overlaps: Vec<usize>,
        /// Restrict to one strategy (default: both).
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
    },
    /// Finite-difference check of every operator and model gradient.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sampled coordinates per parameter tensor of the desk-scale model.
        #[arg(long, default_value_t = 3)]
        coords: usize,
    },
    /// Assign masks for a configuration and check the coverage invariants.
    ValidateMasks {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
    },
    /// Short trainings with gradient alignment logging.
    Align {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Overlap values P, comma separated (default: the config's P).
        #[arg(long, value_delimiter = ',')]
        overlaps: Vec<usize>,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
    },
    /// Summarize a run directory or a sweep directory.
    Report {
        run_dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config thread count.
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Neuron,
    Block,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Neuron => Strategy::Neuron,
            StrategyArg::Block => Strategy::Block,
        }
    }
}

fn load(path: &Path, common: &Common, strategy: Option<StrategyArg>) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(threads) = common.threads {
        config.threads = threads;
    }
    if let Some(s) = strategy {
        config.strategy = s.into();
    }
    config.validate()?;
    Ok(config)
}

fn out_dir(common: &Common, kind: &str, config: &Path) -> PathBuf {
    common.out.clone().unwrap_or_else(|| {
        let stem = config.file_stem().and_then(|s| s.to_str()).unwrap_or("config");
        PathBuf::from(kind).join(stem)
    })
}

fn strategies(arg: Option<StrategyArg>) -> Vec<Strategy> {
    match arg {
        Some(s) => vec![s.into()],
        None => vec![Strategy::Neuron, Strategy::Block],
    }
}

fn print_checks(results: &[CheckResult]) -> bool {
    let mut ok = true;
    for r in results {
        let tag = if r.passed() { "PASS" } else { "FAIL" };
        println!("{tag} {:<40} coords={:<6} max_rel_err={:.3e}", r.name, r.checked, r.max_rel_err);
        ok &= r.passed();
    }
    ok
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { config, common, strategy } => {
            let cfg = load(&config, &common, strategy)?;
            let out = out_dir(&common, "runs", &config);
            let summary = engine::execute(&cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            eprintln!("run written to {}", out.display());
        }
        Command::Sweep {
            config,
            common,
            overlaps,
            strategy,
        } => {
            let cfg = load(&config, &common, None)?;
            let out = out_dir(&common, "sweeps", &config);
            let table = engine::sweep(&cfg, &overlaps, &strategies(strategy), Some(&out))?;
            print!("{}", table.to_markdown());
            eprintln!("sweep written to {}", out.display());
        }
        Command::GradCheck { seed, coords } => {
            let mut ok = print_checks(&gradcheck::operator_suite(seed)?);
            ok &= print_checks(&gradcheck::model_suite(seed)?);
            ok &= print_checks(&gradcheck::desk_model_suite(seed, coords)?);
            if !ok {
                eprintln!("gradient check failed (tolerance {:e})", gradcheck::FD_TOLERANCE);
                return Ok(exit(ErrorCategory::Numerical));
            }
        }
        Command::ValidateMasks { config, common, strategy } => {
            let cfg = load(&config, &common, strategy)?;
            let (topology, assignment) = assignment_for(&cfg)?;
            let report = assignment.validate(&topology)?;
            let memory = memory_report(&topology, &assignment, cfg.optimizer.state_per_param());
            println!(
                "{}",
                serde_json::to_string_pretty(&serde_json::json!({
                    "strategy": cfg.strategy,
                    "workers": cfg.workers,
                    "overlap": cfg.overlap,
                    "units": assignment.units().len(),
                    "validation": report,
                    "memory": memory,
                }))?
            );
            if let Some(out) = &common.out {
                fs::create_dir_all(out)?;
                fs::write(out.join("masks.json"), assignment.to_json()?)?;
                fs::write(out.join("memory.json"), serde_json::to_string_pretty(&memory)?)?;
            }
        }
        Command::Align {
            config,
            common,
            overlaps,
            strategy,
        } => {
            let cfg = load(&config, &common, None)?;
            let overlaps = if overlaps.is_empty() { vec![cfg.overlap] } else { overlaps };
            let samples = engine::alignment_sweep(&cfg, &overlaps, &strategies(strategy))?;
            let out = out_dir(&common, "align", &config);
            fs::create_dir_all(&out)?;
            engine::write_alignment_csv(&samples, &out.join(engine::ALIGNMENT_FILE))?;
            println!("strategy,overlap,mean_cosine,samples,absent");
            for st in strategies(strategy) {
                for &p in &overlaps {
                    let ratio = p as f64 / cfg.workers as f64;
                    let cell: Vec<_> = samples
                        .iter()
                        .filter(|s| s.strategy == st && s.overlap == ratio)
                        .cloned()
                        .collect();
                    let mean = mean_present(&cell).map_or("NA".to_string(), |m| format!("{m:.4}"));
                    let absent = cell.iter().filter(|s| s.cosine.is_none()).count();
                    println!("{st},{p},{mean},{},{absent}", cell.len());
                }
            }
            eprintln!("alignment written to {}", out.display());
        }
        Command::Report { run_dir, out } => {
            let json = if run_dir.join("results.json").is_file() {
                let text = fs::read_to_string(run_dir.join("results.json"))?;
                let table: engine::SweepTable = serde_json::from_str(&text)
                    .map_err(|e| Error::Data(format!("{}: {e}", run_dir.join("results.json").display())))?;
                print!("{}", table.to_markdown());
                serde_json::to_string_pretty(&table)?
            } else {
                let report = engine::report(&run_dir)?;
                let json = serde_json::to_string_pretty(&report)?;
                println!("{json}");
                json
            };
            if let Some(out) = out {
                fs::create_dir_all(&out)?;
                fs::write(out.join("report.json"), json)?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn exit(category: ErrorCategory) -> ExitCode {
    ExitCode::from(category.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit(e.category())
        }
    }
}
