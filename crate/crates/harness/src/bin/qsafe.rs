use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use qsafe_harness::report::PhaseStats;
use qsafe_harness::{emit_report, run_case, Mode, Side, TestCase, Testbed, TopologyConfig};

#[derive(Parser)]
#[command(name = "qsafe", version, about = "Run key-establishment scenarios against a topology")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Inproc,
    Net,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Inproc => Mode::InProc,
            ModeArg::Net => Mode::Net,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Execute test cases and check assigned level and key agreement.
    Run {
        #[arg(long)]
        topology: PathBuf,
        /// Case id from the topology file; repeatable. Defaults to every case.
        #[arg(long = "case")]
        cases: Vec<String>,
        #[arg(long, default_value_t = 100)]
        iterations: usize,
        #[arg(long, value_enum, default_value = "inproc")]
        mode: ModeArg,
        /// Directory for samples.csv and summary.json.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Parse and validate a topology file.
    Check {
        #[arg(long)]
        topology: PathBuf,
    },
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Check { topology } => match TopologyConfig::load(&topology) {
            Ok(config) => {
                let qn = config.nodes.iter().filter(|n| n.kind.is_quantum()).count();
                println!(
                    "{}: {} nodes ({qn} QN), {} links, {} cases",
                    topology.display(),
                    config.nodes.len(),
                    config.links.len(),
                    config.cases.len()
                );
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("{e}");
                ExitCode::from(2)
            }
        },
        Command::Run {
            topology,
            cases,
            iterations,
            mode,
            report,
            seed,
        } => run(topology, cases, iterations, mode.into(), report, seed),
    }
}

fn run(topology: PathBuf, cases: Vec<String>, iterations: usize, mode: Mode, report: Option<PathBuf>, seed: u64) -> ExitCode {
    let config = match TopologyConfig::load(&topology) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    let bed = match Testbed::start(&config, mode, seed) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    let selected: Vec<TestCase> = if cases.is_empty() {
        TestCase::all_from_config(&bed)
    } else {
        match cases.iter().map(|id| TestCase::from_config(&bed, id)).collect() {
            Ok(v) => v,
            Err(e) => {
                eprintln!("{e}");
                return ExitCode::from(2);
            }
        }
    };

    let mut failed = false;
    let mut samples = Vec::new();
    for case in &selected {
        match run_case(&bed, case, iterations) {
            Ok(run) => {
                let e2e = |side: Side| {
                    let v: Vec<f64> = run.samples.iter().filter(|s| s.side == side).map(|s| s.t_e2e).collect();
                    PhaseStats::of(&v).map(|s| s.median).unwrap_or(0.0)
                };
                println!(
                    "{} {}->{} {}: PASS {}/{} (median e2e initiator {:.2} ms, target {:.2} ms, {mode})",
                    case.id,
                    case.initiator,
                    case.target,
                    case.expected,
                    run.passed,
                    run.iterations,
                    e2e(Side::Initiator),
                    e2e(Side::Target),
                );
                samples.extend(run.samples);
            }
            Err(e) => {
                println!("{} {}->{} {}: FAIL {e}", case.id, case.initiator, case.target, case.expected);
                failed = true;
            }
        }
    }

    if let Some(dir) = report {
        match emit_report(&samples, &dir) {
            Ok(files) => println!("report: {} {}", files.csv.display(), files.summary.display()),
            Err(e) => {
                eprintln!("report: {e}");
                failed = true;
            }
        }
    }
    if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
