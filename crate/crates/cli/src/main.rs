use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bft_ensemble::episode::run_episode;
use bft_ensemble::fuzz::{fuzz_campaign, FuzzConfig};
use bft_ensemble::report::{emit_report, verify, DecisionLog, ModuleRow};
use bft_ensemble::scenario::{library, parse_scenario, Scenario};
use clap::{Parser, Subcommand};

const DECISION_LOG: &str = "decision.log";
const EVENT_LOG: &str = "events.log";
const MODULE_LOG: &str = "outputs.log";

/// Deterministic simulator for Byzantine-fault-tolerant decision ensembles.
#[derive(Debug, Parser)]
#[command(name = "bftsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one episode and write its logs.
    Run {
        /// Scenario file, or the name of a bundled scenario.
        scenario: String,
        /// Replace the seed given in the scenario.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for decision.log, events.log and outputs.log.
        #[arg(long)]
        log_dir: Option<PathBuf>,
    },
    /// Run a randomized fault-injection campaign.
    Fuzz {
        scenario: String,
        #[arg(long, default_value_t = 1000)]
        episodes: u64,
        /// Campaign seed; episode i uses stream i.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-check the invariants of a stored decision log.
    Verify { decision_log: PathBuf },
    /// Summarize the logs in a directory written by `run`.
    Report { log_dir: PathBuf },
    /// List the bundled scenarios.
    List,
}

enum Failure {
    Config(String),
    Violation,
}

impl From<String> for Failure {
    fn from(s: String) -> Self {
        Failure::Config(s)
    }
}

fn load_scenario(arg: &str) -> Result<Scenario, String> {
    let path = Path::new(arg);
    if path.exists() {
        return parse_scenario(path).map_err(|e| format!("{arg}: {e}"));
    }
    library::load(arg).ok_or_else(|| {
        format!(
            "{arg}: no such file or bundled scenario (bundled: {})",
            library::NAMES.join(", ")
        )
    })
}

fn read(path: &Path) -> Result<String, String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<(), String> {
    fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))
}

fn run(scenario: &str, seed: Option<u64>, log_dir: Option<&Path>) -> Result<(), Failure> {
    let mut sc = load_scenario(scenario)?;
    if let Some(seed) = seed {
        sc = sc.with_seed(seed);
    }
    let ep = run_episode(&sc);
    let log = ep.parsed_log();
    if let Some(dir) = log_dir {
        fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        write(&dir.join(DECISION_LOG), &ep.decision_log())?;
        write(&dir.join(EVENT_LOG), ep.event_log_text().unwrap_or_default())?;
        write(&dir.join(MODULE_LOG), &ep.module_log())?;
    } else {
        print!("{}", ep.decision_log());
        println!();
    }
    print!("{}", emit_report(&log, &ep.module_rows));
    check(&log)
}

fn check(log: &DecisionLog) -> Result<(), Failure> {
    let v = verify(log);
    for m in &v.malformed {
        eprintln!("malformed: {m}");
    }
    for m in &v.violations {
        eprintln!("violation: {m}");
    }
    if !v.violations.is_empty() {
        Err(Failure::Violation)
    } else if !v.malformed.is_empty() {
        Err(Failure::Config("decision log is malformed".into()))
    } else {
        Ok(())
    }
}

fn fuzz(scenario: &str, episodes: u64, seed: u64) -> Result<(), Failure> {
    let sc = load_scenario(scenario)?;
    let report = fuzz_campaign(&sc, &FuzzConfig::new(episodes, seed)).map_err(|e| e.to_string())?;
    print!("{}", report.render());
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Violation)
    }
}

fn verify_file(path: &Path) -> Result<(), Failure> {
    let log = DecisionLog::parse(&read(path)?).map_err(|e| format!("{}: {e}", path.display()))?;
    check(&log)?;
    println!("{}: {} frames ok", path.display(), log.records.len());
    Ok(())
}

fn report(dir: &Path) -> Result<(), Failure> {
    let path = dir.join(DECISION_LOG);
    let log = DecisionLog::parse(&read(&path)?).map_err(|e| format!("{}: {e}", path.display()))?;
    let modules: Vec<ModuleRow> = match fs::read_to_string(dir.join(MODULE_LOG)) {
        Ok(text) => text.lines().filter_map(ModuleRow::parse).collect(),
        Err(_) => Vec::new(),
    };
    print!("{}", emit_report(&log, &modules));
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Run {
            scenario,
            seed,
            log_dir,
        } => run(scenario, *seed, log_dir.as_deref()),
        Command::Fuzz {
            scenario,
            episodes,
            seed,
        } => fuzz(scenario, *episodes, *seed),
        Command::Verify { decision_log } => verify_file(decision_log),
        Command::Report { log_dir } => report(log_dir),
        Command::List => {
            for name in library::NAMES {
                println!("{name}");
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Violation) => ExitCode::from(2),
    }
}
