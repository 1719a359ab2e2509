//! Command-line front end for the camera planning stack: closed-loop runs,
//! mode comparisons, and map-update benchmarks, all writing their artifacts
//! under a chosen output directory.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use skyshot_core::harness::{bench_to_dir, compare_to_dir, run_to_dir, HarnessError, RunMode};
use skyshot_core::scenario::{load_scenario, LoadedScenario, ScenarioError};

#[derive(Parser)]
#[command(name = "skyshot", version, about = "Closed-loop aerial camera planning runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario in one mode and write report, cycle CSV, and timing CSV.
    Run {
        /// Scenario TOML file.
        #[arg(long)]
        scenario: PathBuf,
        /// Map source: "online" (build from scans) or "gt-map" (precomputed).
        #[arg(long)]
        mode: String,
        /// Actor source: "gt", "noisy:<amp>", or "kf".
        #[arg(long, default_value = "gt")]
        actor: String,
        /// Noise seed. Defaults to the seed recorded in the scenario file.
        #[arg(long)]
        seed: Option<u64>,
        /// Overlap scan integration with planning instead of running them
        /// back to back.
        #[arg(long)]
        overlap: bool,
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the same scenario under two modes and write a paired summary.
    Compare {
        /// Scenario TOML file.
        #[arg(long)]
        scenario: PathBuf,
        /// Baseline mode as "<map>/<actor>", e.g. "gt-map/gt".
        #[arg(long)]
        a: String,
        /// Comparison mode, same grammar as --a.
        #[arg(long)]
        b: String,
        /// Noise seed. Defaults to the seed recorded in the scenario file.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fly the scripted route and time every incremental map update against
    /// periodic from-scratch rebuilds.
    BenchMap {
        /// Scenario TOML file.
        #[arg(long)]
        scenario: PathBuf,
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn fail(code: u8, err: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(code)
}

fn config_err(err: ScenarioError) -> ExitCode {
    fail(EXIT_CONFIG, err)
}

/// Runtime failures exit 3; a bad mode token or scenario reference embedded
/// in the run is still a config mistake and exits 2.
fn harness_err(err: HarnessError) -> ExitCode {
    match err {
        HarnessError::Scenario(_) | HarnessError::Mode(_) => fail(EXIT_CONFIG, err),
        other => fail(EXIT_RUNTIME, other),
    }
}

fn load(path: &PathBuf) -> Result<LoadedScenario, ExitCode> {
    load_scenario(path).map_err(config_err)
}

fn parse_mode(token: &str) -> Result<RunMode, ExitCode> {
    token.parse::<RunMode>().map_err(|e| fail(EXIT_CONFIG, e))
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { scenario, mode, actor, seed, overlap, out } => {
            let loaded = match load(&scenario) {
                Ok(l) => l,
                Err(code) => return code,
            };
            let mode = match parse_mode(&format!("{mode}/{actor}")) {
                Ok(m) => m,
                Err(code) => return code,
            };
            let seed = seed.unwrap_or(loaded.scenario.seed);
            match run_to_dir(&loaded, mode, seed, overlap, &out) {
                Ok(report) => {
                    let ag = &report.aggregates;
                    println!(
                        "{}: {} cycles ({} recorded), avg cost {:.4}, min dist {:.3}, wrote {}",
                        report.scenario,
                        report.cycles,
                        ag.recorded_cycles,
                        ag.avg_cost,
                        ag.min_dist,
                        out.display()
                    );
                    ExitCode::SUCCESS
                }
                Err(err) => harness_err(err),
            }
        }
        Command::Compare { scenario, a, b, seed, out } => {
            let loaded = match load(&scenario) {
                Ok(l) => l,
                Err(code) => return code,
            };
            let (mode_a, mode_b) = match (parse_mode(&a), parse_mode(&b)) {
                (Ok(a), Ok(b)) => (a, b),
                (Err(code), _) | (_, Err(code)) => return code,
            };
            let seed = seed.unwrap_or(loaded.scenario.seed);
            match compare_to_dir(&loaded, mode_a, mode_b, seed, &out) {
                Ok(cmp) => {
                    let s = &cmp.summary;
                    println!(
                        "{}: cost ratio b/a = {:.4} (a {} {:.4}, b {} {:.4}), wrote {}",
                        s.scenario,
                        s.cost_ratio,
                        s.mode_a,
                        s.a.avg_cost,
                        s.mode_b,
                        s.b.avg_cost,
                        out.display()
                    );
                    ExitCode::SUCCESS
                }
                Err(err) => harness_err(err),
            }
        }
        Command::BenchMap { scenario, out } => {
            let loaded = match load(&scenario) {
                Ok(l) => l,
                Err(code) => return code,
            };
            match bench_to_dir(&loaded, &out) {
                Ok(report) => {
                    let s = &report.summary;
                    println!(
                        "{}: {} scans, first {:.2} ms, tail median {:.2} ms, wrote {}",
                        report.scenario,
                        s.scans,
                        s.first_scan_ms,
                        s.median_tail_ms,
                        out.display()
                    );
                    ExitCode::SUCCESS
                }
                Err(err) => harness_err(err),
            }
        }
    }
}
