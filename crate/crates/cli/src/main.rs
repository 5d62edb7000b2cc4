// SPDX-License-Identifier: Apache-2.0

//! Command-line front end: scenario scripts, bounded exploration, fuzzing,
//! and the attack scenario registry.
//!
//! Exit codes: 0 clean, 2 invariant violation, 3 failed expectation,
//! 4 parse error, 1 usage or I/O failure.

use casim_core::adversary;
use casim_core::explore::{explore, ExploreConfig};
use casim_core::fuzz::fuzz;
use casim_core::script::{parse_script, Runner};
use casim_core::{Knobs, Sim, SimConfig};
use clap::{Parser, Subcommand};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "casim", version, about = "Confidential accelerator attachment simulator")]
struct Cli {
    /// Pre-map all realm memory into the attached device's stage-2 tables
    /// at creation time.
    #[arg(long, global = true)]
    opt: bool,
    /// Write the step trace as JSON Lines to this path ("-" for stdout).
    #[arg(long, global = true)]
    trace: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a scenario script.
    Run {
        script: PathBuf,
    },
    /// Exhaustively explore all action sequences up to a depth bound.
    Explore {
        #[arg(long, default_value_t = 5)]
        depth: usize,
        /// JSON file overriding the exploration configuration.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Random interleaving of honest and adversarial actions.
    Fuzz {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        steps: u64,
    },
    /// List the registered attack scenarios.
    Scenarios,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("casim: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    match cli.command {
        Command::Run { script } => {
            let text = fs::read_to_string(&script)
                .map_err(|e| format!("{}: {e}", script.display()))?;
            let lines = match parse_script(&text) {
                Ok(l) => l,
                Err(e) => {
                    eprintln!("casim: {}: {e}", script.display());
                    return Ok(ExitCode::from(4));
                }
            };
            let dir = script
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .unwrap_or(Path::new("."));
            let sim = Sim::new(SimConfig {
                opt: cli.opt,
                ..SimConfig::default()
            });
            let mut runner = Runner::new(sim, dir);
            let outcome = runner.run(&lines);
            write_trace(cli.trace.as_deref(), outcome.trace.iter().map(|t| t.to_json_line()))?;
            if let Some(failure) = &outcome.failure {
                eprintln!("casim: {failure}");
            }
            if let Some(report) = &outcome.final_invariants {
                eprintln!("invariants: {}", report.summary());
            }
            Ok(ExitCode::from(outcome.exit_code as u8))
        }
        Command::Explore { depth, config } => {
            let mut cfg = match config {
                Some(path) => {
                    let text = fs::read_to_string(&path)
                        .map_err(|e| format!("{}: {e}", path.display()))?;
                    parse_explore_config(&text)?
                }
                None => ExploreConfig::default(),
            };
            cfg.depth = depth;
            cfg.opt = cli.opt || cfg.opt;
            let outcome = explore(&cfg).map_err(|e| e.name().to_string())?;
            println!(
                "explored {} states over {} transitions at depth {depth}",
                outcome.states, outcome.transitions
            );
            if outcome.violations.is_empty() {
                println!("no invariant violations");
                return Ok(ExitCode::SUCCESS);
            }
            for v in &outcome.violations {
                println!("violation {} at depth {}: {}", v.check, v.depth, v.witness);
                for (i, step) in v.path.iter().enumerate() {
                    println!("  step {i}: {step}");
                }
            }
            Ok(ExitCode::from(2))
        }
        Command::Fuzz { seed, steps } => {
            let cfg = ExploreConfig {
                opt: cli.opt,
                ..ExploreConfig::default()
            };
            let outcome = fuzz(seed, steps, &cfg);
            write_trace(cli.trace.as_deref(), outcome.trace.iter().map(|t| t.to_json_line()))?;
            if let Some((step, check, witness)) = &outcome.violation {
                println!("violation {check} at step {step}: {witness}");
            } else {
                println!("{steps} steps clean; final digest {}",
                    outcome.digests.last().map(|d| d.to_hex()).unwrap_or_default());
            }
            for v in &outcome.trace_violations {
                println!("trace violation {} at step {}: {}", v.check, v.step, v.detail);
            }
            Ok(ExitCode::from(outcome.exit_code as u8))
        }
        Command::Scenarios => {
            for s in adversary::scenarios() {
                println!("{:28} [{}] {}", s.name, s.actor.name(), s.description);
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn write_trace(
    path: Option<&Path>,
    lines: impl Iterator<Item = String>,
) -> Result<(), String> {
    let Some(path) = path else { return Ok(()) };
    if path.as_os_str() == "-" {
        let stdout = std::io::stdout();
        let mut out = stdout.lock();
        for line in lines {
            writeln!(out, "{line}").map_err(|e| e.to_string())?;
        }
        return Ok(());
    }
    let mut file = fs::File::create(path).map_err(|e| format!("{}: {e}", path.display()))?;
    for line in lines {
        writeln!(file, "{line}").map_err(|e| e.to_string())?;
    }
    Ok(())
}

/// Exploration config files are JSON with any subset of the fields:
/// `{"depth": 5, "max_states": 20000000, "stop_on_first": false,
///   "knobs": {"skip_attest_check": true, ...}, "opt": false,
///   "hv_ipas": [8192], "ipas": [8192, 12288]}`
fn parse_explore_config(text: &str) -> Result<ExploreConfig, String> {
    let v: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let mut cfg = ExploreConfig::default();
    if let Some(d) = v.get("depth").and_then(|x| x.as_u64()) {
        cfg.depth = d as usize;
    }
    if let Some(m) = v.get("max_states").and_then(|x| x.as_u64()) {
        cfg.max_states = m as usize;
    }
    if let Some(s) = v.get("stop_on_first").and_then(|x| x.as_bool()) {
        cfg.stop_on_first = s;
    }
    if let Some(o) = v.get("opt").and_then(|x| x.as_bool()) {
        cfg.opt = o;
    }
    if let Some(k) = v.get("knobs") {
        let knobs: Knobs = serde_json::from_value(k.clone()).map_err(|e| e.to_string())?;
        cfg.knobs = knobs;
    }
    if let Some(list) = v.get("hv_ipas").and_then(|x| x.as_array()) {
        cfg.hv_ipas = list
            .iter()
            .filter_map(|x| x.as_u64())
            .map(casim_core::Ipa)
            .collect();
    }
    if let Some(list) = v.get("ipas").and_then(|x| x.as_array()) {
        cfg.ipas = list
            .iter()
            .filter_map(|x| x.as_u64())
            .map(casim_core::Ipa)
            .collect();
    }
    Ok(cfg)
}
