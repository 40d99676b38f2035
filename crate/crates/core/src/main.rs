use std::fs::{self, File};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use robust_comp::config::{load_config_with_overrides, ScenarioConfig};
use robust_comp::sim::{run_simulation, sweep, write_outputs, write_resolved_config, write_sweep, SweepAxis};
use robust_comp::validate::run_checks;

#[derive(Parser)]
#[command(version, about = "Blockage-robust CoMP beamforming simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML scenario file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set tradeoff_v=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Replication count (same as `--set replications=R`).
    #[arg(long)]
    reps: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario and write slots.csv, summary.csv and the resolved config.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// One run per axis value; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// V, q, L or policy.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values, e.g. `0.1,1,10` or `fixed:2,cb,full_jt`.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
    },
    /// Runs the property checks on small instances; nonzero exit on a breach.
    Validate {
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common) -> Result<ScenarioConfig, String> {
    let text = match &common.config {
        Some(p) => fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?,
        None => String::new(),
    };
    let mut overrides = common.overrides.clone();
    if let Some(r) = common.reps {
        overrides.push(format!("replications={r}"));
    }
    load_config_with_overrides(&text, &overrides).map_err(|e| e.to_string())
}

fn print_summary(label: &str, s: &robust_comp::sim::RunSummary) {
    let dbm = s.avg_power_dbm().map_or("-inf".to_string(), |d| format!("{d:.2}"));
    println!(
        "{label}: power {:.4e} mW ({dbm} dBm), max Pr[Q>=th] {:.4}, mean outage rate {:.4}, unconverged slots {}",
        s.avg_power_mw,
        s.prob_backlog_exceeds.iter().copied().fold(0.0, f64::max),
        s.outage_rate.iter().sum::<f64>() / s.outage_rate.len().max(1) as f64,
        s.unconverged_slots,
    );
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    match cli.command {
        Command::Run { common, out } => {
            let cfg = resolve(&common)?;
            let res = run_simulation(&cfg).map_err(|e| e.to_string())?;
            write_outputs(&out, &cfg, &res).map_err(|e| e.to_string())?;
            print_summary(&cfg.policy().to_string(), &res.summary);
        }
        Command::Sweep { common, out, axis, values } => {
            let cfg = resolve(&common)?;
            let points = sweep(&cfg, axis, &values);
            fs::create_dir_all(&out).map_err(|e| format!("{}: {e}", out.display()))?;
            let path = out.join("sweep.csv");
            let file = File::create(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            write_sweep(file, axis, &points).map_err(|e| format!("{}: {e}", path.display()))?;
            write_resolved_config(&out, &cfg).map_err(|e| e.to_string())?;
            for p in &points {
                match &p.result {
                    Ok(s) => print_summary(&format!("{axis}={}", p.value), s),
                    Err(e) => eprintln!("{axis}={}: {e}", p.value),
                }
            }
        }
        Command::Validate { common } => {
            let cfg = resolve(&common)?;
            let report = run_checks(&cfg);
            for c in &report {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if report.iter().any(|c| !c.passed) {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    run(Cli::parse()).unwrap_or_else(|e| {
        eprintln!("error: {e}");
        ExitCode::from(2)
    })
}
