//! The `huddle` command line.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use clap::{Parser, Subcommand};

use huddle_core::model::{parse_config, validate_experiment_config};
use huddle_core::sim::{LoadedPlan, SimError, SimOptions, Simulator};
use huddle_core::store::{export_archive, export_payout_csv, purge_older_than, restore};
use huddle_core::service::EXPERIMENTS_DIR;
use huddle_core::time::{Clock, SystemClock};
use huddle_server::config::data_dir;
use huddle_server::{ServeError, ServerConfig};

/// Exit codes. Stable; documented in the README.
pub mod exit {
    pub const OK: i32 = 0;
    /// Validation errors, a simulation that hit `maxSimSeconds`, or a
    /// runtime failure.
    pub const FAILED: i32 = 1;
    /// Bad configuration or input: missing files, unparseable plans, bad
    /// arguments.
    pub const BAD_INPUT: i32 = 2;
    /// `serve` could not bind its address.
    pub const BIND: i32 = 3;
}

#[derive(Debug, Parser)]
#[command(name = "huddle", version, about = "Run and inspect real-time group experiments")]
pub struct Cli {
    /// Directory holding allowlist.json, master.key, providers.json and data/.
    #[arg(long, global = true, env = "HUDDLE_CONFIG_DIR", default_value = ".")]
    pub config_dir: PathBuf,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: tracing::Level,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Serve the HTTP and WebSocket API.
    Serve {
        /// Overrides HUDDLE_BIND.
        #[arg(long)]
        bind: Option<std::net::SocketAddr>,
    },
    /// Check an experiment config and print every issue found.
    Validate { config: PathBuf },
    /// Run a simulation plan with scripted participants on a virtual clock.
    Simulate {
        plan: PathBuf,
        /// Where to write the export archive.
        #[arg(long, default_value = "simulation.zip")]
        out: PathBuf,
        /// Also write the raw event log (JSON lines).
        #[arg(long)]
        events: Option<PathBuf>,
        /// Also write the payout CSV.
        #[arg(long)]
        payouts: Option<PathBuf>,
    },
    /// Export a persisted experiment.
    Export {
        experiment_id: String,
        #[arg(long)]
        out: PathBuf,
        /// Write the payout CSV instead of the archive.
        #[arg(long)]
        payouts: bool,
    },
    /// Delete persisted experiments whose last event is older than a duration.
    Purge {
        /// For example `30d` or `12h`.
        #[arg(long, value_parser = humantime::parse_duration)]
        older_than: Duration,
    },
}

fn env_var(k: &str) -> Option<String> {
    std::env::var(k).ok()
}

/// Runs a parsed command and returns its exit code.
pub fn run(cli: Cli) -> i32 {
    let config_dir = cli.config_dir.clone();
    match cli.command {
        Command::Serve { bind } => serve(&config_dir, bind),
        Command::Validate { config } => validate(&config),
        Command::Simulate {
            plan,
            out,
            events,
            payouts,
        } => simulate(&plan, &out, events.as_deref(), payouts.as_deref()),
        Command::Export {
            experiment_id,
            out,
            payouts,
        } => report(export(&config_dir, &experiment_id, &out, payouts)),
        Command::Purge { older_than } => report(purge(&config_dir, older_than)),
    }
}

fn report(r: Result<i32, (i32, anyhow::Error)>) -> i32 {
    match r {
        Ok(code) => code,
        Err((code, e)) => {
            eprintln!("error: {e:#}");
            code
        }
    }
}

fn serve(config_dir: &Path, bind: Option<std::net::SocketAddr>) -> i32 {
    let mut cfg = match ServerConfig::resolve(config_dir, env_var) {
        Ok(c) => c,
        Err(e) => {
            let e = ServeError::from(e);
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    if let Some(b) = bind {
        cfg.bind = b;
    }
    match huddle_server::serve(cfg) {
        Ok(()) => exit::OK,
        Err(e) => {
            tracing::error!(error = %e, "serve failed");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn validate(path: &Path) -> i32 {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("error: reading {}: {e}", path.display());
            return exit::BAD_INPUT;
        }
    };
    let config = match parse_config(&bytes) {
        Ok(c) => c,
        Err(e) => {
            println!("{}: not a valid experiment config", path.display());
            println!("  error: {e}");
            return exit::FAILED;
        }
    };
    let report = validate_experiment_config(&config);
    let errors = report.errors().count();
    let warnings = report.issues.len() - errors;
    println!(
        "{}: {} stage(s), {errors} error(s), {warnings} warning(s)",
        path.display(),
        config.stages.len()
    );
    for issue in &report.issues {
        println!("  {issue}");
    }
    if report.has_errors() {
        exit::FAILED
    } else {
        exit::OK
    }
}

fn write(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn simulate(plan: &Path, out: &Path, events: Option<&Path>, payouts: Option<&Path>) -> i32 {
    let loaded = match LoadedPlan::load(plan) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: {e}");
            return exit::BAD_INPUT;
        }
    };
    let mut sim = match Simulator::new(&loaded, SimOptions::default()) {
        Ok(s) => s,
        Err(SimError::Plan(issues)) => {
            eprintln!("error: plan {} failed validation", plan.display());
            for i in issues {
                eprintln!("  {i}");
            }
            return exit::BAD_INPUT;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return exit::BAD_INPUT;
        }
    };
    let run = sim.run();
    if let Err(e) = &run {
        // Whatever happened before the failure is still written out.
        eprintln!("error: simulation stopped: {e}");
    }
    let outputs = (|| -> anyhow::Result<()> {
        write(out, &sim.archive()?)?;
        if let Some(p) = events {
            write(p, sim.event_log().as_bytes())?;
        }
        if let Some(p) = payouts {
            write(p, &sim.payout_csv()?)?;
        }
        Ok(())
    })();
    if let Err(e) = outputs {
        eprintln!("error: {e:#}");
        return exit::FAILED;
    }
    println!("{}", sim.summary());
    if run.is_err() || sim.timed_out() {
        exit::FAILED
    } else {
        exit::OK
    }
}

fn experiments_root(config_dir: &Path) -> PathBuf {
    data_dir(config_dir, env_var).join(EXPERIMENTS_DIR)
}

fn export(config_dir: &Path, id: &str, out: &Path, payouts: bool) -> Result<i32, (i32, anyhow::Error)> {
    let dir = experiments_root(config_dir).join(id);
    if !dir.is_dir() {
        return Err((exit::BAD_INPUT, anyhow::anyhow!("no persisted experiment at {}", dir.display())));
    }
    let fail = |e: anyhow::Error| (exit::FAILED, e);
    let (state, records) = restore(&dir)
        .with_context(|| format!("restoring {}", dir.display()))
        .map_err(fail)?;
    let bytes = if payouts {
        export_payout_csv(&state)
    } else {
        export_archive(&state, &records)
    }
    .context("exporting")
    .map_err(fail)?;
    write(out, &bytes).map_err(fail)?;
    println!("wrote {} ({} bytes, {} records)", out.display(), bytes.len(), records.len());
    Ok(exit::OK)
}

fn purge(config_dir: &Path, older_than: Duration) -> Result<i32, (i32, anyhow::Error)> {
    let root = experiments_root(config_dir);
    let cutoff = SystemClock.now().plus_millis(-(older_than.as_millis() as i64));
    let removed = purge_older_than(&root, cutoff)
        .context("purging")
        .map_err(|e| (exit::FAILED, e))?;
    for d in &removed {
        println!("removed {}", d.display());
    }
    println!("{} experiment(s) removed", removed.len());
    Ok(exit::OK)
}
