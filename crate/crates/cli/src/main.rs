mod commands;
mod config;
mod output;

use anyhow::Result;
use clap::{Parser, Subcommand};
use commands::Run;
use config::Config;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "divis", version, about = "Diverse feature visualizations and invariance metrics for toy cells and small CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize one diverse batch of highly activating images
    Synthesize(Args),
    /// Sweep the diversity strength and pick the optimal lambda
    Sweep(Args),
    /// Shift-invariance and linear-combination indices for a list of units
    Metrics(Args),
    /// Phase histogram and coverage of a template directory
    Phases(Args),
    /// Responses of the toy cells to Gabor patches of every phase
    Tuning(Args),
    /// Sweep, templates, phases and metrics for every toy cell
    Demo(Args),
}

#[derive(clap::Args)]
struct Args {
    /// Key-value config file with [section] headers
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, default_value = "divis-out")]
    out: PathBuf,
    /// Replace an existing, non-empty output directory
    #[arg(long)]
    force: bool,
    /// Worker threads for sweep points
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Override any config key, e.g. --set synthesis.max_steps=200
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    /// Unit kind: simple, energy, hubel-wiesel, corner, texture or network
    #[arg(long)]
    unit: Option<String>,
    /// Comma-separated unit kinds for metrics, tuning and demo
    #[arg(long)]
    units: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<String>,
    /// Comma-separated lambda list, or "default"
    #[arg(long, allow_negative_numbers = true)]
    lambdas: Option<String>,
    #[arg(long)]
    n: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Diversity term: min, average or average-squared
    #[arg(long)]
    mode: Option<String>,
    /// Image prior: none or smoothness
    #[arg(long)]
    prior: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    radius: Option<String>,
    #[arg(long)]
    threshold: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    repeats: Option<String>,
    /// Directory of .f64 templates for the phases command
    #[arg(long)]
    templates: Option<String>,
}

fn resolve(a: &Args, units_key: &str) -> Result<Config> {
    let mut cfg = match &a.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for s in &a.set {
        cfg.set_assignment(s)?;
    }
    let flags = [
        ("unit.kind", &a.unit),
        (units_key, &a.units),
        ("synthesis.lambda", &a.lambda),
        ("sweep.lambdas", &a.lambdas),
        ("synthesis.n", &a.n),
        ("synthesis.seed", &a.seed),
        ("synthesis.mode", &a.mode),
        ("synthesis.prior", &a.prior),
        ("synthesis.alpha", &a.alpha),
        ("synthesis.radius", &a.radius),
        ("synthesis.threshold", &a.threshold),
        ("synthesis.max_steps", &a.steps),
        ("sweep.repeats", &a.repeats),
        ("phases.templates", &a.templates),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

type Handler = fn(&Run) -> Result<()>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (args, units_key, cmd): (&Args, &str, Handler) = match &cli.command {
        Command::Synthesize(a) => (a, "demo.units", commands::cmd_synthesize),
        Command::Sweep(a) => (a, "demo.units", commands::cmd_sweep),
        Command::Metrics(a) => (a, "metrics.units", commands::cmd_metrics),
        Command::Phases(a) => (a, "demo.units", commands::cmd_phases),
        Command::Tuning(a) => (a, "tuning.units", commands::cmd_tuning),
        Command::Demo(a) => (a, "demo.units", commands::cmd_demo),
    };
    let result = resolve(args, units_key).and_then(|cfg| cmd(&Run { cfg, out: args.out.clone(), force: args.force, jobs: args.jobs }));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
