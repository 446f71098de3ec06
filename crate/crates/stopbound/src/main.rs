use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stopbound::config::{read_probes, RunConfig, SEED_ENV};
use stopbound::formats::{bundle_binary, bundle_csv};
use stopbound::{run, Registry, RunError};
use stopbound_core::examples::{build_example, ExampleId, ExampleName};
use stopbound_core::flow::{derivative_flow, simulate_paths};

#[derive(Parser)]
#[command(name = "stopbound", version, about = "Optimal stopping boundaries: solve, extract and verify")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Monte Carlo seed; overrides STOPBOUND_SEED and the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// CSV of probe points `t,x1,...,xd`.
    #[arg(long)]
    probes: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline described by a JSON config.
    Run {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run the pipeline on a built-in example with default settings.
    Example {
        name: ExampleName,
        /// Parameter override `key=value`; repeatable.
        #[arg(long = "param", value_parser = parse_param)]
        params: Vec<(String, f64)>,
        #[command(flatten)]
        common: Common,
    },
    /// Write simulated paths with their derivative flow for debugging.
    Trace {
        name: ExampleName,
        #[arg(long = "param", value_parser = parse_param)]
        params: Vec<(String, f64)>,
        /// Start time.
        #[arg(long, default_value_t = 0.0)]
        t0: f64,
        /// Start point, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        x0: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        paths: usize,
        #[arg(long, default_value_t = 1e-2)]
        dt: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the binary layout instead of CSV.
        #[arg(long)]
        binary: bool,
        /// Destination file.
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_param(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got `{s}`"))?;
    let v: f64 = v.trim().parse().map_err(|e| format!("`{v}`: {e}"))?;
    Ok((k.trim().to_string(), v))
}

fn example_id(name: ExampleName, params: Vec<(String, f64)>) -> ExampleId {
    params.into_iter().fold(ExampleId::new(name), |id, (k, v)| id.with(&k, v))
}

fn pipeline(mut cfg: RunConfig, common: Common) -> Result<i32, RunError> {
    let env = std::env::var(SEED_ENV).ok();
    cfg.resolve_seed(common.seed, env.as_deref())?;
    if let Some(out) = common.out {
        cfg.output_dir = out;
    }
    if let Some(path) = common.probes {
        let text = std::fs::read_to_string(&path).map_err(|source| RunError::Io { path: path.clone(), source })?;
        cfg.probes = Some(read_probes(&text)?);
    }
    let outcome = run(&cfg, &Registry::default())?;
    print!("{}", outcome.summary.render());
    println!("artifacts in {}", cfg.output_dir.display());
    Ok(outcome.exit_code())
}

#[allow(clippy::too_many_arguments)]
fn trace(
    id: ExampleId,
    t0: f64,
    x0: Vec<f64>,
    paths: usize,
    dt: f64,
    seed: u64,
    binary: bool,
    out: PathBuf,
) -> Result<i32, RunError> {
    let ex = build_example(&id).map_err(|e| RunError::Config(e.to_string()))?;
    let bundle = simulate_paths(&ex.spec, t0, &x0, paths, dt, seed).map_err(|e| RunError::Config(e.to_string()))?;
    let bundle = derivative_flow(&ex.spec, bundle);
    let bytes = if binary { bundle_binary(&bundle) } else { bundle_csv(&bundle).into_bytes() };
    std::fs::write(&out, bytes).map_err(|source| RunError::Io { path: out.clone(), source })?;
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, common } => RunConfig::load(&config).and_then(|cfg| pipeline(cfg, common)),
        Command::Example { name, params, common } => pipeline(RunConfig::for_example(example_id(name, params)), common),
        Command::Trace { name, params, t0, x0, paths, dt, seed, binary, out } => {
            trace(example_id(name, params), t0, x0, paths, dt, seed, binary, out)
        }
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
