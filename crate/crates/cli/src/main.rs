//! Command-line driver for the lifter.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context as _, Result};
use clap::{Parser, Subcommand, ValueEnum};
use evmlift::analysis::StopCondition;
use evmlift::interp::{concrete_execute, EnvValuation, DEFAULT_MAX_STEPS};
use evmlift::pipeline::{
    read_contract, render_sweep, run_batch, run_pipeline, sweep_configs, write_atomic, Aggregate, PipelineConfig,
};
use evmlift::{BytecodeProgram, Scheme};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SchemeArg {
    Shrinking,
    Transactional,
}

#[derive(Debug, Parser)]
#[command(name = "evmlift", version, about = "Lift EVM bytecode to three-address code")]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,

    /// Contract file: hex text, or raw bytecode with a `.bin` extension.
    input: Option<PathBuf>,

    #[arg(long, value_enum, default_value = "shrinking")]
    scheme: SchemeArg,

    /// Maximum private context length [default: 20 shrinking, 8 transactional].
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    context_depth: Option<u64>,

    #[arg(long)]
    no_cloning: bool,

    #[arg(long)]
    no_preanalysis: bool,

    /// Fact budget of the pre-analysis.
    #[arg(long, default_value_t = 1_000_000)]
    preanalysis_limit: u64,

    /// Per-contract wall-clock budget in seconds.
    #[arg(long, default_value_t = 200.0)]
    timeout: f64,

    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    max_stack_depth: u64,

    /// TAC output file; with --batch, directory for per-contract `.tac` and `.json` files.
    #[arg(long)]
    tac_out: Option<PathBuf>,

    /// Metrics JSON output; with --batch, the aggregate report.
    #[arg(long)]
    metrics_out: Option<PathBuf>,

    /// Analyze every file in DIR.
    #[arg(long, value_name = "DIR")]
    batch: Option<PathBuf>,

    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    jobs: u64,

    /// Run the default and three ablated configurations and print a table.
    #[arg(long)]
    sweep: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the concrete block trace for one calldata input.
    #[command(hide = true)]
    Trace {
        input: PathBuf,
        /// Calldata as hex.
        #[arg(long, default_value = "")]
        calldata: String,
    },
}

impl Cli {
    fn config(&self) -> Result<PipelineConfig> {
        if !(self.timeout > 0.0 && self.timeout.is_finite()) {
            bail!("--timeout must be a positive number of seconds");
        }
        Ok(PipelineConfig {
            scheme: match self.scheme {
                SchemeArg::Shrinking => Scheme::Shrinking,
                SchemeArg::Transactional => Scheme::Transactional,
            },
            depth: self.context_depth.map(|d| d as usize),
            cloning: !self.no_cloning,
            preanalysis: !self.no_preanalysis,
            preanalysis_limit: self.preanalysis_limit,
            timeout: Some(Duration::from_secs_f64(self.timeout)),
            fact_limit: None,
            max_stack_depth: self.max_stack_depth as usize,
        })
    }
}

/// Exit status: 0 done, 1 error, 2 at least one analysis timed out.
fn status(timed_out: bool) -> ExitCode {
    ExitCode::from(if timed_out { 2 } else { 0 })
}

fn single(cli: &Cli, cfg: &PipelineConfig, input: &Path) -> Result<ExitCode> {
    let code = read_contract(input).map_err(anyhow::Error::msg)?;
    let out = run_pipeline(&code, cfg);
    let tac = out.tac.render();
    match &cli.tac_out {
        Some(p) => write_atomic(p, tac.as_bytes()).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{tac}"),
    }
    if let Some(p) = &cli.metrics_out {
        write_atomic(p, out.metrics.to_json().as_bytes()).with_context(|| format!("writing {}", p.display()))?;
    }
    eprint!("{}", out.metrics);
    Ok(status(out.metrics.stop_condition == StopCondition::Timeout))
}

fn batch(cli: &Cli, cfg: &PipelineConfig, dir: &Path) -> Result<ExitCode> {
    let report = run_batch(dir, cfg, cli.jobs as usize, cli.tac_out.as_deref())
        .with_context(|| format!("reading {}", dir.display()))?;
    for r in &report.results {
        if let Some(e) = &r.error {
            eprintln!("{}: {e}", r.name);
        }
    }
    if let Some(p) = &cli.metrics_out {
        write_atomic(p, report.to_json().as_bytes()).with_context(|| format!("writing {}", p.display()))?;
    }
    print!("{}", report.aggregate.render());
    Ok(status(report.aggregate.timeouts > 0))
}

fn sweep(cli: &Cli, cfg: &PipelineConfig) -> Result<ExitCode> {
    let mut rows: Vec<(&str, Aggregate)> = Vec::new();
    for (name, c) in sweep_configs(cfg) {
        let aggregate = match (&cli.batch, &cli.input) {
            (Some(dir), _) => {
                run_batch(dir, &c, cli.jobs as usize, None)
                    .with_context(|| format!("reading {}", dir.display()))?
                    .aggregate
            }
            (None, Some(input)) => {
                let code = read_contract(input).map_err(anyhow::Error::msg)?;
                let result = evmlift::pipeline::ContractResult {
                    name: input.display().to_string(),
                    metrics: Some(run_pipeline(&code, &c).metrics),
                    error: None,
                };
                Aggregate::from_results(&[result])
            }
            (None, None) => bail!("--sweep needs an input file or --batch DIR"),
        };
        rows.push((name, aggregate));
    }
    print!("{}", render_sweep(&rows));
    Ok(status(false))
}

fn trace(input: &Path, calldata: &str) -> Result<ExitCode> {
    let code = read_contract(input).map_err(anyhow::Error::msg)?;
    let calldata = hex::decode(calldata.trim_start_matches("0x")).context("calldata is not hex")?;
    let program = BytecodeProgram::from_code(&code);
    let env = EnvValuation { calldata, ..Default::default() };
    let t = concrete_execute(&program, &env, DEFAULT_MAX_STEPS);
    for b in &t.visits {
        println!("{b}");
    }
    println!("{:?}", t.halted);
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(Command::Trace { input, calldata }) = &cli.command {
        return trace(input, calldata);
    }
    let cfg = cli.config()?;
    if cli.sweep {
        return sweep(&cli, &cfg);
    }
    match (&cli.batch, &cli.input) {
        (Some(_), Some(_)) => bail!("give either an input file or --batch DIR, not both"),
        (Some(dir), None) => batch(&cli, &cfg, dir),
        (None, Some(input)) => single(&cli, &cfg, input),
        (None, None) => bail!("no input; see --help"),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
