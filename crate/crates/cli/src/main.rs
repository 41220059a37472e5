use std::path::PathBuf;
use std::process::ExitCode;

use clap::builder::BoolishValueParser;
use clap::{Args, Parser, Subcommand, ValueEnum};
use hybridsync_core::report::{emit_report, run, trace_lines, Command, OutputFormat, RunConfig};
use hybridsync_core::{Architecture, Error, MechanismPolicy, DEFAULT_THRESHOLD};

/// Plan, estimate, simulate and tune hybrid parameter-server / AllReduce
/// data-parallel training.
#[derive(Parser)]
#[command(name = "hybridsync", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the placed distributed plan.
    Transform(Opts),
    /// Print per-machine network bytes from the closed-form model.
    Estimate(Opts),
    /// Simulate training and report the mean iteration time.
    Simulate(Opts),
    /// Search for the partition count of sparse variables.
    Tune(Opts),
    /// Estimate and simulate all four architectures.
    Compare(Opts),
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Ar,
    /// Parameter server; local aggregation follows --local-agg (default on).
    Ps,
    PsNaive,
    PsOpt,
    Hybrid,
}

impl From<ArchArg> for Architecture {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Ar => Architecture::Ar,
            ArchArg::Ps | ArchArg::PsOpt => Architecture::PsOpt,
            ArchArg::PsNaive => Architecture::PsNaive,
            ArchArg::Hybrid => Architecture::Hybrid,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct Opts {
    /// Graph spec JSON.
    #[arg(long)]
    graph: PathBuf,
    /// Cluster spec JSON.
    #[arg(long)]
    cluster: PathBuf,
    /// Defaults to hybrid.
    #[arg(long, value_enum)]
    architecture: Option<ArchArg>,
    /// Local aggregation on/off for parameter-server architectures.
    #[arg(long, value_name = "BOOL", value_parser = BoolishValueParser::new())]
    local_agg: Option<bool>,
    /// Partitions per partitionable sparse variable (tune: first sample).
    /// Defaults to the number of machines.
    #[arg(long)]
    partitions: Option<usize>,
    /// Relative improvement needed to keep doubling or halving P.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Simulated iterations per measurement; the first half is discarded.
    #[arg(long, default_value_t = 100)]
    iterations: usize,
    #[arg(long, value_enum, default_value = "json")]
    output: Format,
    /// Write the simulated message trace as JSON lines.
    #[arg(long, value_name = "PATH", num_args = 0..=1, default_missing_value = "trace.jsonl")]
    trace: Option<PathBuf>,
    /// Per-byte cost multiplier of AllReduce.
    #[arg(long, default_value_t = 1.0)]
    eff_ar: f64,
    /// Per-byte cost multiplier of the parameter server.
    #[arg(long, default_value_t = 1.0)]
    eff_ps: f64,
}

fn config(command: Command, o: &Opts) -> RunConfig {
    RunConfig {
        architecture: o.architecture.map(Architecture::from),
        local_agg: o.local_agg,
        partitions: o.partitions,
        threshold: o.threshold,
        seed: o.seed,
        iterations: o.iterations,
        output: match o.output {
            Format::Json => OutputFormat::Json,
            Format::Csv => OutputFormat::Csv,
        },
        policy: MechanismPolicy {
            eff_ar: o.eff_ar,
            eff_ps: o.eff_ps,
        },
        ..RunConfig::new(command, &o.graph, &o.cluster)
    }
}

fn execute(cli: Cli) -> Result<String, Error> {
    let (command, opts) = match &cli.command {
        Cmd::Transform(o) => (Command::Transform, o),
        Cmd::Estimate(o) => (Command::Estimate, o),
        Cmd::Simulate(o) => (Command::Simulate, o),
        Cmd::Tune(o) => (Command::Tune, o),
        Cmd::Compare(o) => (Command::Compare, o),
    };
    let cfg = config(command, opts);
    let out = run(&cfg)?;
    if let Some(path) = &opts.trace {
        std::fs::write(path, trace_lines(&out.trace)).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(emit_report(&out.report, cfg.output))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(doc) => {
            print!("{doc}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("hybridsync: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
