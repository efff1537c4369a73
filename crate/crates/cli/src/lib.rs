//! `pmtkg` command line: argument parsing, configuration layering and one
//! run directory per artifact-producing command.

pub mod commands;
pub mod config;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use pmtkg::graph::GraphVariant;
use pmtkg::missing::Mechanism;

pub use config::{CliConfig, ImputeMethod, ProviderKind};
pub use manifest::{InputRef, RunManifest};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "pmtkg", version, about = "Survey imputation benchmark, co-occurrence graph and grounded assistant")]
pub struct Cli {
    /// JSON config merged over the built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Directory under which run directories are created.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Codebook JSON; the built-in codebook by default.
    #[arg(long, global = true, value_name = "FILE")]
    pub codebook: Option<PathBuf>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Errors only.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a records CSV and report its composition.
    Ingest(IngestArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Build, summarize or query a co-occurrence graph.
    Graph {
        #[command(subcommand)]
        command: GraphCommand,
    },
    /// Draw a missingness mask.
    Simulate(SimulateArgs),
    /// Complete a masked dataset with a classical imputer.
    Impute(ImputeArgs),
    /// Predict Block B/C answers from Block A with one LLM method.
    Predict(PredictArgs),
    /// Score LLM methods on Block B/C prediction from Block A.
    Evaluate(EvaluateArgs),
    /// Run the method × mechanism × seed grid and the sanity gate.
    Benchmark(BenchmarkArgs),
    /// Run the A-TLM component ablation.
    Ablation(AblationArgs),
    /// Score the instrument against the nine PMT constructs.
    Audit(AuditArgs),
    /// Compare sample composition with a reference population.
    Coverage(CoverageArgs),
    /// Serve the grounded assistant over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ProviderArgs {
    #[arg(long, value_enum)]
    pub provider: Option<ProviderKind>,
    /// Replay cache directory.
    #[arg(long, value_name = "DIR")]
    pub replay_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long, value_name = "CSV")]
    pub records: PathBuf,
    /// Subgroup definitions JSON; the built-in definitions by default.
    #[arg(long, value_name = "FILE")]
    pub subgroups: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Generator config JSON.
    #[arg(long, value_name = "FILE")]
    pub generator: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Vulnerable shift `Field=delta` (repeatable).
    #[arg(long = "shift", value_name = "FIELD=DELTA", value_parser = parse_shift)]
    pub shifts: Vec<(String, f64)>,
}

#[derive(Debug, Subcommand)]
pub enum GraphCommand {
    /// Build a graph from training records.
    Build(GraphBuildArgs),
    /// Summary statistics of a serialized graph.
    Stats(GraphFileArgs),
    /// Conditional distribution of a target given evidence.
    Query(GraphQueryArgs),
}

#[derive(Debug, Args)]
pub struct GraphBuildArgs {
    /// Records CSV; the built-in 946-respondent fixture by default.
    #[arg(long, value_name = "CSV")]
    pub records: Option<PathBuf>,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<GraphVariant>,
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GraphFileArgs {
    #[arg(long, value_name = "FILE")]
    pub graph: PathBuf,
}

#[derive(Debug, Args)]
pub struct GraphQueryArgs {
    #[arg(long, value_name = "FILE")]
    pub graph: PathBuf,
    #[arg(long, value_name = "FIELD")]
    pub target: String,
    /// Evidence `Field=level` (repeatable); level is a label or an ordinal.
    #[arg(long, value_name = "FIELD=LEVEL", value_parser = parse_pair)]
    pub given: Vec<(String, String)>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_name = "CSV")]
    pub records: Option<PathBuf>,
    #[arg(long, value_parser = parse_mechanism)]
    pub mechanism: Option<Mechanism>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ImputeArgs {
    #[arg(long, value_name = "CSV")]
    pub records: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub mask: PathBuf,
    #[arg(long, value_enum)]
    pub method: Option<ImputeMethod>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Training records; the built-in 946-respondent fixture by default.
    #[arg(long, value_name = "CSV")]
    pub train: Option<PathBuf>,
    /// Respondents to predict; the built-in 189-respondent fixture by default.
    #[arg(long, value_name = "CSV")]
    pub validation: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub provider: ProviderArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_name = "CSV")]
    pub train: Option<PathBuf>,
    #[arg(long, value_name = "CSV")]
    pub validation: Option<PathBuf>,
    /// Comma-separated method names.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub provider: ProviderArgs,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// Records CSV; the built-in 946-respondent fixture by default.
    #[arg(long, value_name = "CSV")]
    pub records: Option<PathBuf>,
    /// Comma-separated method names.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Comma-separated mechanisms (S1..S4).
    #[arg(long, value_delimiter = ',', value_parser = parse_mechanism)]
    pub mechanisms: Option<Vec<Mechanism>>,
    /// `a..b` (inclusive) or a comma-separated list.
    #[arg(long, value_parser = parse_seeds)]
    pub seeds: Option<Seeds>,
    /// Mask validation rows only, or every row.
    #[arg(long, value_parser = ["validation", "full"])]
    pub scope: Option<String>,
    #[arg(long)]
    pub no_ablation: bool,
    /// Emit tables even when the sanity gate fails.
    #[arg(long)]
    pub force: bool,
    /// Keep prompt/response transcripts.
    #[arg(long)]
    pub transcripts: bool,
    #[command(flatten)]
    pub provider: ProviderArgs,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    #[arg(long, value_name = "CSV")]
    pub records: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', value_parser = parse_mechanism)]
    pub mechanisms: Option<Vec<Mechanism>>,
    #[arg(long, value_parser = parse_seeds)]
    pub seeds: Option<Seeds>,
    #[command(flatten)]
    pub provider: ProviderArgs,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    /// Use this file as the provider response.
    #[arg(long, value_name = "FILE", conflicts_with = "provider")]
    pub response: Option<PathBuf>,
    #[command(flatten)]
    pub provider: ProviderArgs,
}

#[derive(Debug, Args)]
pub struct CoverageArgs {
    /// Sample composition JSON (subgroup → percent).
    #[arg(long, value_name = "FILE", conflicts_with = "records")]
    pub sample: Option<PathBuf>,
    /// Compute the sample composition from records instead.
    #[arg(long, value_name = "CSV")]
    pub records: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub acs: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub prior: Option<PathBuf>,
    #[arg(long)]
    pub divergence_threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, value_name = "FILE")]
    pub graph: Option<PathBuf>,
    #[arg(long, value_name = "ADDR")]
    pub bind: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Seeds(pub Vec<u64>);

pub fn parse_seeds(s: &str) -> Result<Seeds, String> {
    let bad = |e: std::num::ParseIntError| format!("bad seed in `{s}`: {e}");
    let seeds = if let Some((a, b)) = s.split_once("..") {
        let b = b.strip_prefix('=').unwrap_or(b);
        let (a, b): (u64, u64) = (a.trim().parse().map_err(bad)?, b.trim().parse().map_err(bad)?);
        if a > b {
            return Err(format!("empty seed range `{s}`"));
        }
        (a..=b).collect()
    } else {
        s.split(',').map(|x| x.trim().parse().map_err(bad)).collect::<Result<Vec<u64>, _>>()?
    };
    Ok(Seeds(seeds))
}

pub fn parse_mechanism(s: &str) -> Result<Mechanism, String> {
    s.to_ascii_uppercase().parse().map_err(|e: pmtkg::Error| e.to_string())
}

pub fn parse_variant(s: &str) -> Result<GraphVariant, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
        .map_err(|_| format!("unknown graph variant `{s}` (pmt, validated, data-driven)"))
}

pub fn parse_pair(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected FIELD=VALUE, got `{s}`"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

pub fn parse_shift(s: &str) -> Result<(String, f64), String> {
    let (k, v) = parse_pair(s)?;
    Ok((k, v.parse().map_err(|e| format!("bad delta in `{s}`: {e}"))?))
}

fn init_logging(cli: &Cli) {
    let level = if cli.quiet {
        log::LevelFilter::Error
    } else {
        match cli.verbose {
            0 => log::LevelFilter::Info,
            1 => log::LevelFilter::Debug,
            _ => log::LevelFilter::Trace,
        }
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
}

/// Parse `argv` (program name first) and run; returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_logging(&cli);
    match commands::run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            log::error!("{e}");
            EXIT_FAILURE
        }
    }
}
