//! `robnas`: command-line front end for the architecture search engine.

mod search;

use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Parser, Subcommand};
use serde::Serialize;

use robnas_core::analysis::{all_stats, emit_table, AnalysisError, TableFormat};
use robnas_core::arch::{count_params, validate, ParseError};
use robnas_core::engine::parse_history;
use robnas_core::evolution::evolve;
use robnas_core::{Architecture, ModelShapeConfig, SearchSpaceDef};

/// Process exit statuses. `0` is success; clap reports usage errors as `2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Code {
    /// `validate` found violations.
    Invalid = 1,
    /// Unreadable, unknown or out-of-range configuration.
    Config = 3,
    /// File system or socket failure.
    Io = 4,
    /// Malformed architecture, history or checkpoint file.
    Parse = 5,
    /// Worker protocol failure or an empty evaluation pool.
    Protocol = 6,
    /// The search itself failed (initialisation or evolution).
    Search = 7,
    /// The checkpoint does not belong to this configuration or history.
    Checkpoint = 8,
}

/// An error tagged with the exit status it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: Code,
    pub error: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub trait Classify<T> {
    fn class(self, code: Code) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn class(self, code: Code) -> Result<T, Failure> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

pub fn fail(code: Code, error: anyhow::Error) -> Failure {
    Failure { code, error }
}

#[derive(Parser)]
#[command(
    name = "robnas",
    version,
    about = "Robustness-aware evolutionary architecture search",
    after_help = "Exit status: 0 success, 1 invalid architecture (validate), 2 usage, 3 config, 4 I/O, \
                  5 malformed input file, 6 worker protocol or empty pool, 7 search failure, \
                  8 checkpoint mismatch.\nLog verbosity: ROBNAS_LOG (e.g. ROBNAS_LOG=debug)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a search and write manifest, checkpoint, history and best record.
    Search(search::SearchArgs),
    /// Check an architecture record against the search space.
    Validate {
        /// Architecture record path, or `-` for stdin.
        arch: PathBuf,
        /// Computational nodes per block of the space to check against.
        #[arg(long)]
        nodes: Option<usize>,
    },
    /// Count the parameters of an architecture.
    Params {
        /// Architecture record path, or `-` for stdin.
        arch: PathBuf,
        #[arg(long)]
        vocab: Option<u64>,
        #[arg(long = "max-pos")]
        max_pos: Option<u64>,
        #[arg(long)]
        segments: Option<u64>,
        #[arg(long)]
        classes: Option<u64>,
    },
    /// Apply one seeded evolution step and print the result.
    Mutate {
        /// Architecture record path, or `-` for stdin.
        arch: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Group a history file by architecture property and write statistics.
    Analyze {
        /// History file (one scored individual per line).
        history: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Table format.
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Format {
    Csv,
    Jsonl,
}

fn read_input(path: &Path) -> Result<String, Failure> {
    if path == Path::new("-") {
        let mut s = String::new();
        io::stdin().read_to_string(&mut s).class(Code::Io)?;
        return Ok(s);
    }
    fs::read_to_string(path).map_err(|e| fail(Code::Io, anyhow!("cannot read {}: {e}", path.display())))
}

/// Reads an architecture record, checking syntax only.
fn read_arch(path: &Path) -> Result<Architecture, Failure> {
    let text = read_input(path)?;
    Architecture::decode(&text).map_err(|e| fail(Code::Parse, anyhow!("{}: {e}", path.display())))
}

/// The serde_json message without its trailing position.
pub fn cause(e: &serde_json::Error) -> String {
    let s = e.to_string();
    match s.rfind(" at line ") {
        Some(i) => s[..i].to_string(),
        None => s,
    }
}

fn space_for(arch: &Architecture, nodes: Option<usize>) -> SearchSpaceDef {
    SearchSpaceDef::with_nodes(nodes.unwrap_or(arch.block.n))
}

fn print_json<T: Serialize>(value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).class(Code::Io)?;
    let mut out = io::stdout().lock();
    match writeln!(out, "{text}") {
        // a closed reader (e.g. `| head`) is not an error
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
        r => r.class(Code::Io),
    }
}

#[derive(Serialize)]
struct ValidateReport {
    ok: bool,
    violations: Vec<String>,
    warnings: Vec<String>,
}

fn cmd_validate(path: &Path, nodes: Option<usize>) -> Result<ExitCode, Failure> {
    let arch = read_arch(path)?;
    let report = validate(&arch, &space_for(&arch, nodes));
    print_json(&ValidateReport {
        ok: report.ok,
        violations: report.violations.iter().map(ToString::to_string).collect(),
        warnings: report.warnings.iter().map(ToString::to_string).collect(),
    })?;
    Ok(if report.ok { ExitCode::SUCCESS } else { ExitCode::from(Code::Invalid as u8) })
}

fn cmd_params(path: &Path, shape: ModelShapeConfig) -> Result<ExitCode, Failure> {
    let arch = read_arch(path)?;
    let report = validate(&arch, &space_for(&arch, None));
    for w in &report.warnings {
        log::warn!("{w}");
    }
    let breakdown = count_params(&arch, &shape).class(Code::Parse)?;
    print_json(&breakdown)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_mutate(path: &Path, seed: u64) -> Result<ExitCode, Failure> {
    let text = read_input(path)?;
    let arch = Architecture::parse(&text).map_err(|e| match e {
        ParseError::Syntax { .. } => fail(Code::Parse, anyhow!("{}: {e}", path.display())),
        ParseError::Invalid(_) => fail(Code::Invalid, anyhow!("{}: {e}", path.display())),
    })?;
    let evolved = evolve(&arch, &space_for(&arch, None), seed).class(Code::Search)?;
    print_json(&evolved)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_analyze(path: &Path, out: &Path, format: Format) -> Result<ExitCode, Failure> {
    let text = read_input(path)?;
    let history = parse_history(&text)
        .map_err(|(line, e)| fail(Code::Parse, anyhow!("{} line {line}, column {}: {}", path.display(), e.column(), cause(&e))))?;
    let rows = all_stats(&history).map_err(|e| match e {
        AnalysisError::EmptyHistory => fail(Code::Parse, anyhow!("{}: {e}", path.display())),
        other => fail(Code::Io, other.into()),
    })?;
    let format = match format {
        Format::Csv => TableFormat::Csv,
        Format::Jsonl => TableFormat::JsonLines,
    };
    let mut buf = Vec::new();
    emit_table(&rows, format, &mut buf).class(Code::Io)?;
    search::write_atomic(out, &buf)?;
    log::info!("{} rows from {} records written to {}", rows.len(), history.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode, Failure> {
    match cli.command {
        Command::Search(args) => search::cmd_search(args),
        Command::Validate { arch, nodes } => cmd_validate(&arch, nodes),
        Command::Params { arch, vocab, max_pos, segments, classes } => {
            let d = ModelShapeConfig::default();
            let shape = ModelShapeConfig {
                vocab_size: vocab.unwrap_or(d.vocab_size),
                max_positions: max_pos.unwrap_or(d.max_positions),
                num_segments: segments.unwrap_or(d.num_segments),
                num_classes: classes.unwrap_or(d.num_classes),
            };
            cmd_params(&arch, shape)
        }
        Command::Mutate { arch, seed } => cmd_mutate(&arch, seed),
        Command::Analyze { history, out, format } => cmd_analyze(&history, &out, format),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ROBNAS_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}
