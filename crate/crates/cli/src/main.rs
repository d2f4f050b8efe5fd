use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use cpsim::experiment::{self, RunConfig};
use cpsim::Error;

const EXIT_INVALID: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "cpsim", version, about = "Contact process in a random environment on the half space")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output file; standard output when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads (0 lets the pool decide).
    #[arg(long, global = true, env = "CPSIM_WORKERS")]
    workers: Option<usize>,

    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output format; defaults to csv for tables and json otherwise.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Check a config without running it.
    Validate,
    /// Run whatever experiment the config names.
    Run,
    Survival,
    StrongSurvival,
    Critical,
    C1,
    C2,
    Hit,
    Block,
    FindBlocks,
    Renorm,
    RenormFit,
    BlockSensitivity,
    Oracle,
}

impl Command {
    /// Experiment kind this subcommand insists on, if any.
    fn kind(self) -> Option<&'static str> {
        Some(match self {
            Command::Validate | Command::Run => return None,
            Command::Survival => "survival",
            Command::StrongSurvival => "strong-survival",
            Command::Critical => "critical",
            Command::C1 => "c1",
            Command::C2 => "c2",
            Command::Hit => "hit",
            Command::Block => "block",
            Command::FindBlocks => "find-blocks",
            Command::Renorm => "renorm",
            Command::RenormFit => "renorm-fit",
            Command::BlockSensitivity => "block-sensitivity",
            Command::Oracle => "oracle",
        })
    }
}

enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Invalid(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    let res = match out {
        Some(p) => std::fs::write(p, text),
        None => std::io::stdout().lock().write_all(text.as_bytes()),
    };
    res.map_err(|e| Failure::Runtime(format!("cannot write output: {e}")))
}

fn validate(cli: &Cli, path: &Path) -> Result<(), Failure> {
    let violations = experiment::validate_file(path).map_err(|e| Failure::Runtime(e.to_string()))?;
    let report = serde_json::json!({ "valid": violations.is_empty(), "violations": violations });
    emit(cli.out.as_deref(), &format!("{report:#}\n"))?;
    if violations.is_empty() {
        Ok(())
    } else {
        let lines: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        Err(Failure::Invalid(lines.join("\n")))
    }
}

fn execute(cli: &Cli, path: &Path) -> Result<(), Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Runtime(format!("cannot read {}: {e}", path.display())))?;
    let mut config: RunConfig = experiment::parse_config(&text).map_err(|v| Failure::Invalid(v.to_string()))?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(w) = cli.workers {
        config.workers = Some(w);
    }
    if let Some(kind) = cli.command.kind() {
        if config.experiment.name() != kind {
            return Err(Failure::Invalid(format!(
                "$.experiment.kind: `{kind}` expects a {kind} config, found {}",
                config.experiment.name()
            )));
        }
    }
    let output = experiment::run(&config)?;
    let text = match (cli.format, output.table) {
        (Some(Format::Csv), None) => {
            return Err(Failure::Invalid(format!(
                "--format csv: the {} experiment produces no table",
                config.experiment.name()
            )))
        }
        (Some(Format::Csv) | None, Some(table)) => {
            if let Some(out) = &cli.out {
                // the JSON record goes next to the table
                let json = out.with_extension("json");
                let record = serde_json::to_string_pretty(&output.record).expect("record serializes");
                emit(Some(&json), &format!("{record}\n"))?;
            }
            table
        }
        (Some(Format::Json), _) | (None, None) => {
            format!("{}\n", serde_json::to_string_pretty(&output.record).expect("record serializes"))
        }
    };
    emit(cli.out.as_deref(), &text)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(path) = cli.config.clone() else {
        eprintln!("error: --config PATH is required");
        return ExitCode::from(EXIT_INVALID);
    };
    let res = match cli.command {
        Command::Validate => validate(&cli, &path),
        _ => execute(&cli, &path),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("invalid: {msg}");
            ExitCode::from(EXIT_INVALID)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
