//! The `r2t` command line: rule validation, training, tagging, evaluation
//! and synthetic-language generation.
//!
//! Exit codes: 0 success, 1 validation failure, 2 configuration error,
//! 3 data mismatch.

pub mod commands;
pub mod config;
pub mod manifest;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<r2t_core::Error> for CliError {
    fn from(e: r2t_core::Error) -> Self {
        use r2t_core::Error::*;
        let code = match &e {
            Validation(_) | Conflict(_) => EXIT_VALIDATION,
            Parse { .. } | Schema(_) | Shape(_) | EmptyInput | Length { .. } => EXIT_DATA,
            Config(_) | Key(_) | Io { .. } | Numerical(_) => EXIT_CONFIG,
        };
        Self { code, message: e.to_string() }
    }
}

#[derive(Debug, Parser)]
#[command(name = "r2t", version, about = "Train sequence taggers from linguistic rules instead of labels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rule-file utilities
    #[command(subcommand)]
    Rules(RulesCommand),
    /// Train a tagger from a TOML run file
    Train(TrainArgs),
    /// Tag raw text and write a silver-standard JSONL corpus
    Tag(TagArgs),
    /// Score predictions against gold annotations
    Eval(EvalArgs),
    /// Synthetic-language utilities
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Re-run a recorded command after checking its inputs are unchanged
    Rerun(RerunArgs),
}

#[derive(Debug, Subcommand)]
pub enum RulesCommand {
    /// Check a rules file and optionally report coverage on a corpus
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Rules file (JSON)
    pub rules: PathBuf,
    /// Corpus to measure coverage on (plain text or JSONL)
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Where to write the run manifest
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run file (TOML)
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct TagArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Raw text, one sentence per line (or JSONL)
    #[arg(long)]
    pub input: PathBuf,
    /// Output JSONL; the summary goes next to it
    #[arg(long)]
    pub output: PathBuf,
    /// Tokens whose top probability is below this become OTHER
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Where to write the run manifest [default: <output>.manifest.json]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Pos,
    Ner,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Gold JSONL
    #[arg(long)]
    pub gold: PathBuf,
    /// Predicted JSONL, or a directory of them (one per seed)
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long, value_enum, default_value_t = Task::Pos)]
    pub task: Task,
    /// Comma-separated tag inventory [default: tags seen in gold, sorted]
    #[arg(long, value_delimiter = ',')]
    pub tagset: Option<Vec<String>>,
    /// Directory for JSON/text reports and the confusion CSV
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Where to write the run manifest [default: <out-dir>/manifest.json]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// Generate a synthetic corpus, matching rules and word vectors
    Gen(SynthArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = Task::Pos)]
    pub task: Task,
    /// Grammar definition (JSON) [default: built-in 6-tag grammar]
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub sentences: usize,
    #[arg(long, default_value_t = 200)]
    pub test_sentences: usize,
    #[arg(long, default_value_t = 5)]
    pub min_len: usize,
    #[arg(long, default_value_t = 15)]
    pub max_len: usize,
    /// Fraction of unambiguous words placed in Tier 1
    #[arg(long, default_value_t = 0.85)]
    pub coverage: f64,
    /// Overrides the grammar's ambiguity fraction
    #[arg(long)]
    pub ambiguity: Option<f64>,
    #[arg(long, default_value_t = 300)]
    pub embedding_dim: usize,
    /// Scale of the tag-cluster component of the word vectors
    #[arg(long, default_value_t = 1.0)]
    pub signal: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    pub manifest: PathBuf,
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let args: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let recorded: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match commands::dispatch(cli.command, &recorded) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_classes_map_to_exit_codes() {
        use r2t_core::Error;
        assert_eq!(CliError::from(Error::Conflict(vec!["x".into()])).code, EXIT_VALIDATION);
        assert_eq!(CliError::from(Error::Config("x".into())).code, EXIT_CONFIG);
        assert_eq!(CliError::from(Error::Shape("x".into())).code, EXIT_DATA);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn usage_errors_are_config_errors() {
        assert_eq!(run(["r2t", "train"]), EXIT_CONFIG);
        assert_eq!(run(["r2t", "frobnicate"]), EXIT_CONFIG);
        assert_eq!(run(["r2t", "--help"]), EXIT_OK);
    }
}
