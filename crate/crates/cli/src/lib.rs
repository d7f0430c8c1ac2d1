//! Command-line front end. One TOML config drives a small set of
//! subcommands that chain through a shared workdir: ingest raw corpora,
//! split leave-one-out, export training manifests, self-train on the
//! unlabeled target pool, evaluate, bound with oracular selection,
//! discover slot types, and assemble in-context-learning prompts.
//!
//! Exit codes: 0 ok, 1 usage, 2 data error, 3 backend error.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod artifacts;
pub mod commands;
pub mod config;

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags or config; exit code 1.
    #[error("{0}")]
    Usage(String),
    /// Bad or missing inputs and artifacts; exit code 2.
    #[error("{0}")]
    Data(String),
    /// The model backend failed; exit code 3.
    #[error("{0}")]
    Backend(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Backend(_) => 3,
        }
    }
}

impl From<cycledst::corpus::CorpusError> for CliError {
    fn from(e: cycledst::corpus::CorpusError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<cycledst::eval::EvalError> for CliError {
    fn from(e: cycledst::eval::EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<cycledst::jointtrain::JointError> for CliError {
    fn from(e: cycledst::jointtrain::JointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<cycledst::prompting::PromptError> for CliError {
    fn from(e: cycledst::prompting::PromptError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<cycledst::oracle_selection::OracleSelectionError> for CliError {
    fn from(e: cycledst::oracle_selection::OracleSelectionError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<cycledst::backend::BackendError> for CliError {
    fn from(e: cycledst::backend::BackendError) -> Self {
        use cycledst::backend::BackendError as B;
        match &e {
            B::MissingConfig(_) => CliError::Usage(e.to_string()),
            B::UnlabeledOracleSource { .. } | B::EmptyManifest(_) => {
                CliError::Data(e.to_string())
            }
            _ => CliError::Backend(e.to_string()),
        }
    }
}

impl From<cycledst::slotgen::SlotGenError> for CliError {
    fn from(e: cycledst::slotgen::SlotGenError) -> Self {
        match &e {
            cycledst::slotgen::SlotGenError::Backend(inner) => {
                match inner {
                    cycledst::backend::BackendError::MissingConfig(_) => {
                        CliError::Usage(e.to_string())
                    }
                    _ => CliError::Backend(e.to_string()),
                }
            }
            cycledst::slotgen::SlotGenError::DegenerateStrategy => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

/// Parse a snake_case keyword into any serde-tagged enum, so flag values
/// and config values share one spelling.
pub(crate) fn parse_keyword<T: serde::de::DeserializeOwned>(
    what: &str,
    text: &str,
) -> Result<T, CliError> {
    serde_json::from_value(serde_json::Value::String(text.to_string()))
        .map_err(|_| CliError::Usage(format!("unknown {what} {text:?}")))
}

#[derive(Debug, Parser)]
#[command(
    name = "cycledst",
    version,
    about = "Turn zero-shot dialogue state tracking into few-shot with cycle-consistent self-training"
)]
pub struct Cli {
    /// Run configuration TOML. Defaults to ./run.toml when present,
    /// otherwise built-in defaults apply.
    #[arg(short, long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override the config's target_domain.
    #[arg(long, global = true, value_name = "DOMAIN")]
    pub target_domain: Option<String>,
    /// Override the config's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override the config's paths.workdir.
    #[arg(long, global = true, value_name = "DIR")]
    pub workdir: Option<PathBuf>,
    /// Override backend.kind: extractive_oracle, noisy_oracle or remote.
    #[arg(long, global = true, value_name = "KIND")]
    pub backend: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Default, Args)]
pub struct IngestArgs {
    /// Raw training corpus; overrides paths.raw_train.
    #[arg(long, value_name = "FILE")]
    pub train: Option<PathBuf>,
    /// Raw test corpus; overrides paths.raw_test.
    #[arg(long, value_name = "FILE")]
    pub test: Option<PathBuf>,
    /// Raw format: multiwoz or sgd.
    #[arg(long)]
    pub format: Option<String>,
    /// Slot schema JSON; overrides paths.schema.
    #[arg(long, value_name = "FILE")]
    pub schema: Option<PathBuf>,
}

#[derive(Debug, Default, Args)]
pub struct EvalArgs {
    /// Score an existing predictions JSONL instead of generating fresh
    /// predictions on the target test set.
    #[arg(long, value_name = "FILE")]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Default, Args)]
pub struct OracleArgs {
    /// Joint-model JGA for the margin; read from metrics.json when omitted.
    #[arg(long)]
    pub jga_joint: Option<f64>,
    /// Upper-bound JGA for the margin; defaults to the 1.0 ceiling.
    #[arg(long)]
    pub jga_upper: Option<f64>,
}

#[derive(Debug, Default, Args)]
pub struct DiscoverArgs {
    /// Probe mode: random (zero knowledge) or value (diagnostic).
    #[arg(long, value_name = "MODE")]
    pub probe_mode: Option<String>,
}

#[derive(Debug, Default, Args)]
pub struct IclArgs {
    /// Example pool: source or selected_target.
    #[arg(long)]
    pub pool: Option<String>,
    /// Examples per prompt.
    #[arg(long)]
    pub k: Option<usize>,
    /// Query dialogue id from the target test set.
    #[arg(long, value_name = "ID")]
    pub dialogue: Option<String>,
    /// Query turn index; defaults to the dialogue's last turn.
    #[arg(long)]
    pub turn: Option<usize>,
    /// Literal query history, bypassing the test set.
    #[arg(long)]
    pub query: Option<String>,
}

#[derive(Debug, Default, Args)]
pub struct SynthArgs {
    /// Output directory; defaults to the workdir.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Training-side dialogues generated per domain.
    #[arg(long)]
    pub dialogues_per_domain: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize raw corpora and the schema into the workdir.
    Ingest(IngestArgs),
    /// Build the leave-one-out split and the seen/unseen report.
    Split,
    /// Export the joint main+aux manifest from the source domains.
    Joint,
    /// Self-train on the unlabeled target pool with cycle filtering.
    Selftrain,
    /// Predict on the target test set and score JGA/AGA.
    Eval(EvalArgs),
    /// Oracular selection bound and the margin report.
    Oracle(OracleArgs),
    /// Discover slot types from masked probes.
    Discover(DiscoverArgs),
    /// Assemble an in-context-learning prompt.
    Icl(IclArgs),
    /// Generate a synthetic raw corpus plus a starter config.
    Synth(SynthArgs),
}

fn apply_overrides(config: &mut RunConfig, cli: &Cli) -> Result<(), CliError> {
    if let Some(domain) = &cli.target_domain {
        config.target_domain = domain.clone();
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(workdir) = &cli.workdir {
        config.paths.workdir = workdir.clone();
    }
    if let Some(kind) = &cli.backend {
        config.backend.kind = parse_keyword("backend kind", kind)?;
    }
    Ok(())
}

/// Resolve the config and dispatch one subcommand.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    apply_overrides(&mut config, cli)?;
    match &cli.command {
        Command::Ingest(args) => commands::cmd_ingest(&config, args),
        Command::Split => commands::cmd_split(&config),
        Command::Joint => commands::cmd_joint(&config),
        Command::Selftrain => commands::cmd_selftrain(&config),
        Command::Eval(args) => commands::cmd_eval(&config, args),
        Command::Oracle(args) => commands::cmd_oracle(&config, args),
        Command::Discover(args) => commands::cmd_discover(&config, args),
        Command::Icl(args) => commands::cmd_icl(&config, args),
        Command::Synth(args) => commands::cmd_synth(&config, args),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    #[test]
    fn exit_codes_follow_the_contract() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
        assert_eq!(CliError::Data("x".into()).exit_code(), 2);
        assert_eq!(CliError::Backend("x".into()).exit_code(), 3);
    }

    #[test]
    fn backend_errors_map_by_kind() {
        use cycledst::backend::BackendError;
        let missing = CliError::from(BackendError::MissingConfig("no endpoint".into()));
        assert_eq!(missing.exit_code(), 1);
        let unlabeled =
            CliError::from(BackendError::UnlabeledOracleSource { id: "d1".into() });
        assert_eq!(unlabeled.exit_code(), 2);
        let training = CliError::from(BackendError::Training("boom".into()));
        assert_eq!(training.exit_code(), 3);
    }

    #[test]
    fn keywords_share_the_config_spelling() {
        use crate::config::{BackendKind, ProbeMode};
        use cycledst::backend::PoolKind;
        let kind: BackendKind = parse_keyword("backend kind", "noisy_oracle").unwrap();
        assert_eq!(kind, BackendKind::NoisyOracle);
        let pool: PoolKind = parse_keyword("pool", "selected_target").unwrap();
        assert_eq!(pool, PoolKind::SelectedTarget);
        let err = parse_keyword::<ProbeMode>("probe mode", "psychic").unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn overrides_rewrite_the_loaded_config() {
        let cli = Cli::try_parse_from([
            "cycledst",
            "--target-domain",
            "train",
            "--seed",
            "99",
            "--workdir",
            "/tmp/elsewhere",
            "--backend",
            "noisy_oracle",
            "split",
        ])
        .unwrap();
        let mut config = RunConfig::default();
        apply_overrides(&mut config, &cli).unwrap();
        assert_eq!(config.target_domain, "train");
        assert_eq!(config.seed, 99);
        assert_eq!(config.paths.workdir, PathBuf::from("/tmp/elsewhere"));
        assert_eq!(config.backend.kind, crate::config::BackendKind::NoisyOracle);
    }

    #[test]
    fn every_subcommand_parses() {
        for args in [
            vec!["cycledst", "ingest", "--train", "a.json", "--schema", "s.json"],
            vec!["cycledst", "split"],
            vec!["cycledst", "joint"],
            vec!["cycledst", "selftrain"],
            vec!["cycledst", "eval", "--predictions", "p.jsonl"],
            vec!["cycledst", "oracle", "--jga-joint", "0.5", "--jga-upper", "0.9"],
            vec!["cycledst", "discover", "--probe-mode", "value"],
            vec!["cycledst", "icl", "--pool", "source", "--k", "4"],
            vec!["cycledst", "synth", "--dialogues-per-domain", "6"],
        ] {
            Cli::try_parse_from(&args).unwrap_or_else(|e| panic!("{args:?}: {e}"));
        }
    }
}
