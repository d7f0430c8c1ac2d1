//! One declarative TOML file drives every subcommand; a handful of flags
//! override it. The resolved config is hashed and the hash is stamped into
//! every artifact sidecar, so any output traces back to the exact settings
//! that produced it.

use std::path::{Path, PathBuf};

use cycledst::backend::PoolKind;
use cycledst::selftrain::{Granularity, StopMode};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Domain held out for zero-shot transfer.
    pub target_domain: String,
    /// Master seed; per-stage randomness derives from it.
    pub seed: u64,
    pub paths: PathsConfig,
    pub backend: BackendConfig,
    pub selftrain: SelfTrainConfig,
    pub slotgen: SlotGenConfig,
    pub icl: IclConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            target_domain: "hotel".into(),
            seed: 7,
            paths: PathsConfig::default(),
            backend: BackendConfig::default(),
            selftrain: SelfTrainConfig::default(),
            slotgen: SlotGenConfig::default(),
            icl: IclConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Raw training-portion corpus; consumed by `ingest`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw_train: Option<PathBuf>,
    /// Raw test-portion corpus; optional but required for `split` onwards.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw_test: Option<PathBuf>,
    /// Raw format of both portions: "multiwoz" or "sgd".
    pub format: String,
    /// Slot schema JSON; `ingest` copies it into the workdir.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schema: Option<PathBuf>,
    /// Where all artifacts land.
    pub workdir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            raw_train: None,
            raw_test: None,
            format: "multiwoz".into(),
            schema: None,
            workdir: PathBuf::from("work"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Answers every prompt from gold labels; perfect model stand-in.
    ExtractiveOracle,
    /// Extractive oracle with controlled corruption of main-task answers.
    NoisyOracle,
    /// HTTP serving endpoint (feature-gated in the core crate).
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Main-task corruption rate for the noisy oracle.
    pub p_main: f64,
    /// Aux-task corruption rate for the noisy oracle.
    pub q_aux: f64,
    /// Base URL for the remote backend; falls back to CYCLEDST_ENDPOINT.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// What the remote endpoint expects in place of the internal mask
    /// token, e.g. "<extra_id_0>" for T5-style models.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_token: Option<String>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::ExtractiveOracle,
            p_main: 0.3,
            q_aux: 0.0,
            endpoint: None,
            mask_token: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfTrainConfig {
    pub max_rounds: usize,
    pub stop_mode: StopMode,
    /// Labeled mode stops when the round-over-round JGA gain, in
    /// percentage points, falls below this.
    pub stop_margin: f64,
    pub granularity: Granularity,
    /// Also export inverse-task samples for maskable pseudo-labels.
    pub export_aux: bool,
    pub epochs: u32,
    pub base_model: String,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        SelfTrainConfig {
            max_rounds: 3,
            stop_mode: StopMode::UnlabeledProxy,
            stop_margin: 0.1,
            granularity: Granularity::Turn,
            export_aux: true,
            epochs: 3,
            base_model: "t5-small".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    /// Mask random unigram spans; the true zero-knowledge setting.
    Random,
    /// Mask gold values; diagnostic upper bound, needs labels.
    Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlotGenConfig {
    pub span_length: usize,
    /// Random probes drawn per turn.
    pub num_masks: usize,
    pub min_frequency: usize,
    pub similarity_threshold: f64,
    pub probe_mode: ProbeMode,
}

impl Default for SlotGenConfig {
    fn default() -> Self {
        SlotGenConfig {
            span_length: 1,
            num_masks: 3,
            min_frequency: 3,
            similarity_threshold: 0.8,
            probe_mode: ProbeMode::Random,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IclConfig {
    /// Examples per prompt.
    pub k: usize,
    pub pool: PoolKind,
    pub instructions: String,
}

impl Default for IclConfig {
    fn default() -> Self {
        IclConfig {
            k: 3,
            pool: PoolKind::Source,
            instructions: "Track the dialogue state. For each conversation, list every \
                           slot mentioned so far as slot=value pairs separated by '; ', \
                           or answer none when no slot has a value."
                .into(),
        }
    }
}

impl RunConfig {
    /// Load from a TOML file. A missing file is only an error when the
    /// path was given explicitly; the implicit default falls back to the
    /// built-in configuration so self-contained commands work bare.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let (path, explicit) = match path {
            Some(p) => (p.to_path_buf(), true),
            None => (PathBuf::from("run.toml"), false),
        };
        match std::fs::read_to_string(&path) {
            Ok(text) => toml::from_str(&text)
                .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display()))),
            Err(_) if !explicit => Ok(RunConfig::default()),
            Err(e) => {
                Err(CliError::Usage(format!("cannot read config {}: {e}", path.display())))
            }
        }
    }

    /// First 16 hex chars of the SHA-256 of the resolved config. Stable
    /// across runs with identical settings, sensitive to any change.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn workdir(&self) -> &Path {
        &self.paths.workdir
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_toml_fills_defaults() {
        let config: RunConfig = toml::from_str("target_domain = \"train\"").unwrap();
        assert_eq!(config.target_domain, "train");
        assert_eq!(config.seed, 7);
        assert_eq!(config.backend.kind, BackendKind::ExtractiveOracle);
        assert_eq!(config.selftrain.stop_mode, StopMode::UnlabeledProxy);
        assert_eq!(config.slotgen.num_masks, 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let result: Result<RunConfig, _> = toml::from_str("target_domian = \"train\"");
        assert!(result.is_err(), "typos must not be silently ignored");
    }

    #[test]
    fn enums_parse_from_snake_case() {
        let text = r#"
            [backend]
            kind = "noisy_oracle"
            [selftrain]
            stop_mode = "labeled"
            granularity = "conversation"
            [slotgen]
            probe_mode = "value"
            [icl]
            pool = "selected_target"
        "#;
        let config: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(config.backend.kind, BackendKind::NoisyOracle);
        assert_eq!(config.selftrain.stop_mode, StopMode::Labeled);
        assert_eq!(config.selftrain.granularity, Granularity::Conversation);
        assert_eq!(config.slotgen.probe_mode, ProbeMode::Value);
        assert_eq!(config.icl.pool, PoolKind::SelectedTarget);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        b.seed = 8;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn explicit_missing_config_is_a_usage_error() {
        let err = RunConfig::load(Some(Path::new("/nonexistent/run.toml"))).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        let implicit = RunConfig::load(None);
        assert!(implicit.is_ok() || std::path::Path::new("run.toml").exists());
    }
}
