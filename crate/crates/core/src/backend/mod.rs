//! Model backends. The pipeline is model-agnostic: everything upstream
//! produces prompt batches and training jobs, and a [`Backend`] turns them
//! into completions and model ids. Oracle backends answer from gold labels
//! and make the pipeline testable without a model; the HTTP adapter behind
//! the `remote` feature talks to a real serving endpoint.

mod icl;
mod oracle;
#[cfg(feature = "remote")]
mod remote;

use std::io::{Read, Write};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::prompting::PromptSample;

pub use icl::{build_icl_prompt, build_revision_turn, IclExample, IclPrompt, PoolKind};
pub use oracle::{ExtractiveOracleBackend, NoisyOracleBackend};
#[cfg(feature = "remote")]
pub use remote::{RemoteBackend, RemoteConfig};

/// How fine-tuning combines the main and aux tasks: every emitted sample
/// weighs the same, so the task mix follows the manifest's natural ratio.
pub const LOSS_RULE: &str = "uniform average over emitted samples";

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    /// Some generations failed. `outcomes` stays aligned with the request
    /// batch: `Ok` entries are completions, `Err` entries explain the
    /// failure, and `failed` lists the failing indices.
    #[error("generation failed for {} of {} requests", failed.len(), outcomes.len())]
    Generation { outcomes: Vec<Result<String, String>>, failed: Vec<usize> },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("manifest {0} is empty")]
    EmptyManifest(PathBuf),
    #[error("training failed: {0}")]
    Training(String),
    #[error("oracle source dialogue {id} has no gold states")]
    UnlabeledOracleSource { id: String },
    #[error("missing configuration: {0}")]
    MissingConfig(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One generation call: a prompt sample plus decoding knobs.
#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub sample: PromptSample,
    /// Upper bound on generated tokens; must be at least 1.
    pub decode_budget: usize,
    pub temperature: f64,
}

impl GenerationRequest {
    /// Deterministic decoding with a budget that fits slot values.
    pub fn greedy(sample: PromptSample) -> Self {
        GenerationRequest { sample, decode_budget: 24, temperature: 0.0 }
    }
}

pub(crate) fn validate_requests(requests: &[GenerationRequest]) -> Result<(), BackendError> {
    for (i, r) in requests.iter().enumerate() {
        if r.decode_budget == 0 {
            return Err(BackendError::InvalidRequest(format!(
                "request {i} has a zero decode budget"
            )));
        }
        if !(0.0..=2.0).contains(&r.temperature) {
            return Err(BackendError::InvalidRequest(format!(
                "request {i} has temperature {} outside [0, 2]",
                r.temperature
            )));
        }
    }
    Ok(())
}

/// A fine-tuning job over an exported manifest. The wire/file form carries
/// exactly the manifest path, epoch count and base model; the loss rule is
/// fixed ([`LOSS_RULE`]) rather than configurable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingJob {
    #[serde(rename = "manifest")]
    pub manifest_path: PathBuf,
    pub epochs: u32,
    pub base_model: String,
}

impl TrainingJob {
    pub fn new(manifest_path: impl Into<PathBuf>, epochs: u32, base_model: impl Into<String>) -> Self {
        TrainingJob { manifest_path: manifest_path.into(), epochs, base_model: base_model.into() }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.epochs == 0 {
            return Err(BackendError::InvalidRequest("epochs must be at least 1".into()));
        }
        if self.base_model.is_empty() {
            return Err(BackendError::InvalidRequest("base model id is empty".into()));
        }
        Ok(())
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self, BackendError> {
        serde_json::from_reader(reader)
            .map_err(|e| BackendError::InvalidRequest(format!("bad training job: {e}")))
    }

    pub fn to_writer<W: Write>(&self, writer: W) -> Result<(), BackendError> {
        serde_json::to_writer_pretty(writer, self)
            .map_err(|e| BackendError::InvalidRequest(format!("unserializable job: {e}")))?;
        Ok(())
    }
}

/// A chat message for backends that also expose a chat-style interface,
/// used by in-context-learning and revision flows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: "user".into(), content: content.into() }
    }
}

/// Anything that can answer prompt batches and run fine-tuning jobs.
///
/// `generate_batch` returns one completion per request, in request order.
/// Implementations must keep that alignment even on partial failure by
/// returning [`BackendError::Generation`] with per-request outcomes.
pub trait Backend {
    fn name(&self) -> &str;

    fn generate_batch(&self, requests: &[GenerationRequest]) -> Result<Vec<String>, BackendError>;

    /// Run (or simulate) fine-tuning and return the resulting model id.
    fn submit_training(&self, job: &TrainingJob) -> Result<String, BackendError>;
}

/// Shared by backends that only simulate training: validate the job, hash
/// the manifest and derive a fresh model id from it, so identical inputs
/// give identical ids.
pub(crate) fn simulated_training_id(job: &TrainingJob) -> Result<String, BackendError> {
    use sha2::{Digest, Sha256};
    job.validate()?;
    let bytes = std::fs::read(&job.manifest_path).map_err(|e| {
        BackendError::Training(format!("cannot read manifest {}: {e}", job.manifest_path.display()))
    })?;
    let samples = crate::prompting::read_manifest(bytes.as_slice())
        .map_err(|e| BackendError::Training(format!("bad manifest: {e}")))?;
    if samples.is_empty() {
        return Err(BackendError::EmptyManifest(job.manifest_path.clone()));
    }
    let digest = Sha256::digest(&bytes);
    let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
    Ok(format!("{}-{}", job.base_model, hex))
}
