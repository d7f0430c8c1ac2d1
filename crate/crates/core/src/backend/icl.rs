//! In-context-learning prompt assembly. Zero-shot inference on an unseen
//! domain can instead condition on worked examples; the interesting
//! comparison is where those examples come from. A source pool draws from
//! labeled non-target domains, a selected-target pool draws from the
//! pseudo-labeled turns the consistency filter kept. Everything else about
//! the prompt is identical so the two conditions are comparable.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::BackendError;

/// One worked example: a flattened conversation and its state line (as
/// produced by `prompting::serialize_state`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IclExample {
    pub domain: String,
    pub history: String,
    pub state_line: String,
}

/// Where in-context examples are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    /// Labeled dialogues from the non-target domains.
    Source,
    /// Pseudo-labeled target turns kept by the consistency filter.
    SelectedTarget,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IclPrompt {
    pub instructions: String,
    pub examples: Vec<IclExample>,
    pub query: String,
    pub pool: PoolKind,
}

impl IclPrompt {
    /// Render to the final prompt string. The k examples and the query use
    /// the same "conversation:/state:" shape, so the model answers the
    /// query in the format the examples demonstrate.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.instructions);
        out.push_str("\n\n");
        out.push_str(&self.example_block());
        out.push_str(&format!("conversation: {}\nstate:", self.query));
        out
    }

    /// Just the examples section; lets tests show two prompts differ only
    /// here.
    pub fn example_block(&self) -> String {
        let mut out = String::new();
        for ex in &self.examples {
            out.push_str(&format!("conversation: {}\nstate: {}\n\n", ex.history, ex.state_line));
        }
        out
    }
}

/// Pick `k` examples for `query` from the pool and assemble the prompt.
/// Source pools exclude the target domain (it is supposed to be unseen);
/// selected-target pools contain only the target domain. Sampling is
/// without replacement and deterministic in `seed`; when the pool holds
/// fewer than `k` eligible examples, all of them are used.
pub fn build_icl_prompt(
    instructions: &str,
    pool: &[IclExample],
    query: &str,
    k: usize,
    pool_kind: PoolKind,
    target_domain: &str,
    seed: u64,
) -> Result<IclPrompt, BackendError> {
    if k == 0 {
        return Err(BackendError::InvalidRequest("k must be at least 1".into()));
    }
    let eligible: Vec<&IclExample> = pool
        .iter()
        .filter(|ex| match pool_kind {
            PoolKind::Source => ex.domain != target_domain,
            PoolKind::SelectedTarget => ex.domain == target_domain,
        })
        .collect();
    if eligible.is_empty() {
        return Err(BackendError::InvalidRequest(format!(
            "no eligible examples in {pool_kind:?} pool for target {target_domain:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..eligible.len()).collect();
    indices.shuffle(&mut rng);
    indices.truncate(k);
    let examples = indices.into_iter().map(|i| eligible[i].clone()).collect();
    Ok(IclPrompt {
        instructions: instructions.to_string(),
        examples,
        query: query.to_string(),
        pool: pool_kind,
    })
}

/// A follow-up turn that confronts the model with its own two answers and
/// asks for a final value. Used in chat-style self-correction.
pub fn build_revision_turn(
    history: &str,
    slot_name: &str,
    value: &str,
    slot_type: &str,
) -> Result<String, BackendError> {
    for (field, content) in [
        ("history", history),
        ("slot name", slot_name),
        ("value", value),
        ("slot type", slot_type),
    ] {
        if content.trim().is_empty() {
            return Err(BackendError::InvalidRequest(format!("revision turn needs a {field}")));
        }
    }
    Ok(format!(
        "here is the conversation: {history} you answered two questions about it. \
         for the value of slot {slot_name}, you answered: {value}. \
         for the slot type of the masked value, you answered: {slot_type}. \
         check whether these answers agree and reply with the final value of slot {slot_name}."
    ))
}
