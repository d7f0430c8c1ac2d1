//! Prompt construction and answer parsing for the two tasks the framework
//! revolves around: the main task asks for a slot's value given the
//! dialogue so far, the inverse task asks which slot type a masked value
//! belongs to. Templates are lowercase and fixed; golden tests pin them.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, SlotSchema};
use crate::text::{find_occurrences, normalize_value};

/// Mask token inserted in place of a value. Remote backends may
/// transliterate it to whatever their model expects.
pub const MASK_TOKEN: &str = "<mask>";

const MAIN_PREFIX: &str = "what is the value of slot ";
const MAIN_SEPARATOR: &str = " in context ";
const INVERSE_PREFIX: &str = "what is the masked slot type in context ";

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("turn {turn} out of range for dialogue {id} with {len} turns")]
    TurnOutOfRange { id: String, turn: usize, len: usize },
    #[error("unknown slot {0:?}")]
    UnknownSlot(String),
    #[error("malformed manifest line {line}: {reason}")]
    MalformedManifest { line: usize, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Flatten a dialogue up to and including `upto_turn` into one line:
/// "system: ... user: ..." pairs joined by single spaces, with the empty
/// opening system utterance omitted.
pub fn serialize_history(dialogue: &Dialogue, upto_turn: usize) -> Result<String, PromptError> {
    if upto_turn >= dialogue.turns.len() {
        return Err(PromptError::TurnOutOfRange {
            id: dialogue.id.clone(),
            turn: upto_turn,
            len: dialogue.turns.len(),
        });
    }
    let mut segments = Vec::with_capacity(2 * (upto_turn + 1));
    for turn in &dialogue.turns[..=upto_turn] {
        if !turn.system_utterance.is_empty() {
            segments.push(format!("system: {}", turn.system_utterance));
        }
        segments.push(format!("user: {}", turn.user_utterance));
    }
    Ok(segments.join(" "))
}

/// Main task prompt. The slot must exist in the schema; predictions for
/// made-up slots would be unanswerable.
pub fn main_prompt(
    schema: &SlotSchema,
    slot_name: &str,
    history: &str,
) -> Result<String, PromptError> {
    if !schema.contains(slot_name) {
        return Err(PromptError::UnknownSlot(slot_name.to_string()));
    }
    Ok(format!("{MAIN_PREFIX}{slot_name}{MAIN_SEPARATOR}{history}?"))
}

/// Recover (slot, history) from a main prompt. Slot names contain no
/// whitespace, so the first space after the prefix ends the slot.
pub fn parse_main_prompt(prompt: &str) -> Option<(&str, &str)> {
    let rest = prompt.strip_prefix(MAIN_PREFIX)?.strip_suffix('?')?;
    let (slot, after) = rest.split_once(' ')?;
    let history = after.strip_prefix("in context ")?;
    Some((slot, history))
}

/// A history with one value replaced by [`MASK_TOKEN`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedHistory {
    pub text: String,
    /// How many occurrences were replaced; always at least 1.
    pub mask_count: usize,
    /// The normalized value that was masked out.
    pub source_value: String,
}

/// Replace every case-insensitive, token-boundary occurrence of `value` in
/// `history` with the mask token. Returns `None` when the value never
/// occurs; that is a signal (the value is not expressed verbatim, like
/// yes/no answers), not an error.
pub fn mask_value(history: &str, value: &str) -> Option<MaskedHistory> {
    let value = normalize_value(value);
    let spans = find_occurrences(history, &value);
    if spans.is_empty() {
        return None;
    }
    let mut text = String::with_capacity(history.len());
    let mut cursor = 0;
    for (start, end) in &spans {
        text.push_str(&history[cursor..*start]);
        text.push_str(MASK_TOKEN);
        cursor = *end;
    }
    text.push_str(&history[cursor..]);
    Some(MaskedHistory { text, mask_count: spans.len(), source_value: value })
}

/// Inverse task prompt over a masked history.
pub fn inverse_prompt(masked: &MaskedHistory) -> String {
    format!("{INVERSE_PREFIX}{}?", masked.text)
}

/// Recover the masked history text from an inverse prompt.
pub fn parse_inverse_prompt(prompt: &str) -> Option<&str> {
    prompt.strip_prefix(INVERSE_PREFIX)?.strip_suffix('?')
}

/// Normalize a main-task answer. Empty and "none" mean the model thinks
/// the slot is not set.
pub fn parse_value(raw: &str) -> Option<String> {
    let norm = normalize_value(raw);
    if norm.is_empty() || norm == "none" {
        None
    } else {
        Some(norm)
    }
}

/// Normalize an inverse-task answer to a known slot type. Candidate names
/// (e.g. discovered types under evaluation) are checked before the schema;
/// anything else is unknown and returns `None`.
pub fn parse_slot_type(
    raw: &str,
    schema: &SlotSchema,
    candidates: &std::collections::BTreeSet<String>,
) -> Option<String> {
    let norm = normalize_value(raw);
    if norm.is_empty() {
        return None;
    }
    if candidates.contains(&norm) || schema.contains(&norm) {
        Some(norm)
    } else {
        None
    }
}

/// Canonical one-line rendering of a predicted state, for in-context
/// examples and reports: "slot=value; ..." sorted by slot, "none" if empty.
pub fn serialize_state(state: &BTreeMap<String, String>) -> String {
    if state.is_empty() {
        return "none".to_string();
    }
    state
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Which task a prompt sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Main,
    Aux,
}

/// One training or inference sample. For aux samples `slot_name` is the
/// masked slot, i.e. the expected answer; for discovery probes it is empty
/// because the answer is what we are after.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSample {
    pub task: Task,
    #[serde(rename = "id")]
    pub dialogue_id: String,
    #[serde(rename = "turn")]
    pub turn_index: usize,
    #[serde(rename = "slot")]
    pub slot_name: String,
    #[serde(rename = "input")]
    pub input_text: String,
    #[serde(rename = "target")]
    pub target_text: String,
}

/// Write samples as JSONL, one per line, in the given order.
pub fn write_manifest<W: Write>(mut writer: W, samples: &[PromptSample]) -> Result<(), PromptError> {
    for s in samples {
        let json = serde_json::to_string(s)
            .map_err(|e| PromptError::MalformedManifest { line: 0, reason: e.to_string() })?;
        writeln!(writer, "{json}")?;
    }
    Ok(())
}

pub fn read_manifest<R: BufRead>(reader: R) -> Result<Vec<PromptSample>, PromptError> {
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample = serde_json::from_str(&line)
            .map_err(|e| PromptError::MalformedManifest { line: i + 1, reason: e.to_string() })?;
        samples.push(sample);
    }
    Ok(samples)
}
