//! MultiWOZ-style raw format: a JSON object mapping dialogue id to a record
//! with a `log` of alternating user/system entries. Each system entry
//! carries the belief state reached after the preceding user turn, as
//! `metadata: {domain: {book: {...}, semi: {...}}}`.

use std::collections::BTreeMap;
use std::io::Read;

use serde::Deserialize;
use serde_json::Value;

use super::{is_deletion_marker, CorpusError, Dialogue, GoldValue, StateMap, Turn};
use crate::text::{normalize_value, tidy_text};

#[derive(Deserialize)]
struct RawDialogue {
    #[serde(default)]
    goal: Option<serde_json::Map<String, Value>>,
    log: Vec<RawLogEntry>,
}

#[derive(Deserialize)]
struct RawLogEntry {
    text: String,
    #[serde(default)]
    metadata: serde_json::Map<String, Value>,
}

pub(super) fn parse<R: Read>(reader: R) -> Result<Vec<Dialogue>, CorpusError> {
    let raw: BTreeMap<String, RawDialogue> = serde_json::from_reader(reader)
        .map_err(|e| CorpusError::MalformedInput(e.to_string()))?;
    raw.into_iter().map(|(id, d)| parse_dialogue(id, d)).collect()
}

fn parse_dialogue(id: String, raw: RawDialogue) -> Result<Dialogue, CorpusError> {
    let fail = |reason: String| CorpusError::MalformedDialogue { id: id.clone(), reason };
    if raw.log.is_empty() {
        return Err(fail("empty log".into()));
    }
    if raw.log.len() % 2 != 0 {
        return Err(fail(format!(
            "log has {} entries; expected alternating user/system pairs",
            raw.log.len()
        )));
    }
    let n_turns = raw.log.len() / 2;
    let mut turns = Vec::with_capacity(n_turns);
    let mut states = Vec::with_capacity(n_turns);
    let mut acc = StateMap::new();
    for t in 0..n_turns {
        let user = tidy_text(&raw.log[2 * t].text);
        if user.is_empty() {
            return Err(fail(format!("empty user utterance at turn {t}")));
        }
        let system = if t == 0 { String::new() } else { tidy_text(&raw.log[2 * t - 1].text) };
        turns.push(Turn { index: t, system_utterance: system, user_utterance: user });
        fold_metadata(&mut acc, &raw.log[2 * t + 1].metadata);
        states.push(acc.clone());
    }
    let mut domains: std::collections::BTreeSet<String> = states
        .iter()
        .flat_map(|s| s.keys())
        .filter_map(|slot| slot.split_once('-').map(|(d, _)| d.to_string()))
        .collect();
    if let Some(goal) = &raw.goal {
        for (domain, v) in goal {
            // goal objects also hold bookkeeping keys; a domain is one whose
            // goal is a non-empty object
            if v.as_object().is_some_and(|o| !o.is_empty()) {
                domains.insert(normalize_value(domain));
            }
        }
    }
    Ok(Dialogue { id, domains, turns, gold_states: Some(states) })
}

/// Apply one metadata snapshot to the accumulated state. Annotations list
/// slots with explicit unset markers rather than dropping them, so each
/// (slot, value) pair is an update: markers delete, everything else sets.
fn fold_metadata(acc: &mut StateMap, metadata: &serde_json::Map<String, Value>) {
    for (domain, sections) in metadata {
        let Some(sections) = sections.as_object() else { continue };
        for section in ["book", "semi"] {
            let Some(slots) = sections.get(section).and_then(Value::as_object) else { continue };
            for (slot, value) in slots {
                if slot == "booked" {
                    continue;
                }
                let slot_name = normalize_value(&format!("{domain}-{slot}"));
                apply_update(acc, slot_name, value);
            }
        }
    }
}

fn apply_update(acc: &mut StateMap, slot_name: String, value: &Value) {
    let gold = match value {
        Value::String(s) => {
            let norm = normalize_value(s);
            if is_deletion_marker(&norm) {
                acc.remove(&slot_name);
                return;
            }
            // a pipe joins alternative surface forms in the annotation
            GoldValue::parse_joined(s)
        }
        Value::Array(items) => {
            let alts: Vec<&str> = items.iter().filter_map(Value::as_str).collect();
            GoldValue::with_alternatives(alts)
        }
        _ => None,
    };
    match gold {
        Some(v) => {
            acc.insert(slot_name, v);
        }
        None => {
            acc.remove(&slot_name);
        }
    }
}
