//! SGD-style raw format: a JSON array of dialogues whose turns alternate
//! USER/SYSTEM starting with the user. User turns carry per-service frames;
//! each frame's `state.slot_values` is the full accumulated state for that
//! service, with values given as a list of accepted surface forms.

use std::collections::BTreeMap;
use std::io::Read;

use serde::Deserialize;

use super::{is_deletion_marker, CorpusError, Dialogue, GoldValue, StateMap, Turn};
use crate::text::{normalize_value, tidy_text};

#[derive(Deserialize)]
struct RawDialogue {
    dialogue_id: String,
    #[serde(default)]
    services: Vec<String>,
    turns: Vec<RawTurn>,
}

#[derive(Deserialize)]
struct RawTurn {
    speaker: String,
    utterance: String,
    #[serde(default)]
    frames: Vec<RawFrame>,
}

#[derive(Deserialize)]
struct RawFrame {
    service: String,
    #[serde(default)]
    state: Option<RawState>,
}

#[derive(Deserialize)]
struct RawState {
    #[serde(default)]
    slot_values: BTreeMap<String, Vec<String>>,
}

/// "Restaurants_1" -> "restaurants": schema variants of one service are the
/// same domain.
fn service_domain(service: &str) -> String {
    let lower = normalize_value(service);
    match lower.rsplit_once('_') {
        Some((base, suffix)) if !base.is_empty() && suffix.chars().all(|c| c.is_ascii_digit()) => {
            base.to_string()
        }
        _ => lower,
    }
}

pub(super) fn parse<R: Read>(reader: R) -> Result<Vec<Dialogue>, CorpusError> {
    let raw: Vec<RawDialogue> = serde_json::from_reader(reader)
        .map_err(|e| CorpusError::MalformedInput(e.to_string()))?;
    raw.into_iter().map(parse_dialogue).collect()
}

fn parse_dialogue(raw: RawDialogue) -> Result<Dialogue, CorpusError> {
    let id = raw.dialogue_id;
    let fail = |reason: String| CorpusError::MalformedDialogue { id: id.clone(), reason };
    if raw.turns.is_empty() {
        return Err(fail("no turns".into()));
    }
    for (i, t) in raw.turns.iter().enumerate() {
        let expected = if i % 2 == 0 { "USER" } else { "SYSTEM" };
        if t.speaker != expected {
            return Err(fail(format!("turn {i} spoken by {:?}, expected {expected}", t.speaker)));
        }
    }
    let n_turns = raw.turns.len().div_ceil(2);
    let mut turns = Vec::with_capacity(n_turns);
    let mut states = Vec::with_capacity(n_turns);
    // full state per service; a user turn's frame replaces its service
    let mut per_service: BTreeMap<String, StateMap> = BTreeMap::new();
    for t in 0..n_turns {
        let user_entry = &raw.turns[2 * t];
        let user = tidy_text(&user_entry.utterance);
        if user.is_empty() {
            return Err(fail(format!("empty user utterance at turn {t}")));
        }
        let system =
            if t == 0 { String::new() } else { tidy_text(&raw.turns[2 * t - 1].utterance) };
        turns.push(Turn { index: t, system_utterance: system, user_utterance: user });

        for frame in &user_entry.frames {
            let Some(state) = &frame.state else { continue };
            let domain = service_domain(&frame.service);
            let mut service_state = StateMap::new();
            for (slot, values) in &state.slot_values {
                let raws: Vec<&str> = values
                    .iter()
                    .map(String::as_str)
                    .filter(|v| !is_deletion_marker(&normalize_value(v)))
                    .collect();
                if let Some(gold) = GoldValue::with_alternatives(raws) {
                    service_state.insert(normalize_value(&format!("{domain}-{slot}")), gold);
                }
            }
            per_service.insert(domain, service_state);
        }
        let mut flat = StateMap::new();
        for service_state in per_service.values() {
            flat.extend(service_state.iter().map(|(k, v)| (k.clone(), v.clone())));
        }
        states.push(flat);
    }
    let mut domains: std::collections::BTreeSet<String> =
        raw.services.iter().map(|s| service_domain(s)).collect();
    domains.extend(per_service.keys().cloned());
    Ok(Dialogue { id, domains, turns, gold_states: Some(states) })
}
