//! Evaluation: joint goal accuracy, average goal accuracy, per-slot
//! accuracy and seen/unseen aggregates.
//!
//! JGA is the strict metric: a turn counts only when the predicted
//! non-none map over the slots in scope exactly equals gold's, so a single
//! hallucinated slot sinks the turn. AGA is the forgiving one: a
//! micro-average over (turn, slot) pairs where gold is active, so
//! hallucinations on inactive slots do not count against it at all.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{SeenStatus, SlotSchema, StateMap, TurnKey};
use crate::text::normalize_value;

/// Predicted values per turn: slot -> normalized value, no "none" entries.
pub type PredictedState = BTreeMap<String, String>;
pub type Predictions = BTreeMap<TurnKey, PredictedState>;
pub type GoldStates = BTreeMap<TurnKey, StateMap>;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(
        "prediction/gold key mismatch: {} turns missing from predictions, {} missing from gold",
        missing_from_predictions.len(),
        missing_from_gold.len()
    )]
    KeyMismatch {
        missing_from_predictions: Vec<TurnKey>,
        missing_from_gold: Vec<TurnKey>,
    },
    #[error("no turns to evaluate")]
    EmptySet,
    #[error("unknown target domain {0:?}")]
    UnknownDomain(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn check_keys(predictions: &Predictions, gold: &GoldStates) -> Result<(), EvalError> {
    if predictions.is_empty() && gold.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let missing_from_predictions: Vec<TurnKey> =
        gold.keys().filter(|k| !predictions.contains_key(*k)).cloned().collect();
    let missing_from_gold: Vec<TurnKey> =
        predictions.keys().filter(|k| !gold.contains_key(*k)).cloned().collect();
    if missing_from_predictions.is_empty() && missing_from_gold.is_empty() {
        Ok(())
    } else {
        Err(EvalError::KeyMismatch { missing_from_predictions, missing_from_gold })
    }
}

fn scoped_prediction<'a>(
    state: &'a PredictedState,
    scope: &BTreeSet<String>,
) -> BTreeMap<&'a str, String> {
    state
        .iter()
        .filter(|(slot, _)| scope.contains(*slot))
        .filter_map(|(slot, value)| {
            let v = normalize_value(value);
            (!v.is_empty() && v != "none").then(|| (slot.as_str(), v))
        })
        .collect()
}

/// Whether one turn matches exactly over the slots in scope.
fn turn_matches(pred: &PredictedState, gold: &StateMap, scope: &BTreeSet<String>) -> bool {
    let pred = scoped_prediction(pred, scope);
    let gold_scoped: BTreeMap<&str, _> = gold
        .iter()
        .filter(|(slot, _)| scope.contains(*slot))
        .map(|(slot, value)| (slot.as_str(), value))
        .collect();
    if pred.len() != gold_scoped.len() {
        return false;
    }
    gold_scoped.iter().all(|(slot, value)| pred.get(slot).is_some_and(|p| value.matches(p)))
}

/// Joint goal accuracy: fraction of turns whose predicted non-none map
/// over `slots_in_scope` equals gold's exactly. Any alternative of a
/// multi-value gold counts as a match.
pub fn jga(
    predictions: &Predictions,
    gold: &GoldStates,
    slots_in_scope: &BTreeSet<String>,
) -> Result<f64, EvalError> {
    check_keys(predictions, gold)?;
    let matched = gold
        .iter()
        .filter(|(key, gold_state)| turn_matches(&predictions[*key], gold_state, slots_in_scope))
        .count();
    Ok(matched as f64 / gold.len() as f64)
}

/// Average goal accuracy: over all (turn, slot) pairs where gold is active
/// (non-none) and in scope, the fraction predicted correctly. `None` when
/// no slot is ever active: the metric is undefined, not zero.
pub fn aga(
    predictions: &Predictions,
    gold: &GoldStates,
    slots_in_scope: &BTreeSet<String>,
) -> Result<Option<f64>, EvalError> {
    check_keys(predictions, gold)?;
    let mut active = 0usize;
    let mut correct = 0usize;
    for (key, gold_state) in gold {
        let pred = scoped_prediction(&predictions[key], slots_in_scope);
        for (slot, value) in gold_state {
            if !slots_in_scope.contains(slot) {
                continue;
            }
            active += 1;
            if pred.get(slot.as_str()).is_some_and(|p| value.matches(p)) {
                correct += 1;
            }
        }
    }
    if active == 0 {
        Ok(None)
    } else {
        Ok(Some(correct as f64 / active as f64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotAccuracyReport {
    /// Accuracy per slot over all turns; both-none counts as correct.
    pub per_slot: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seen_avg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unseen_avg: Option<f64>,
}

/// Per-slot accuracy for every slot in `seen_map`, plus macro-averages of
/// the seen and unseen groups.
pub fn slot_accuracy(
    predictions: &Predictions,
    gold: &GoldStates,
    seen_map: &BTreeMap<String, SeenStatus>,
) -> Result<SlotAccuracyReport, EvalError> {
    check_keys(predictions, gold)?;
    let turns = gold.len() as f64;
    let mut per_slot = BTreeMap::new();
    for slot in seen_map.keys() {
        let mut correct = 0usize;
        for (key, gold_state) in gold {
            let pred_value = predictions[key]
                .get(slot)
                .map(|v| normalize_value(v))
                .filter(|v| !v.is_empty() && v != "none");
            let ok = match (gold_state.get(slot), pred_value) {
                (Some(gold_value), Some(pred)) => gold_value.matches(&pred),
                (None, None) => true,
                _ => false,
            };
            if ok {
                correct += 1;
            }
        }
        per_slot.insert(slot.clone(), correct as f64 / turns);
    }
    let group_avg = |status: SeenStatus| {
        let values: Vec<f64> = seen_map
            .iter()
            .filter(|(_, s)| **s == status)
            .map(|(slot, _)| per_slot[slot])
            .collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    };
    let seen_avg = group_avg(SeenStatus::Seen);
    let unseen_avg = group_avg(SeenStatus::Unseen);
    Ok(SlotAccuracyReport { per_slot, seen_avg, unseen_avg })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub target_domain: String,
    pub jga: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aga: Option<f64>,
    pub turn_count: usize,
    pub active_slot_count: usize,
    pub per_slot: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seen_avg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unseen_avg: Option<f64>,
}

/// Full report for one target domain: scope and seen/unseen grouping come
/// from the schema.
pub fn evaluate(
    predictions: &Predictions,
    gold: &GoldStates,
    schema: &SlotSchema,
    target_domain: &str,
) -> Result<MetricsReport, EvalError> {
    let seen_map = crate::corpus::classify_seen(schema, target_domain)
        .map_err(|_| EvalError::UnknownDomain(target_domain.to_string()))?;
    let scope: BTreeSet<String> = seen_map.keys().cloned().collect();
    let jga_value = jga(predictions, gold, &scope)?;
    let aga_value = aga(predictions, gold, &scope)?;
    let slots = slot_accuracy(predictions, gold, &seen_map)?;
    let active_slot_count = gold
        .values()
        .map(|state| state.keys().filter(|s| scope.contains(*s)).count())
        .sum();
    Ok(MetricsReport {
        target_domain: normalize_value(target_domain),
        jga: jga_value,
        aga: aga_value,
        turn_count: gold.len(),
        active_slot_count,
        per_slot: slots.per_slot,
        seen_avg: slots.seen_avg,
        unseen_avg: slots.unseen_avg,
    })
}

impl MetricsReport {
    pub fn to_writer<W: Write>(&self, writer: W) -> Result<(), EvalError> {
        serde_json::to_writer_pretty(writer, self)
            .map_err(|e| EvalError::Io(std::io::Error::other(e)))?;
        Ok(())
    }

    /// Per-slot CSV: slot, seen/unseen status, accuracy.
    pub fn write_per_slot_csv<W: Write>(
        &self,
        mut writer: W,
        seen_map: &BTreeMap<String, SeenStatus>,
    ) -> Result<(), EvalError> {
        writeln!(writer, "slot,status,accuracy")?;
        for (slot, accuracy) in &self.per_slot {
            // slots the seen map does not know (discovered types) are unseen
            let status = match seen_map.get(slot) {
                Some(SeenStatus::Seen) => "seen",
                _ => "unseen",
            };
            writeln!(writer, "{slot},{status},{accuracy}")?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct PredictionLine {
    id: String,
    turn: usize,
    values: PredictedState,
}

/// Write predictions as JSONL, one turn per line:
/// `{"id": ..., "turn": ..., "values": {slot: value}}`.
pub fn write_predictions<W: Write>(
    mut writer: W,
    predictions: &Predictions,
) -> Result<(), EvalError> {
    for ((id, turn), values) in predictions {
        let line = PredictionLine { id: id.clone(), turn: *turn, values: values.clone() };
        let json = serde_json::to_string(&line).map_err(std::io::Error::other)?;
        writeln!(writer, "{json}")?;
    }
    Ok(())
}

/// Read predictions written by [`write_predictions`]. Extra fields on a
/// line (cycle statuses for instance) are ignored.
pub fn read_predictions<R: std::io::BufRead>(reader: R) -> Result<Predictions, EvalError> {
    let mut predictions = Predictions::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PredictionLine = serde_json::from_str(&line)
            .map_err(|e| EvalError::Io(std::io::Error::other(e)))?;
        predictions.insert((parsed.id, parsed.turn), parsed.values);
    }
    Ok(predictions)
}
