//! Oracular selection: the research-only upper bound for pseudo-label
//! filtering. Instead of the cycle check, gold labels decide which turns
//! survive, so the selected set has perfect precision by construction.
//! Comparing a real run's quality against this bound shows how much head
//! room the filtering strategy leaves.
//!
//! Gold access goes through [`SealedGoldStore`] under the
//! `OracularSelection` purpose, so every read is on the record.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{AccessPurpose, SealedGoldStore, SlotSchema, StateMap, TurnKey};
use crate::selftrain::{SelectionReport, SelectionStats, TurnPrediction};

#[derive(Debug, thiserror::Error)]
pub enum OracleSelectionError {
    #[error("target domain {0:?} has no schema slots")]
    UnknownDomain(String),
    #[error("no gold state for dialogue {id:?} turn {turn}")]
    MissingGold { id: String, turn: usize },
    #[error("{name} must lie in [0, 1], got {value}")]
    InvalidMetric { name: &'static str, value: f64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn target_slot_names(
    schema: &SlotSchema,
    target_domain: &str,
) -> Result<BTreeSet<String>, OracleSelectionError> {
    let slots: BTreeSet<String> = schema
        .slots_for_domain(target_domain)
        .map(|e| e.slot_name.clone())
        .collect();
    if slots.is_empty() {
        return Err(OracleSelectionError::UnknownDomain(target_domain.to_string()));
    }
    Ok(slots)
}

fn scoped_gold<'a>(
    gold: &'a StateMap,
    scope: &BTreeSet<String>,
) -> BTreeMap<&'a str, &'a crate::corpus::GoldValue> {
    gold.iter()
        .filter(|(slot, _)| scope.contains(*slot))
        .map(|(slot, value)| (slot.as_str(), value))
        .collect()
}

/// Select exactly the turns whose predicted target-domain state matches
/// gold: same active slots, every value among the gold alternatives. The
/// returned report is interchangeable with the cycle-based one.
pub fn oracular_select(
    predictions: &[TurnPrediction],
    store: &SealedGoldStore,
    schema: &SlotSchema,
    target_domain: &str,
) -> Result<SelectionReport, OracleSelectionError> {
    let scope = target_slot_names(schema, target_domain)?;
    let mut selected: BTreeSet<TurnKey> = BTreeSet::new();
    let mut rejected: BTreeSet<TurnKey> = BTreeSet::new();
    for pred in predictions {
        let key = (pred.dialogue_id.clone(), pred.turn_index);
        let gold = store
            .state(AccessPurpose::OracularSelection, &pred.dialogue_id, pred.turn_index)
            .ok_or_else(|| OracleSelectionError::MissingGold {
                id: pred.dialogue_id.clone(),
                turn: pred.turn_index,
            })?;
        let gold = scoped_gold(gold, &scope);
        let predicted: BTreeMap<&str, &str> = pred
            .values
            .iter()
            .filter(|(slot, _)| scope.contains(*slot))
            .map(|(slot, value)| (slot.as_str(), value.as_str()))
            .collect();
        let matches = gold.len() == predicted.len()
            && gold
                .iter()
                .all(|(slot, value)| predicted.get(slot).is_some_and(|v| value.matches(v)));
        if matches {
            selected.insert(key);
        } else {
            rejected.insert(key);
        }
    }
    let stats = SelectionStats {
        selected_count: selected.len(),
        rejected_count: rejected.len(),
        unmaskable_skipped: 0,
    };
    Ok(SelectionReport { selected, rejected, stats })
}

/// Fraction of per-slot pseudo-labels inside `keys` that agree with gold;
/// `None` when the set holds no predictions. Reads gold under the
/// `Evaluation` purpose.
pub fn pseudo_label_precision(
    predictions: &[TurnPrediction],
    keys: &BTreeSet<TurnKey>,
    store: &SealedGoldStore,
    schema: &SlotSchema,
    target_domain: &str,
) -> Result<Option<f64>, OracleSelectionError> {
    let scope = target_slot_names(schema, target_domain)?;
    let mut total = 0usize;
    let mut correct = 0usize;
    for pred in predictions {
        let key = (pred.dialogue_id.clone(), pred.turn_index);
        if !keys.contains(&key) {
            continue;
        }
        let gold = store
            .state(AccessPurpose::Evaluation, &pred.dialogue_id, pred.turn_index)
            .ok_or_else(|| OracleSelectionError::MissingGold {
                id: pred.dialogue_id.clone(),
                turn: pred.turn_index,
            })?;
        for (slot, value) in &pred.values {
            if !scope.contains(slot) {
                continue;
            }
            total += 1;
            if gold.get(slot).is_some_and(|g| g.matches(value)) {
                correct += 1;
            }
        }
    }
    Ok(if total == 0 { None } else { Some(correct as f64 / total as f64) })
}

/// Gap between a run's joint accuracy and the oracular upper bound on the
/// same data. A negative margin means the "upper bound" run scored below
/// the real one, which signals a setup mistake worth investigating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    pub domain: String,
    pub jga_joint: f64,
    pub jga_upper: f64,
    pub margin: f64,
    pub negative: bool,
}

impl MarginReport {
    pub fn new(
        domain: impl Into<String>,
        jga_joint: f64,
        jga_upper: f64,
    ) -> Result<Self, OracleSelectionError> {
        for (name, value) in [("jga_joint", jga_joint), ("jga_upper", jga_upper)] {
            if !(0.0..=1.0).contains(&value) || value.is_nan() {
                return Err(OracleSelectionError::InvalidMetric { name, value });
            }
        }
        let margin = jga_upper - jga_joint;
        Ok(MarginReport {
            domain: domain.into(),
            jga_joint,
            jga_upper,
            margin,
            negative: margin < 0.0,
        })
    }

    pub fn to_writer<W: std::io::Write>(&self, writer: W) -> Result<(), OracleSelectionError> {
        serde_json::to_writer_pretty(writer, self).map_err(std::io::Error::other)?;
        Ok(())
    }

    /// One-row CSV with a header, for spreadsheets collecting many
    /// domains.
    pub fn write_csv<W: std::io::Write>(&self, mut writer: W) -> Result<(), OracleSelectionError> {
        writeln!(writer, "domain,jga_joint,jga_upper,margin")?;
        writeln!(
            writer,
            "{},{},{},{}",
            self.domain, self.jga_joint, self.jga_upper, self.margin
        )?;
        Ok(())
    }
}
