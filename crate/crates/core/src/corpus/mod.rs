//! Corpus model and ingestion.
//!
//! Raw dialogue corpora come in per-dataset formats; everything downstream
//! works on one normalized representation: a dialogue is an ordered list of
//! (system, user) turn pairs plus, when labels exist, one accumulated belief
//! state per turn. Slot names are canonical `domain-slot` strings and values
//! are lowercase with collapsed whitespace.

mod multiwoz;
mod sgd;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::text::{normalize_value, tidy_text};

/// Identifies one dialogue turn across report and prediction maps.
pub type TurnKey = (String, usize);

/// Accumulated belief state at one turn: slot name to gold value.
pub type StateMap = BTreeMap<String, GoldValue>;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("malformed input: {0}")]
    MalformedInput(String),
    #[error("malformed dialogue {id}: {reason}")]
    MalformedDialogue { id: String, reason: String },
    #[error("slots not in schema: {}", slots.join(", "))]
    UnknownSlots { slots: Vec<String> },
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("unknown target domain {0:?}")]
    UnknownDomain(String),
    #[error("dialogue ids appear in both train and test: {}", ids.join(", "))]
    OverlappingPortions { ids: Vec<String> },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A gold value with its accepted alternatives. The raw corpora annotate
/// some slots with several interchangeable surface forms; the first
/// alternative is the primary form used when a single string is needed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldValue {
    alternatives: Vec<String>,
}

impl GoldValue {
    /// Build from one raw string. Returns `None` when the value normalizes
    /// to empty.
    pub fn new(raw: &str) -> Option<Self> {
        Self::with_alternatives(std::iter::once(raw))
    }

    /// Build from raw alternatives, normalizing each and dropping empties
    /// and duplicates while keeping the original order.
    pub fn with_alternatives<'a, I: IntoIterator<Item = &'a str>>(raws: I) -> Option<Self> {
        let mut alternatives = Vec::new();
        for raw in raws {
            let v = normalize_value(raw);
            if !v.is_empty() && !alternatives.contains(&v) {
                alternatives.push(v);
            }
        }
        if alternatives.is_empty() {
            None
        } else {
            Some(GoldValue { alternatives })
        }
    }

    /// Parse the pipe-joined form used in the normalized corpus file
    /// ("a|b" means either form is accepted).
    pub fn parse_joined(raw: &str) -> Option<Self> {
        Self::with_alternatives(raw.split('|'))
    }

    pub fn primary(&self) -> &str {
        &self.alternatives[0]
    }

    pub fn alternatives(&self) -> &[String] {
        &self.alternatives
    }

    /// Whether a normalized candidate string matches any alternative.
    pub fn matches(&self, candidate: &str) -> bool {
        self.alternatives.iter().any(|a| a == candidate)
    }

    /// Pipe-joined form, the inverse of [`GoldValue::parse_joined`].
    pub fn joined(&self) -> String {
        self.alternatives.join("|")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub index: usize,
    /// Empty on the opening turn, where the user speaks first.
    pub system_utterance: String,
    pub user_utterance: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub id: String,
    pub domains: BTreeSet<String>,
    pub turns: Vec<Turn>,
    /// One accumulated state per turn; `None` for unlabeled dialogues.
    pub gold_states: Option<Vec<StateMap>>,
}

impl Dialogue {
    /// Structural invariants: contiguous turn indices, non-empty user
    /// utterances, and one state per turn when labeled.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |reason: String| CorpusError::MalformedDialogue { id: self.id.clone(), reason };
        if self.turns.is_empty() {
            return Err(fail("dialogue has no turns".into()));
        }
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.index != i {
                return Err(fail(format!("turn index {} at position {}", turn.index, i)));
            }
            if turn.user_utterance.is_empty() {
                return Err(fail(format!("empty user utterance at turn {i}")));
            }
        }
        if let Some(states) = &self.gold_states {
            if states.len() != self.turns.len() {
                return Err(fail(format!(
                    "{} states for {} turns",
                    states.len(),
                    self.turns.len()
                )));
            }
        }
        Ok(())
    }

    pub fn state_at(&self, turn: usize) -> Option<&StateMap> {
        self.gold_states.as_ref().and_then(|s| s.get(turn))
    }
}

/// One schema entry. `slot_name` is the canonical `domain-slot` string and
/// must carry its own domain as prefix. `maskable` marks slots whose values
/// appear verbatim in dialogue text; yes/no style slots are not maskable.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SlotEntry {
    #[serde(rename = "slot")]
    pub slot_name: String,
    pub domain: String,
    pub maskable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SlotSchema {
    entries: Vec<SlotEntry>,
    by_name: BTreeMap<String, usize>,
}

impl SlotSchema {
    pub fn new(mut entries: Vec<SlotEntry>) -> Result<Self, CorpusError> {
        for e in &mut entries {
            e.slot_name = normalize_value(&e.slot_name);
            e.domain = normalize_value(&e.domain);
            if e.slot_name.contains(char::is_whitespace) {
                return Err(CorpusError::InvalidSchema(format!(
                    "slot {:?} contains whitespace; canonical names are single tokens",
                    e.slot_name
                )));
            }
            if !e.slot_name.starts_with(&format!("{}-", e.domain)) {
                return Err(CorpusError::InvalidSchema(format!(
                    "slot {:?} does not carry its domain {:?} as prefix",
                    e.slot_name, e.domain
                )));
            }
        }
        entries.sort_by(|a, b| a.slot_name.cmp(&b.slot_name));
        let mut by_name = BTreeMap::new();
        for (i, e) in entries.iter().enumerate() {
            if by_name.insert(e.slot_name.clone(), i).is_some() {
                return Err(CorpusError::InvalidSchema(format!(
                    "duplicate slot {:?}",
                    e.slot_name
                )));
            }
        }
        Ok(SlotSchema { entries, by_name })
    }

    pub fn entries(&self) -> &[SlotEntry] {
        &self.entries
    }

    pub fn contains(&self, slot_name: &str) -> bool {
        self.by_name.contains_key(slot_name)
    }

    pub fn get(&self, slot_name: &str) -> Option<&SlotEntry> {
        self.by_name.get(slot_name).map(|&i| &self.entries[i])
    }

    pub fn domains(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.domain.as_str()).collect()
    }

    pub fn slots_for_domain<'a>(&'a self, domain: &'a str) -> impl Iterator<Item = &'a SlotEntry> {
        self.entries.iter().filter(move |e| e.domain == domain)
    }

    pub fn slot_names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.slot_name.as_str())
    }

    /// Slot suffix after the domain prefix, e.g. "hotel-area" -> "area".
    pub fn suffix(slot_name: &str) -> &str {
        slot_name.split_once('-').map_or(slot_name, |(_, s)| s)
    }

    /// Read the schema from its JSON file form: a list of entries.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self, CorpusError> {
        let entries: Vec<SlotEntry> = serde_json::from_reader(reader)
            .map_err(|e| CorpusError::MalformedInput(e.to_string()))?;
        Self::new(entries)
    }

    pub fn to_writer<W: Write>(&self, writer: W) -> Result<(), CorpusError> {
        serde_json::to_writer_pretty(writer, &self.entries)
            .map_err(|e| CorpusError::MalformedInput(e.to_string()))?;
        Ok(())
    }
}

/// Raw corpus formats the ingester understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RawFormat {
    MultiWoz,
    Sgd,
}

impl std::str::FromStr for RawFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_lowercase().as_str() {
            "multiwoz" => Ok(RawFormat::MultiWoz),
            "sgd" => Ok(RawFormat::Sgd),
            other => Err(format!("unknown raw format {other:?}")),
        }
    }
}

/// Values that mean "this slot is not (or no longer) set" in raw
/// annotations. "dontcare" is a real value and is kept.
pub(crate) fn is_deletion_marker(normalized: &str) -> bool {
    matches!(normalized, "" | "none" | "not mentioned")
}

/// Parse a raw corpus stream into normalized dialogues. Every slot seen in
/// the annotations must exist in the schema; offenders are collected and
/// reported together.
pub fn ingest<R: Read>(
    reader: R,
    format: RawFormat,
    schema: &SlotSchema,
) -> Result<Vec<Dialogue>, CorpusError> {
    let dialogues = match format {
        RawFormat::MultiWoz => multiwoz::parse(reader)?,
        RawFormat::Sgd => sgd::parse(reader)?,
    };
    let mut unknown: BTreeSet<String> = BTreeSet::new();
    for d in &dialogues {
        d.validate()?;
        if let Some(states) = &d.gold_states {
            for state in states {
                for slot in state.keys() {
                    if !schema.contains(slot) {
                        unknown.insert(slot.clone());
                    }
                }
            }
        }
    }
    if !unknown.is_empty() {
        return Err(CorpusError::UnknownSlots { slots: unknown.into_iter().collect() });
    }
    Ok(dialogues)
}

#[derive(Serialize, Deserialize)]
struct TurnLine {
    sys: String,
    usr: String,
}

#[derive(Serialize, Deserialize)]
struct CorpusLine {
    id: String,
    domains: Vec<String>,
    turns: Vec<TurnLine>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    states: Option<Vec<BTreeMap<String, String>>>,
}

/// Write dialogues in the normalized JSONL form, one dialogue per line.
/// Output is deterministic: map keys and domain lists are sorted, so
/// writing what `read_normalized` produced is byte-identical.
pub fn write_normalized<W: Write>(mut writer: W, dialogues: &[Dialogue]) -> Result<(), CorpusError> {
    for d in dialogues {
        let line = CorpusLine {
            id: d.id.clone(),
            domains: d.domains.iter().cloned().collect(),
            turns: d
                .turns
                .iter()
                .map(|t| TurnLine { sys: t.system_utterance.clone(), usr: t.user_utterance.clone() })
                .collect(),
            states: d.gold_states.as_ref().map(|states| {
                states
                    .iter()
                    .map(|s| s.iter().map(|(k, v)| (k.clone(), v.joined())).collect())
                    .collect()
            }),
        };
        let json = serde_json::to_string(&line)
            .map_err(|e| CorpusError::MalformedInput(e.to_string()))?;
        writeln!(writer, "{json}")?;
    }
    Ok(())
}

/// Read the normalized JSONL form back. Values are re-normalized, which is
/// a no-op on files this library wrote.
pub fn read_normalized<R: BufRead>(reader: R) -> Result<Vec<Dialogue>, CorpusError> {
    let mut dialogues = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CorpusLine = serde_json::from_str(&line).map_err(|e| {
            CorpusError::MalformedInput(format!("line {}: {e}", lineno + 1))
        })?;
        let id = parsed.id;
        let states = match parsed.states {
            None => None,
            Some(states) => {
                let mut out = Vec::with_capacity(states.len());
                for state in states {
                    let mut map = StateMap::new();
                    for (slot, joined) in state {
                        let value = GoldValue::parse_joined(&joined).ok_or_else(|| {
                            CorpusError::MalformedDialogue {
                                id: id.clone(),
                                reason: format!("empty value for slot {slot:?}"),
                            }
                        })?;
                        map.insert(normalize_value(&slot), value);
                    }
                    out.push(map);
                }
                Some(out)
            }
        };
        let dialogue = Dialogue {
            id,
            domains: parsed.domains.into_iter().map(|d| normalize_value(&d)).collect(),
            turns: parsed
                .turns
                .into_iter()
                .enumerate()
                .map(|(i, t)| Turn {
                    index: i,
                    system_utterance: tidy_text(&t.sys),
                    user_utterance: tidy_text(&t.usr),
                })
                .collect(),
            gold_states: states,
        };
        dialogue.validate()?;
        dialogues.push(dialogue);
    }
    Ok(dialogues)
}

/// A leave-one-out split over dialogue ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    #[serde(rename = "target")]
    pub target_domain: String,
    pub source_train: Vec<String>,
    pub target_unlabeled: Vec<String>,
    pub target_test: Vec<String>,
}

impl Split {
    pub fn from_reader<R: Read>(reader: R) -> Result<Self, CorpusError> {
        serde_json::from_reader(reader).map_err(|e| CorpusError::MalformedInput(e.to_string()))
    }

    pub fn to_writer<W: Write>(&self, writer: W) -> Result<(), CorpusError> {
        serde_json::to_writer_pretty(writer, self)
            .map_err(|e| CorpusError::MalformedInput(e.to_string()))?;
        Ok(())
    }
}

/// Build the leave-one-out split for `target_domain`: train dialogues that
/// never mention the target become source training data, train dialogues
/// that mention it become the unlabeled target pool, and test dialogues
/// that mention it become the target test set. Test dialogues without the
/// target domain are dropped.
pub fn leave_one_out(
    train: &[Dialogue],
    test: &[Dialogue],
    target_domain: &str,
) -> Result<Split, CorpusError> {
    let target = normalize_value(target_domain);
    let known: BTreeSet<&str> = train
        .iter()
        .chain(test)
        .flat_map(|d| d.domains.iter().map(String::as_str))
        .collect();
    if !known.contains(target.as_str()) {
        return Err(CorpusError::UnknownDomain(target));
    }
    let train_ids: BTreeSet<&str> = train.iter().map(|d| d.id.as_str()).collect();
    let overlap: Vec<String> = test
        .iter()
        .filter(|d| train_ids.contains(d.id.as_str()))
        .map(|d| d.id.clone())
        .collect();
    if !overlap.is_empty() {
        return Err(CorpusError::OverlappingPortions { ids: overlap });
    }
    let mut split = Split {
        target_domain: target.clone(),
        source_train: Vec::new(),
        target_unlabeled: Vec::new(),
        target_test: Vec::new(),
    };
    for d in train {
        if d.domains.contains(&target) {
            split.target_unlabeled.push(d.id.clone());
        } else {
            split.source_train.push(d.id.clone());
        }
    }
    for d in test {
        if d.domains.contains(&target) {
            split.target_test.push(d.id.clone());
        }
    }
    if split.source_train.is_empty() {
        log::warn!("leave-one-out for {target:?} has an empty source side");
    }
    Ok(split)
}

/// Whether a target-domain slot also exists, by suffix, in some other
/// domain of the schema. Unseen slots are the interesting ones: no source
/// domain ever trains on them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeenStatus {
    Seen,
    Unseen,
}

/// Classify every slot of the target domain as seen or unseen relative to
/// the remaining schema domains.
pub fn classify_seen(
    schema: &SlotSchema,
    target_domain: &str,
) -> Result<BTreeMap<String, SeenStatus>, CorpusError> {
    let target = normalize_value(target_domain);
    if !schema.domains().contains(target.as_str()) {
        return Err(CorpusError::UnknownDomain(target));
    }
    let other_suffixes: BTreeSet<&str> = schema
        .entries()
        .iter()
        .filter(|e| e.domain != target)
        .map(|e| SlotSchema::suffix(&e.slot_name))
        .collect();
    Ok(schema
        .slots_for_domain(&target)
        .map(|e| {
            let status = if other_suffixes.contains(SlotSchema::suffix(&e.slot_name)) {
                SeenStatus::Seen
            } else {
                SeenStatus::Unseen
            };
            (e.slot_name.clone(), status)
        })
        .collect())
}

/// Why gold states are being read. Kept on every access so tests can prove
/// the self-training loop never touches labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessPurpose {
    Evaluation,
    OracularSelection,
}

/// Side table holding gold states stripped from a corpus, with per-purpose
/// read counters. The only way to labels after sealing is through here.
#[derive(Debug)]
pub struct SealedGoldStore {
    states: BTreeMap<TurnKey, StateMap>,
    evaluation_reads: AtomicU64,
    oracular_reads: AtomicU64,
}

impl SealedGoldStore {
    /// Gold state for one turn; counts one read against `purpose`.
    pub fn state(&self, purpose: AccessPurpose, id: &str, turn: usize) -> Option<&StateMap> {
        self.counter(purpose).fetch_add(1, Ordering::Relaxed);
        self.states.get(&(id.to_string(), turn))
    }

    /// All gold states; counts one read per entry against `purpose`.
    pub fn export(&self, purpose: AccessPurpose) -> BTreeMap<TurnKey, StateMap> {
        self.counter(purpose).fetch_add(self.states.len() as u64, Ordering::Relaxed);
        self.states.clone()
    }

    /// Turn inventory without touching labels.
    pub fn keys(&self) -> impl Iterator<Item = &TurnKey> {
        self.states.keys()
    }

    pub fn reads(&self, purpose: AccessPurpose) -> u64 {
        self.counter(purpose).load(Ordering::Relaxed)
    }

    pub fn total_reads(&self) -> u64 {
        self.reads(AccessPurpose::Evaluation) + self.reads(AccessPurpose::OracularSelection)
    }

    fn counter(&self, purpose: AccessPurpose) -> &AtomicU64 {
        match purpose {
            AccessPurpose::Evaluation => &self.evaluation_reads,
            AccessPurpose::OracularSelection => &self.oracular_reads,
        }
    }
}

/// Strip gold states off the dialogues and move them into a sealed store.
/// The returned view is what an unlabeled target domain looks like.
pub fn seal(dialogues: Vec<Dialogue>) -> (Vec<Dialogue>, SealedGoldStore) {
    let mut states = BTreeMap::new();
    let mut unlabeled = Vec::with_capacity(dialogues.len());
    for mut d in dialogues {
        if let Some(gold) = d.gold_states.take() {
            for (t, state) in gold.into_iter().enumerate() {
                states.insert((d.id.clone(), t), state);
            }
        }
        unlabeled.push(d);
    }
    let store = SealedGoldStore {
        states,
        evaluation_reads: AtomicU64::new(0),
        oracular_reads: AtomicU64::new(0),
    };
    (unlabeled, store)
}

/// Index dialogues by id.
pub fn by_id(dialogues: &[Dialogue]) -> BTreeMap<&str, &Dialogue> {
    dialogues.iter().map(|d| (d.id.as_str(), d)).collect()
}
