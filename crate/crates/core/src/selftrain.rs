//! Self-training in the unlabeled target domain. Each round: predict every
//! target slot at every turn (main task), verify each predicted value by
//! masking it and asking the inverse task for its slot type (cycle check),
//! keep the turns whose checked predictions all agree, export them as
//! pseudo-labeled fine-tuning data, and train on it. Rounds repeat until a
//! stopping rule fires.
//!
//! Nothing in this module reads gold labels. Stopping in true zero-shot
//! mode uses selection stability across rounds; labeled mode, meant for
//! research runs where target labels exist, measures JGA through a caller
//! provided hook and stops when the gain falls under the margin.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendError, GenerationRequest, TrainingJob};
use crate::corpus::{by_id, Dialogue, SlotSchema, TurnKey};
use crate::jointtrain::{JointError, JointManifest, ManifestCounts};
use crate::prompting::{
    inverse_prompt, main_prompt, mask_value, parse_slot_type, parse_value, serialize_history,
    PromptError, PromptSample, Task,
};

#[derive(Debug, thiserror::Error)]
pub enum SelfTrainError {
    #[error("target domain {0:?} has no schema slots")]
    NoTargetSlots(String),
    #[error("prediction references unknown dialogue {0:?}")]
    MissingDialogue(String),
    #[error("generation failed for dialogues [{}]: {source}", dialogues.join(", "))]
    GenerationFailed { dialogues: Vec<String>, source: BackendError },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Export(#[from] JointError),
    #[error("labeled stop mode needs an evaluation hook")]
    MissingHook,
    #[error("evaluation hook failed: {0}")]
    EvalHook(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("self-training aborted in round {round}: {source}")]
    Aborted {
        round: usize,
        /// Reports of the rounds that completed before the failure.
        completed: Vec<RoundReport>,
        source: Box<SelfTrainError>,
    },
}

/// Outcome of the cycle check for one predicted slot value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CycleStatus {
    /// The inverse task recovered the predicted slot.
    Consistent,
    /// The inverse task answered something else.
    Inconsistent,
    /// The predicted value never occurs in the history, so there is
    /// nothing to mask (typical for yes/no answers).
    Unmaskable,
}

/// Predicted state for one turn plus cycle-check outcomes. `values` holds
/// non-none predictions only; `cycle` covers a subset of its keys (all of
/// them once `cycle_check` ran).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnPrediction {
    #[serde(rename = "id")]
    pub dialogue_id: String,
    #[serde(rename = "turn")]
    pub turn_index: usize,
    pub values: BTreeMap<String, String>,
    #[serde(default)]
    pub cycle: BTreeMap<String, CycleStatus>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionStats {
    pub selected_count: usize,
    pub rejected_count: usize,
    /// Predictions that could not be cycle-checked; they never veto a turn.
    pub unmaskable_skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub selected: BTreeSet<TurnKey>,
    pub rejected: BTreeSet<TurnKey>,
    pub stats: SelectionStats,
}

/// Whether selection accepts single turns or whole conversations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Turn,
    Conversation,
}

impl std::str::FromStr for Granularity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_lowercase().as_str() {
            "turn" => Ok(Granularity::Turn),
            "conversation" => Ok(Granularity::Conversation),
            other => Err(format!("unknown granularity {other:?}")),
        }
    }
}

/// Selection policy. Only one exists today: every cycle-checked prediction
/// of a unit must be consistent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    AllConsistent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMode {
    /// Stop when labeled JGA gain drops under `stop_margin`. Needs target
    /// labels, so research runs only.
    Labeled,
    /// Stop when the selected set stabilizes (Jaccard to the previous
    /// round ≥ 0.99). The true zero-shot default.
    UnlabeledProxy,
}

#[derive(Debug, Clone)]
pub struct LoopConfig {
    pub max_rounds: usize,
    pub stop_margin: f64,
    pub stop_mode: StopMode,
    pub granularity: Granularity,
    pub policy: SelectionPolicy,
    /// Also export aux samples for maskable pseudo-labels.
    pub export_aux: bool,
    pub epochs: u32,
    pub base_model: String,
}

impl LoopConfig {
    pub fn new(base_model: impl Into<String>) -> Self {
        LoopConfig {
            max_rounds: 3,
            stop_margin: 0.1,
            stop_mode: StopMode::UnlabeledProxy,
            granularity: Granularity::Turn,
            policy: SelectionPolicy::AllConsistent,
            export_aux: true,
            epochs: 3,
            base_model: base_model.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub jga: f64,
    /// JGA difference to the previous round (or to the baseline for
    /// round 1).
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub selection: SelectionReport,
    pub model_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<RoundMetrics>,
}

/// Labeled-mode metric source: given a model id, produce the current JGA
/// on the labeled test side. Kept as a hook so this module never touches
/// gold itself.
pub type EvalHook<'a> = dyn FnMut(&str) -> Result<f64, String> + 'a;

fn target_slots(schema: &SlotSchema, target_domain: &str) -> Result<Vec<String>, SelfTrainError> {
    let slots: Vec<String> = schema
        .slots_for_domain(target_domain)
        .map(|e| e.slot_name.clone())
        .collect();
    if slots.is_empty() {
        return Err(SelfTrainError::NoTargetSlots(target_domain.to_string()));
    }
    Ok(slots)
}

fn run_generation(
    backend: &dyn Backend,
    requests: &[GenerationRequest],
) -> Result<Vec<String>, SelfTrainError> {
    backend.generate_batch(requests).map_err(|e| match e {
        BackendError::Generation { outcomes, failed } => {
            let mut dialogues: Vec<String> = failed
                .iter()
                .map(|&i| requests[i].sample.dialogue_id.clone())
                .collect();
            dialogues.dedup();
            SelfTrainError::GenerationFailed {
                dialogues,
                source: BackendError::Generation { outcomes, failed },
            }
        }
        other => SelfTrainError::Backend(other),
    })
}

/// Step 1: query the main task for every (turn, target slot) and keep the
/// non-none answers.
pub fn generate_states(
    backend: &dyn Backend,
    dialogues: &[Dialogue],
    schema: &SlotSchema,
    target_domain: &str,
) -> Result<Vec<TurnPrediction>, SelfTrainError> {
    let slots = target_slots(schema, target_domain)?;
    let mut requests = Vec::new();
    let mut keys = Vec::new();
    for d in dialogues {
        for turn in &d.turns {
            let history = serialize_history(d, turn.index)?;
            for slot in &slots {
                requests.push(GenerationRequest::greedy(PromptSample {
                    task: Task::Main,
                    dialogue_id: d.id.clone(),
                    turn_index: turn.index,
                    slot_name: slot.clone(),
                    input_text: main_prompt(schema, slot, &history)?,
                    target_text: String::new(),
                }));
                keys.push((d.id.clone(), turn.index, slot.clone()));
            }
        }
    }
    let outputs = run_generation(backend, &requests)?;
    let mut predictions: BTreeMap<TurnKey, TurnPrediction> = dialogues
        .iter()
        .flat_map(|d| {
            d.turns.iter().map(|t| {
                let key = (d.id.clone(), t.index);
                let pred = TurnPrediction {
                    dialogue_id: d.id.clone(),
                    turn_index: t.index,
                    values: BTreeMap::new(),
                    cycle: BTreeMap::new(),
                };
                (key, pred)
            })
        })
        .collect();
    for ((id, turn, slot), output) in keys.into_iter().zip(outputs) {
        if let Some(value) = parse_value(&output) {
            predictions
                .get_mut(&(id, turn))
                .expect("every key was seeded")
                .values
                .insert(slot, value);
        }
    }
    Ok(predictions.into_values().collect())
}

/// Step 2: verify each predicted value by masking it in the history and
/// asking the inverse task which slot it belongs to.
pub fn cycle_check(
    backend: &dyn Backend,
    dialogues: &[Dialogue],
    schema: &SlotSchema,
    mut predictions: Vec<TurnPrediction>,
) -> Result<Vec<TurnPrediction>, SelfTrainError> {
    let index = by_id(dialogues);
    let mut requests = Vec::new();
    let mut keys: Vec<(usize, String)> = Vec::new();
    for (pred_index, pred) in predictions.iter_mut().enumerate() {
        let dialogue = index
            .get(pred.dialogue_id.as_str())
            .ok_or_else(|| SelfTrainError::MissingDialogue(pred.dialogue_id.clone()))?;
        let history = serialize_history(dialogue, pred.turn_index)?;
        for (slot, value) in &pred.values {
            match mask_value(&history, value) {
                None => {
                    pred.cycle.insert(slot.clone(), CycleStatus::Unmaskable);
                }
                Some(masked) => {
                    requests.push(GenerationRequest::greedy(PromptSample {
                        task: Task::Aux,
                        dialogue_id: pred.dialogue_id.clone(),
                        turn_index: pred.turn_index,
                        slot_name: slot.clone(),
                        input_text: inverse_prompt(&masked),
                        target_text: String::new(),
                    }));
                    keys.push((pred_index, slot.clone()));
                }
            }
        }
    }
    let outputs = run_generation(backend, &requests)?;
    let no_candidates = BTreeSet::new();
    for ((pred_index, slot), output) in keys.into_iter().zip(outputs) {
        let status = match parse_slot_type(&output, schema, &no_candidates) {
            Some(answer) if answer == slot => CycleStatus::Consistent,
            // unknown answers are failures too: strict is the point
            _ => CycleStatus::Inconsistent,
        };
        predictions[pred_index].cycle.insert(slot, status);
    }
    Ok(predictions)
}

fn turn_passes(pred: &TurnPrediction) -> (bool, usize) {
    let unmaskable =
        pred.cycle.values().filter(|s| **s == CycleStatus::Unmaskable).count();
    let checked = pred.cycle.len() - unmaskable;
    let all_consistent =
        pred.cycle.values().all(|s| *s != CycleStatus::Inconsistent);
    (checked >= 1 && all_consistent, unmaskable)
}

/// Step 2, decision half: keep units whose checked predictions are all
/// consistent. Unmaskable predictions never veto, but a unit needs at
/// least one actually checked prediction to qualify.
pub fn select(
    predictions: &[TurnPrediction],
    granularity: Granularity,
    policy: SelectionPolicy,
) -> SelectionReport {
    let SelectionPolicy::AllConsistent = policy;
    let mut unmaskable_skipped = 0;
    let mut turn_pass: BTreeMap<TurnKey, bool> = BTreeMap::new();
    for pred in predictions {
        let (pass, unmaskable) = turn_passes(pred);
        unmaskable_skipped += unmaskable;
        turn_pass.insert((pred.dialogue_id.clone(), pred.turn_index), pass);
    }
    if granularity == Granularity::Conversation {
        let mut failing: BTreeSet<String> = BTreeSet::new();
        for ((id, _), pass) in &turn_pass {
            if !pass {
                failing.insert(id.clone());
            }
        }
        for ((id, _), pass) in turn_pass.iter_mut() {
            if failing.contains(id) {
                *pass = false;
            }
        }
    }
    let mut selected = BTreeSet::new();
    let mut rejected = BTreeSet::new();
    for (key, pass) in turn_pass {
        if pass {
            selected.insert(key);
        } else {
            rejected.insert(key);
        }
    }
    let stats = SelectionStats {
        selected_count: selected.len(),
        rejected_count: rejected.len(),
        unmaskable_skipped,
    };
    SelectionReport { selected, rejected, stats }
}

/// Step 3: turn the selected predictions into fine-tuning data. Main
/// samples carry the pseudo-label v' as target; aux samples are added for
/// maskable values when `include_aux` is set. "none" is never exported as
/// a target (the values maps hold non-none predictions only).
pub fn export_finetune_manifest(
    predictions: &[TurnPrediction],
    selection: &SelectionReport,
    dialogues: &[Dialogue],
    schema: &SlotSchema,
    include_aux: bool,
    provenance: impl Into<String>,
) -> Result<JointManifest, SelfTrainError> {
    let index = by_id(dialogues);
    let mut main = Vec::new();
    let mut aux = Vec::new();
    for pred in predictions {
        let key = (pred.dialogue_id.clone(), pred.turn_index);
        if !selection.selected.contains(&key) {
            continue;
        }
        let dialogue = index
            .get(pred.dialogue_id.as_str())
            .ok_or_else(|| SelfTrainError::MissingDialogue(pred.dialogue_id.clone()))?;
        let history = serialize_history(dialogue, pred.turn_index)?;
        for (slot, value) in &pred.values {
            main.push(PromptSample {
                task: Task::Main,
                dialogue_id: pred.dialogue_id.clone(),
                turn_index: pred.turn_index,
                slot_name: slot.clone(),
                input_text: main_prompt(schema, slot, &history)?,
                target_text: value.clone(),
            });
            if include_aux {
                if let Some(masked) = mask_value(&history, value) {
                    aux.push(PromptSample {
                        task: Task::Aux,
                        dialogue_id: pred.dialogue_id.clone(),
                        turn_index: pred.turn_index,
                        slot_name: slot.clone(),
                        input_text: inverse_prompt(&masked),
                        target_text: slot.clone(),
                    });
                }
            }
        }
    }
    if main.is_empty() {
        log::warn!("empty selection: exporting an empty fine-tuning manifest");
    }
    let counts = ManifestCounts { main: main.len(), aux: aux.len() };
    let mut samples = main;
    samples.extend(aux);
    Ok(JointManifest { samples, counts, provenance: provenance.into() })
}

/// Jaccard similarity of two selected sets; two empty sets count as
/// identical.
pub fn jaccard(a: &BTreeSet<TurnKey>, b: &BTreeSet<TurnKey>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let intersection = a.intersection(b).count() as f64;
    let union = a.union(b).count() as f64;
    intersection / union
}

struct RoundOutcome {
    report: RoundReport,
    jga: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
fn run_round(
    backend: &dyn Backend,
    dialogues: &[Dialogue],
    schema: &SlotSchema,
    target_domain: &str,
    config: &LoopConfig,
    workdir: &Path,
    round: usize,
    model: &str,
    prev_jga: Option<f64>,
    eval_hook: &mut Option<&mut EvalHook>,
) -> Result<RoundOutcome, SelfTrainError> {
    let predictions = generate_states(backend, dialogues, schema, target_domain)?;
    let predictions = cycle_check(backend, dialogues, schema, predictions)?;
    let selection = select(&predictions, config.granularity, config.policy);
    let manifest = export_finetune_manifest(
        &predictions,
        &selection,
        dialogues,
        schema,
        config.export_aux,
        format!("selftrain target={target_domain} round={round}"),
    )?;
    let manifest_path = workdir.join(format!("round_{round}.manifest.jsonl"));
    manifest.write_to(&manifest_path)?;
    let model_id = if manifest.samples.is_empty() {
        log::warn!("round {round}: nothing selected, keeping model {model}");
        model.to_string()
    } else {
        backend.submit_training(&TrainingJob::new(&manifest_path, config.epochs, model))?
    };
    let (metrics, jga) = match eval_hook {
        Some(hook) => {
            let jga = hook(&model_id).map_err(SelfTrainError::EvalHook)?;
            let gain = jga - prev_jga.expect("labeled mode measured a baseline");
            (Some(RoundMetrics { jga, gain }), Some(jga))
        }
        None => (None, None),
    };
    Ok(RoundOutcome { report: RoundReport { round, selection, model_id, metrics }, jga })
}

/// Run up to `max_rounds` self-training rounds, writing each round's
/// manifest into `workdir`. In labeled stop mode `eval_hook` must be given
/// and is called once for the baseline and once per round; in unlabeled
/// mode it must be absent and the loop stops when selections stabilize.
/// On a mid-loop failure the completed rounds ride along in the error.
pub fn run_loop(
    backend: &dyn Backend,
    dialogues: &[Dialogue],
    schema: &SlotSchema,
    target_domain: &str,
    config: &LoopConfig,
    workdir: &Path,
    mut eval_hook: Option<&mut EvalHook>,
) -> Result<Vec<RoundReport>, SelfTrainError> {
    let labeled = config.stop_mode == StopMode::Labeled;
    if labeled && eval_hook.is_none() {
        return Err(SelfTrainError::MissingHook);
    }
    if !labeled {
        // the hook reads labels; refusing it here keeps zero-shot runs
        // honest by construction
        eval_hook = None;
    }
    let mut model = config.base_model.clone();
    let mut prev_jga = match eval_hook.as_mut() {
        Some(hook) => Some(hook(&model).map_err(SelfTrainError::EvalHook)?),
        None => None,
    };
    let mut prev_selected: Option<BTreeSet<TurnKey>> = None;
    let mut reports: Vec<RoundReport> = Vec::new();
    for round in 1..=config.max_rounds {
        let outcome = match run_round(
            backend,
            dialogues,
            schema,
            target_domain,
            config,
            workdir,
            round,
            &model,
            prev_jga,
            &mut eval_hook,
        ) {
            Ok(outcome) => outcome,
            Err(source) => {
                return Err(SelfTrainError::Aborted {
                    round,
                    completed: reports,
                    source: Box::new(source),
                })
            }
        };
        let report = outcome.report;
        model = report.model_id.clone();
        if let Some(jga) = outcome.jga {
            prev_jga = Some(jga);
        }
        let stop = if labeled {
            let gain = report.metrics.expect("labeled rounds carry metrics").gain;
            gain < config.stop_margin
        } else {
            prev_selected
                .as_ref()
                .is_some_and(|prev| jaccard(prev, &report.selection.selected) >= 0.99)
        };
        prev_selected = Some(report.selection.selected.clone());
        reports.push(report);
        if stop {
            break;
        }
    }
    Ok(reports)
}

/// Write round reports as JSONL, one round per line.
pub fn write_round_reports<W: std::io::Write>(
    mut writer: W,
    reports: &[RoundReport],
) -> Result<(), SelfTrainError> {
    for report in reports {
        let line = serde_json::to_string(report).map_err(std::io::Error::other)?;
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ExtractiveOracleBackend;
    use crate::corpus::{GoldValue, SlotEntry, StateMap, Turn};

    fn schema() -> SlotSchema {
        let entry = |slot: &str, maskable: bool| SlotEntry {
            slot_name: slot.into(),
            domain: slot.split_once('-').unwrap().0.into(),
            maskable,
            description: None,
        };
        SlotSchema::new(vec![
            entry("hotel-area", true),
            entry("hotel-name", true),
            entry("hotel-parking", false),
            entry("restaurant-name", true),
        ])
        .unwrap()
    }

    fn dialogue() -> Dialogue {
        let mut s0 = StateMap::new();
        s0.insert("hotel-name".into(), GoldValue::new("amber lodge").unwrap());
        let mut s1 = s0.clone();
        s1.insert("hotel-area".into(), GoldValue::new("north").unwrap());
        s1.insert("hotel-parking".into(), GoldValue::new("yes").unwrap());
        Dialogue {
            id: "T1".into(),
            domains: ["hotel".to_string()].into(),
            turns: vec![
                Turn {
                    index: 0,
                    system_utterance: String::new(),
                    user_utterance: "i would like to stay at amber lodge".into(),
                },
                Turn {
                    index: 1,
                    system_utterance: "noted. which area?".into(),
                    user_utterance: "the north, and it must offer parking".into(),
                },
            ],
            gold_states: Some(vec![s0, s1]),
        }
    }

    fn unlabeled() -> Vec<Dialogue> {
        let mut d = dialogue();
        d.gold_states = None;
        vec![d]
    }

    #[test]
    fn generate_states_covers_every_turn_and_keeps_non_none() {
        let oracle = ExtractiveOracleBackend::new(&[dialogue()], &schema()).unwrap();
        let preds = generate_states(&oracle, &unlabeled(), &schema(), "hotel").unwrap();
        assert_eq!(preds.len(), 2);
        assert_eq!(preds[0].values.len(), 1);
        assert_eq!(preds[0].values["hotel-name"], "amber lodge");
        assert_eq!(preds[1].values.len(), 3);
        assert_eq!(preds[1].values["hotel-parking"], "yes");
        assert!(preds.iter().all(|p| p.cycle.is_empty()));
    }

    #[test]
    fn cycle_check_marks_consistent_and_unmaskable() {
        let oracle = ExtractiveOracleBackend::new(&[dialogue()], &schema()).unwrap();
        let preds = generate_states(&oracle, &unlabeled(), &schema(), "hotel").unwrap();
        let preds = cycle_check(&oracle, &unlabeled(), &schema(), preds).unwrap();
        let turn1 = &preds[1];
        assert_eq!(turn1.cycle["hotel-name"], CycleStatus::Consistent);
        assert_eq!(turn1.cycle["hotel-area"], CycleStatus::Consistent);
        // "yes" is never verbatim in the text
        assert_eq!(turn1.cycle["hotel-parking"], CycleStatus::Unmaskable);
        // cycle keys never exceed value keys
        for p in &preds {
            assert!(p.cycle.keys().all(|k| p.values.contains_key(k)));
        }
    }

    #[test]
    fn cycle_check_flags_hard_negatives() {
        // predict the restaurant's name for hotel-name: the value occurs in
        // the text, but the aux task recovers restaurant-name
        let mut d = dialogue();
        d.domains.insert("restaurant".into());
        d.turns[1].user_utterance =
            "the north, and book spice garden for dinner".into();
        let mut s1 = d.gold_states.as_ref().unwrap()[1].clone();
        s1.remove("hotel-parking");
        s1.insert("restaurant-name".into(), GoldValue::new("spice garden").unwrap());
        d.gold_states.as_mut().unwrap()[1] = s1;
        let oracle = ExtractiveOracleBackend::new(&[d.clone()], &schema()).unwrap();

        let mut unlabeled_d = d;
        unlabeled_d.gold_states = None;
        let preds = vec![TurnPrediction {
            dialogue_id: "T1".into(),
            turn_index: 1,
            values: [("hotel-name".to_string(), "spice garden".to_string())].into(),
            cycle: BTreeMap::new(),
        }];
        let preds = cycle_check(&oracle, &[unlabeled_d], &schema(), preds).unwrap();
        assert_eq!(preds[0].cycle["hotel-name"], CycleStatus::Inconsistent);
    }

    #[test]
    fn select_requires_all_checked_consistent() {
        let pred = |id: &str, cycle: &[(&str, CycleStatus)]| TurnPrediction {
            dialogue_id: id.into(),
            turn_index: 0,
            values: cycle.iter().map(|(s, _)| (s.to_string(), "v".to_string())).collect(),
            cycle: cycle.iter().map(|(s, c)| (s.to_string(), *c)).collect(),
        };
        let preds = vec![
            pred("A", &[("hotel-area", CycleStatus::Consistent), ("hotel-name", CycleStatus::Consistent)]),
            pred("B", &[("hotel-area", CycleStatus::Consistent), ("hotel-name", CycleStatus::Inconsistent)]),
            pred("C", &[("hotel-parking", CycleStatus::Unmaskable)]),
            pred("D", &[("hotel-name", CycleStatus::Consistent), ("hotel-parking", CycleStatus::Unmaskable)]),
        ];
        let report = select(&preds, Granularity::Turn, SelectionPolicy::AllConsistent);
        let selected: Vec<&str> =
            report.selected.iter().map(|(id, _)| id.as_str()).collect();
        // A: all consistent. B: one inconsistent. C: nothing checked.
        // D: unmaskable does not veto the consistent check.
        assert_eq!(selected, ["A", "D"]);
        assert_eq!(report.stats.selected_count, 2);
        assert_eq!(report.stats.rejected_count, 2);
        assert_eq!(report.stats.unmaskable_skipped, 2);
        assert!(report.selected.is_disjoint(&report.rejected));
    }

    #[test]
    fn conversation_granularity_vetoes_whole_dialogues() {
        let pred = |turn: usize, status: CycleStatus| TurnPrediction {
            dialogue_id: "A".into(),
            turn_index: turn,
            values: [("hotel-name".to_string(), "v".to_string())].into(),
            cycle: [("hotel-name".to_string(), status)].into(),
        };
        let preds = vec![pred(0, CycleStatus::Consistent), pred(1, CycleStatus::Inconsistent)];
        let turn_level = select(&preds, Granularity::Turn, SelectionPolicy::AllConsistent);
        assert_eq!(turn_level.stats.selected_count, 1);
        let convo_level = select(&preds, Granularity::Conversation, SelectionPolicy::AllConsistent);
        assert_eq!(convo_level.stats.selected_count, 0);
        assert_eq!(convo_level.stats.rejected_count, 2);
    }

    #[test]
    fn export_writes_selected_pseudo_labels_only() {
        let oracle = ExtractiveOracleBackend::new(&[dialogue()], &schema()).unwrap();
        let preds = generate_states(&oracle, &unlabeled(), &schema(), "hotel").unwrap();
        let preds = cycle_check(&oracle, &unlabeled(), &schema(), preds).unwrap();
        let selection = select(&preds, Granularity::Turn, SelectionPolicy::AllConsistent);
        assert_eq!(selection.stats.selected_count, 2);
        let manifest =
            export_finetune_manifest(&preds, &selection, &unlabeled(), &schema(), true, "unit")
                .unwrap();
        // turn 0: 1 value; turn 1: 3 values → 4 main samples; parking has
        // no aux pair (unmaskable)
        assert_eq!(manifest.counts, ManifestCounts { main: 4, aux: 3 });
        assert!(manifest.samples.iter().all(|s| s.target_text != "none"));
        let aux_targets: BTreeSet<&str> = manifest
            .samples
            .iter()
            .filter(|s| s.task == Task::Aux)
            .map(|s| s.target_text.as_str())
            .collect();
        assert!(!aux_targets.contains("hotel-parking"));
    }

    #[test]
    fn export_without_aux_and_with_empty_selection() {
        let preds = vec![TurnPrediction {
            dialogue_id: "T1".into(),
            turn_index: 0,
            values: [("hotel-name".to_string(), "amber lodge".to_string())].into(),
            cycle: [("hotel-name".to_string(), CycleStatus::Inconsistent)].into(),
        }];
        let selection = select(&preds, Granularity::Turn, SelectionPolicy::AllConsistent);
        let manifest =
            export_finetune_manifest(&preds, &selection, &unlabeled(), &schema(), false, "unit")
                .unwrap();
        assert!(manifest.samples.is_empty());
    }

    #[test]
    fn jaccard_handles_empty_and_partial_overlap() {
        let a: BTreeSet<TurnKey> = [("A".to_string(), 0), ("A".to_string(), 1)].into();
        let b: BTreeSet<TurnKey> = [("A".to_string(), 1), ("B".to_string(), 0)].into();
        assert!((jaccard(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(jaccard(&a, &a), 1.0);
        assert_eq!(jaccard(&BTreeSet::new(), &BTreeSet::new()), 1.0);
        assert_eq!(jaccard(&a, &BTreeSet::new()), 0.0);
    }

    #[test]
    fn scripted_gains_stop_after_the_third_round() {
        let oracle = ExtractiveOracleBackend::new(&[dialogue()], &schema()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut config = LoopConfig::new("t5-small");
        config.stop_mode = StopMode::Labeled;
        config.max_rounds = 10;
        // baseline then three rounds; margin 0.1 catches the 0.03 gain
        let series = [36.58, 40.82, 42.70, 42.73];
        let mut calls = 0usize;
        let mut hook = move |_model: &str| {
            let value = series[calls.min(series.len() - 1)];
            calls += 1;
            Ok(value)
        };
        let reports = run_loop(
            &oracle,
            &unlabeled(),
            &schema(),
            "hotel",
            &config,
            dir.path(),
            Some(&mut hook),
        )
        .unwrap();
        assert_eq!(reports.len(), 3);
        let gains: Vec<f64> = reports.iter().map(|r| r.metrics.unwrap().gain).collect();
        assert!((gains[0] - 4.24).abs() < 1e-9);
        assert!((gains[1] - 1.88).abs() < 1e-9);
        assert!((gains[2] - 0.03).abs() < 1e-9);
    }

    #[test]
    fn max_rounds_one_runs_exactly_one_round() {
        let oracle = ExtractiveOracleBackend::new(&[dialogue()], &schema()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut config = LoopConfig::new("t5-small");
        config.max_rounds = 1;
        let reports =
            run_loop(&oracle, &unlabeled(), &schema(), "hotel", &config, dir.path(), None)
                .unwrap();
        assert_eq!(reports.len(), 1);
        assert!(reports[0].metrics.is_none());
    }

    #[test]
    fn frozen_oracle_stops_at_round_two_by_stability() {
        let oracle = ExtractiveOracleBackend::new(&[dialogue()], &schema()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut config = LoopConfig::new("t5-small");
        config.max_rounds = 5;
        let reports =
            run_loop(&oracle, &unlabeled(), &schema(), "hotel", &config, dir.path(), None)
                .unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(reports[0].selection.selected, reports[1].selection.selected);
        // manifests for both rounds were written
        assert!(dir.path().join("round_1.manifest.jsonl").exists());
        assert!(dir.path().join("round_2.manifest.jsonl").exists());
    }

    #[test]
    fn labeled_mode_without_hook_is_an_error() {
        let oracle = ExtractiveOracleBackend::new(&[dialogue()], &schema()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut config = LoopConfig::new("t5-small");
        config.stop_mode = StopMode::Labeled;
        let result =
            run_loop(&oracle, &unlabeled(), &schema(), "hotel", &config, dir.path(), None);
        assert!(matches!(result, Err(SelfTrainError::MissingHook)));
    }

    #[test]
    fn backend_failure_aborts_with_partial_reports() {
        // a backend that errors on the second round's generation
        struct Flaky {
            inner: ExtractiveOracleBackend,
            calls: std::sync::atomic::AtomicUsize,
        }
        impl Backend for Flaky {
            fn name(&self) -> &str {
                "flaky"
            }
            fn generate_batch(
                &self,
                requests: &[GenerationRequest],
            ) -> Result<Vec<String>, BackendError> {
                let n = self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                // two generation calls per round (main + aux)
                if n >= 2 {
                    return Err(BackendError::Generation {
                        outcomes: requests.iter().map(|_| Err("boom".to_string())).collect(),
                        failed: (0..requests.len()).collect(),
                    });
                }
                self.inner.generate_batch(requests)
            }
            fn submit_training(&self, job: &TrainingJob) -> Result<String, BackendError> {
                self.inner.submit_training(job)
            }
        }
        let flaky = Flaky {
            inner: ExtractiveOracleBackend::new(&[dialogue()], &schema()).unwrap(),
            calls: std::sync::atomic::AtomicUsize::new(0),
        };
        let dir = tempfile::tempdir().unwrap();
        let mut config = LoopConfig::new("t5-small");
        config.max_rounds = 4;
        let err = run_loop(&flaky, &unlabeled(), &schema(), "hotel", &config, dir.path(), None)
            .unwrap_err();
        match err {
            SelfTrainError::Aborted { round, completed, source } => {
                assert_eq!(round, 2);
                assert_eq!(completed.len(), 1);
                assert!(matches!(*source, SelfTrainError::GenerationFailed { .. }));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn round_reports_serialize_as_jsonl() {
        let report = RoundReport {
            round: 1,
            selection: SelectionReport {
                selected: [("A".to_string(), 0)].into(),
                rejected: BTreeSet::new(),
                stats: SelectionStats {
                    selected_count: 1,
                    rejected_count: 0,
                    unmaskable_skipped: 0,
                },
            },
            model_id: "t5-small-abc".into(),
            metrics: None,
        };
        let mut buf = Vec::new();
        write_round_reports(&mut buf, &[report.clone(), report]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("\"model_id\":\"t5-small-abc\""));
    }
}
