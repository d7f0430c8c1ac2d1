//! Discovery of slot types the schema does not know yet. Random spans of
//! unlabeled dialogue text are masked and fed to the inverse task; the
//! answers are aggregated into candidate slot types, near-duplicates are
//! merged by string similarity, and rare leftovers are dropped. The
//! surviving candidates can seed a schema for a brand-new domain.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{Backend, BackendError, GenerationRequest};
use crate::corpus::{Dialogue, SlotSchema, TurnKey};
use crate::prompting::{
    inverse_prompt, mask_value, parse_slot_type, serialize_history, MaskedHistory, PromptError,
    PromptSample, Task, MASK_TOKEN,
};
use crate::text::{normalize_value, normalized_similarity};

#[derive(Debug, thiserror::Error)]
pub enum SlotGenError {
    #[error("span_length and num_masks must both be at least 1")]
    DegenerateStrategy,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("dialogue {0:?} carries no gold states, value probes need labels")]
    Unlabeled(String),
}

/// How random probes are cut out of a serialized history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskStrategy {
    /// Tokens per masked window.
    pub span_length: usize,
    /// Masked variants generated per turn (each masks a different window).
    pub num_masks: usize,
    pub seed: u64,
}

impl Default for MaskStrategy {
    fn default() -> Self {
        MaskStrategy { span_length: 1, num_masks: 2, seed: 0 }
    }
}

/// One masked history to send through the inverse task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Probe {
    #[serde(rename = "id")]
    pub dialogue_id: String,
    #[serde(rename = "turn")]
    pub turn_index: usize,
    pub masked: MaskedHistory,
}

fn is_role_marker(token: &str) -> bool {
    token == "system:" || token == "user:"
}

/// Replace up to `num_masks` distinct windows of `span_length` whitespace
/// tokens with the mask token, one window per returned variant. Windows
/// containing a role marker are never candidates, so the dialogue
/// structure stays intact. Texts with no eligible window yield nothing.
pub fn random_mask(
    text: &str,
    span_length: usize,
    num_masks: usize,
    rng: &mut impl Rng,
) -> Result<Vec<MaskedHistory>, SlotGenError> {
    if span_length == 0 || num_masks == 0 {
        return Err(SlotGenError::DegenerateStrategy);
    }
    let tokens: Vec<(usize, &str)> = text
        .split_whitespace()
        .map(|tok| {
            let start = tok.as_ptr() as usize - text.as_ptr() as usize;
            (start, tok)
        })
        .collect();
    if tokens.len() < span_length {
        return Ok(Vec::new());
    }
    let windows: Vec<(usize, usize)> = tokens
        .windows(span_length)
        .filter(|w| !w.iter().any(|(_, tok)| is_role_marker(tok)))
        .map(|w| {
            let (start, _) = w[0];
            let (last_start, last_tok) = w[span_length - 1];
            (start, last_start + last_tok.len())
        })
        .collect();
    if windows.is_empty() {
        return Ok(Vec::new());
    }
    let take = num_masks.min(windows.len());
    let mut chosen: Vec<(usize, usize)> =
        sample(rng, windows.len(), take).into_iter().map(|i| windows[i]).collect();
    chosen.sort_unstable();
    Ok(chosen
        .into_iter()
        .map(|(start, end)| MaskedHistory {
            text: format!("{}{}{}", &text[..start], MASK_TOKEN, &text[end..]),
            mask_count: 1,
            source_value: text[start..end].to_string(),
        })
        .collect())
}

fn probe_rng(seed: u64, dialogue_id: &str, turn_index: usize) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(dialogue_id.as_bytes());
    hasher.update([0xff]);
    hasher.update((turn_index as u64).to_le_bytes());
    ChaCha8Rng::from_seed(hasher.finalize().into())
}

/// Cut random probes from every turn. Masking is seeded per turn, so the
/// result is independent of dialogue order and identical across runs.
pub fn build_random_probes(
    dialogues: &[Dialogue],
    strategy: MaskStrategy,
) -> Result<Vec<Probe>, SlotGenError> {
    let mut probes = Vec::new();
    for d in dialogues {
        for turn in &d.turns {
            let history = serialize_history(d, turn.index)?;
            let mut rng = probe_rng(strategy.seed, &d.id, turn.index);
            for masked in
                random_mask(&history, strategy.span_length, strategy.num_masks, &mut rng)?
            {
                probes.push(Probe {
                    dialogue_id: d.id.clone(),
                    turn_index: turn.index,
                    masked,
                });
            }
        }
    }
    Ok(probes)
}

/// Research-mode probes that mask known gold values instead of random
/// spans, one probe per maskable gold slot per turn. Useful to measure
/// how much of the schema discovery can recover under ideal masking.
pub fn build_value_probes(dialogues: &[Dialogue]) -> Result<Vec<Probe>, SlotGenError> {
    let mut probes = Vec::new();
    for d in dialogues {
        let gold = d
            .gold_states
            .as_ref()
            .ok_or_else(|| SlotGenError::Unlabeled(d.id.clone()))?;
        for turn in &d.turns {
            let history = serialize_history(d, turn.index)?;
            for value in gold[turn.index].values() {
                let Some(masked) =
                    value.alternatives().iter().find_map(|alt| mask_value(&history, alt))
                else {
                    continue;
                };
                probes.push(Probe {
                    dialogue_id: d.id.clone(),
                    turn_index: turn.index,
                    masked,
                });
            }
        }
    }
    Ok(probes)
}

/// A slot type proposed by the inverse task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSlotType {
    pub name: String,
    /// How many probes produced this answer.
    pub frequency: usize,
    /// Set when the name resolves against the existing schema.
    pub matched_schema_slot: Option<String>,
    /// Up to three probes that produced the answer.
    pub example_refs: Vec<TurnKey>,
}

const MAX_EXAMPLE_REFS: usize = 3;

/// Run the inverse task over the probes and aggregate its answers into
/// candidates, ordered by frequency (descending) then name.
pub fn discover(
    backend: &dyn Backend,
    probes: &[Probe],
    schema: &SlotSchema,
) -> Result<Vec<CandidateSlotType>, SlotGenError> {
    let requests: Vec<GenerationRequest> = probes
        .iter()
        .map(|p| {
            GenerationRequest::greedy(PromptSample {
                task: Task::Aux,
                dialogue_id: p.dialogue_id.clone(),
                turn_index: p.turn_index,
                slot_name: String::new(),
                input_text: inverse_prompt(&p.masked),
                target_text: String::new(),
            })
        })
        .collect();
    let outputs = backend.generate_batch(&requests)?;
    let no_candidates = std::collections::BTreeSet::new();
    let mut counts: BTreeMap<String, (usize, Vec<TurnKey>)> = BTreeMap::new();
    for (probe, raw) in probes.iter().zip(outputs) {
        let name = normalize_value(&raw);
        if name.is_empty() || name == "none" {
            continue;
        }
        let entry = counts.entry(name).or_default();
        entry.0 += 1;
        if entry.1.len() < MAX_EXAMPLE_REFS {
            entry.1.push((probe.dialogue_id.clone(), probe.turn_index));
        }
    }
    let mut candidates: Vec<CandidateSlotType> = counts
        .into_iter()
        .map(|(name, (frequency, example_refs))| CandidateSlotType {
            matched_schema_slot: parse_slot_type(&name, schema, &no_candidates),
            name,
            frequency,
            example_refs,
        })
        .collect();
    candidates.sort_by(|a, b| b.frequency.cmp(&a.frequency).then_with(|| a.name.cmp(&b.name)));
    Ok(candidates)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    /// Groups rarer than this are dropped after merging.
    pub min_frequency: usize,
    /// Similarity at or above this merges two names.
    pub similarity_threshold: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig { min_frequency: 3, similarity_threshold: 0.8 }
    }
}

/// Bookkeeping for a merge pass. Frequency is conserved:
/// `total_before == total_after + dropped`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeStats {
    /// Summed frequency of the input candidates.
    pub total_before: usize,
    /// Summed frequency of the kept groups.
    pub total_after: usize,
    /// Summed frequency of the dropped groups.
    pub dropped: usize,
}

fn comparable_suffix(name: &str) -> &str {
    name.split_once('-').map_or(name, |(_, suffix)| suffix)
}

/// Greedily merge near-duplicate candidate names (compared on their slot
/// suffix, so "hotel-price" and "price" coalesce), then drop groups below
/// the frequency floor. The highest-frequency member names each group.
pub fn merge_and_select(
    candidates: &[CandidateSlotType],
    config: MergeConfig,
) -> (Vec<CandidateSlotType>, MergeStats) {
    let mut ordered: Vec<&CandidateSlotType> = candidates.iter().collect();
    ordered.sort_by(|a, b| b.frequency.cmp(&a.frequency).then_with(|| a.name.cmp(&b.name)));
    let mut groups: Vec<CandidateSlotType> = Vec::new();
    for candidate in ordered {
        let home = groups.iter_mut().find(|g| {
            normalized_similarity(comparable_suffix(&g.name), comparable_suffix(&candidate.name))
                >= config.similarity_threshold
        });
        match home {
            Some(group) => {
                group.frequency += candidate.frequency;
                if group.matched_schema_slot.is_none() {
                    group.matched_schema_slot = candidate.matched_schema_slot.clone();
                }
                for r in &candidate.example_refs {
                    if group.example_refs.len() >= MAX_EXAMPLE_REFS {
                        break;
                    }
                    group.example_refs.push(r.clone());
                }
            }
            None => groups.push(candidate.clone()),
        }
    }
    let total_before: usize = candidates.iter().map(|c| c.frequency).sum();
    let (kept, dropped_groups): (Vec<_>, Vec<_>) =
        groups.into_iter().partition(|g| g.frequency >= config.min_frequency);
    let mut kept = kept;
    kept.sort_by(|a, b| b.frequency.cmp(&a.frequency).then_with(|| a.name.cmp(&b.name)));
    let total_after: usize = kept.iter().map(|g| g.frequency).sum();
    let dropped: usize = dropped_groups.iter().map(|g| g.frequency).sum();
    (kept, MergeStats { total_before, total_after, dropped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ExtractiveOracleBackend;
    use crate::corpus::{GoldValue, SlotEntry, StateMap, Turn};

    fn candidate(name: &str, frequency: usize) -> CandidateSlotType {
        CandidateSlotType {
            name: name.into(),
            frequency,
            matched_schema_slot: None,
            example_refs: Vec::new(),
        }
    }

    #[test]
    fn single_token_mask_on_tiny_text_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let masked = random_mask("user: north", 1, 1, &mut rng).unwrap();
        assert_eq!(masked.len(), 1);
        assert_eq!(masked[0].text, "user: <mask>");
        assert_eq!(masked[0].source_value, "north");
    }

    #[test]
    fn role_markers_are_never_masked() {
        let text = "system: which area? user: the north please";
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for masked in random_mask(text, 2, 3, &mut rng).unwrap() {
                assert!(masked.text.contains("system:"), "{}", masked.text);
                assert!(masked.text.contains("user:"), "{}", masked.text);
                assert!(masked.text.contains(MASK_TOKEN));
            }
        }
    }

    #[test]
    fn too_short_text_yields_no_probes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(random_mask("user:", 1, 2, &mut rng).unwrap().is_empty());
        assert!(random_mask("user: hi", 5, 1, &mut rng).unwrap().is_empty());
        assert!(random_mask("", 1, 1, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn zero_parameters_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            random_mask("user: hi", 0, 1, &mut rng),
            Err(SlotGenError::DegenerateStrategy)
        ));
        assert!(matches!(
            random_mask("user: hi", 1, 0, &mut rng),
            Err(SlotGenError::DegenerateStrategy)
        ));
    }

    fn probe_fixture() -> Vec<Dialogue> {
        let mut s0 = StateMap::new();
        s0.insert("hotel-area".into(), GoldValue::new("north").unwrap());
        vec![Dialogue {
            id: "P1".into(),
            domains: ["hotel".to_string()].into(),
            turns: vec![Turn {
                index: 0,
                system_utterance: String::new(),
                user_utterance: "somewhere in the north of town".into(),
            }],
            gold_states: Some(vec![s0]),
        }]
    }

    #[test]
    fn random_probes_are_seed_deterministic() {
        let dialogues = probe_fixture();
        let strategy = MaskStrategy { span_length: 1, num_masks: 2, seed: 7 };
        let a = build_random_probes(&dialogues, strategy).unwrap();
        let b = build_random_probes(&dialogues, strategy).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        let other = build_random_probes(
            &dialogues,
            MaskStrategy { seed: 8, ..strategy },
        )
        .unwrap();
        // same shape, windows chosen under a different seed
        assert_eq!(other.len(), 2);
    }

    #[test]
    fn value_probes_mask_gold_values() {
        let probes = build_value_probes(&probe_fixture()).unwrap();
        assert_eq!(probes.len(), 1);
        assert_eq!(probes[0].masked.source_value, "north");
        assert!(probes[0].masked.text.contains(MASK_TOKEN));
        let mut unlabeled = probe_fixture();
        unlabeled[0].gold_states = None;
        assert!(matches!(
            build_value_probes(&unlabeled),
            Err(SlotGenError::Unlabeled(_))
        ));
    }

    #[test]
    fn discovery_on_value_probes_recovers_the_gold_slot() {
        let dialogues = probe_fixture();
        let schema = SlotSchema::new(vec![SlotEntry {
            slot_name: "hotel-area".into(),
            domain: "hotel".into(),
            maskable: true,
            description: None,
        }])
        .unwrap();
        let oracle = ExtractiveOracleBackend::new(&dialogues, &schema).unwrap();
        let probes = build_value_probes(&dialogues).unwrap();
        let candidates = discover(&oracle, &probes, &schema).unwrap();
        assert_eq!(candidates.len(), 1);
        assert_eq!(candidates[0].name, "hotel-area");
        assert_eq!(candidates[0].frequency, 1);
        assert_eq!(candidates[0].matched_schema_slot.as_deref(), Some("hotel-area"));
        assert_eq!(candidates[0].example_refs, [("P1".to_string(), 0)]);
    }

    #[test]
    fn empty_corpus_discovers_nothing() {
        let schema = SlotSchema::new(vec![SlotEntry {
            slot_name: "hotel-area".into(),
            domain: "hotel".into(),
            maskable: true,
            description: None,
        }])
        .unwrap();
        let oracle = ExtractiveOracleBackend::new(&probe_fixture(), &schema).unwrap();
        let probes = build_random_probes(&[], MaskStrategy::default()).unwrap();
        assert!(probes.is_empty());
        assert!(discover(&oracle, &probes, &schema).unwrap().is_empty());
    }

    #[test]
    fn near_duplicates_merge_with_hand_checked_similarity() {
        // levenshtein("price", "prices") = 1, max length 6,
        // similarity = 1 - 1/6 = 0.8333… ≥ 0.8
        assert!((normalized_similarity("price", "prices") - 5.0 / 6.0).abs() < 1e-12);
        let (kept, stats) = merge_and_select(
            &[candidate("price", 30), candidate("prices", 5)],
            MergeConfig::default(),
        );
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].name, "price");
        assert_eq!(kept[0].frequency, 35);
        assert_eq!(stats, MergeStats { total_before: 35, total_after: 35, dropped: 0 });
    }

    #[test]
    fn suffixes_drive_merging_across_domain_prefixes() {
        let (kept, _) = merge_and_select(
            &[candidate("hotel-price", 10), candidate("price", 4)],
            MergeConfig::default(),
        );
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].name, "hotel-price");
        assert_eq!(kept[0].frequency, 14);
    }

    #[test]
    fn rare_groups_are_dropped_and_frequency_is_conserved() {
        let (kept, stats) = merge_and_select(
            &[candidate("area", 6), candidate("stray", 1)],
            MergeConfig::default(),
        );
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].name, "area");
        assert_eq!(stats, MergeStats { total_before: 7, total_after: 6, dropped: 1 });
        assert_eq!(stats.total_before, stats.total_after + stats.dropped);
    }

    #[test]
    fn dissimilar_names_stay_separate() {
        let (kept, _) = merge_and_select(
            &[candidate("area", 5), candidate("food", 4)],
            MergeConfig::default(),
        );
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].name, "area");
        assert_eq!(kept[1].name, "food");
    }
}
