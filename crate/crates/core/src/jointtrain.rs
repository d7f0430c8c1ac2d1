//! Joint fine-tuning data over the labeled source domains. Two sample
//! kinds go into one manifest: main samples ask for each schema slot's
//! value at each turn (with "none" targets for unset slots, so the model
//! learns to abstain), aux samples mask a gold value out of the history
//! and ask for its slot type. Mixing is a plain shuffle; both tasks weigh
//! the same per sample, so the task ratio is whatever the data yields.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, SlotSchema};
use crate::prompting::{
    inverse_prompt, main_prompt, mask_value, serialize_history, write_manifest, PromptError,
    PromptSample, Task,
};

#[derive(Debug, thiserror::Error)]
pub enum JointError {
    #[error("dialogue {id} has no gold states; joint training needs labels")]
    Unlabeled { id: String },
    #[error("domain {domain:?} of dialogue {id} has no schema slots")]
    UncoveredDomain { id: String, domain: String },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestCounts {
    pub main: usize,
    pub aux: usize,
}

/// An assembled training manifest plus its bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointManifest {
    pub samples: Vec<PromptSample>,
    pub counts: ManifestCounts,
    /// Free-form description of where the samples came from.
    pub provenance: String,
}

#[derive(Serialize, Deserialize)]
struct CountsSidecar {
    main: usize,
    aux: usize,
    provenance: String,
}

impl JointManifest {
    /// Write the manifest JSONL to `path` and the counts to a sidecar JSON
    /// next to it (same stem, `.counts.json`).
    pub fn write_to(&self, path: &Path) -> Result<(), JointError> {
        let file = std::fs::File::create(path)?;
        write_manifest(std::io::BufWriter::new(file), &self.samples)?;
        let sidecar = CountsSidecar {
            main: self.counts.main,
            aux: self.counts.aux,
            provenance: self.provenance.clone(),
        };
        let mut out = std::fs::File::create(sidecar_path(path))?;
        serde_json::to_writer_pretty(&mut out, &sidecar)
            .map_err(|e| JointError::Io(std::io::Error::other(e)))?;
        writeln!(out)?;
        Ok(())
    }
}

/// Sidecar path for a manifest: `joint.jsonl` -> `joint.counts.json`.
pub fn sidecar_path(manifest_path: &Path) -> std::path::PathBuf {
    manifest_path.with_extension("counts.json")
}

fn require_states<'a>(d: &'a Dialogue) -> Result<&'a [crate::corpus::StateMap], JointError> {
    d.gold_states
        .as_deref()
        .ok_or_else(|| JointError::Unlabeled { id: d.id.clone() })
}

/// One main sample per (turn, slot of the dialogue's domains). Unset slots
/// get the target "none".
pub fn build_main_samples(
    dialogues: &[Dialogue],
    schema: &SlotSchema,
) -> Result<Vec<PromptSample>, JointError> {
    let mut samples = Vec::new();
    for d in dialogues {
        let states = require_states(d)?;
        let slots: Vec<&str> = d
            .domains
            .iter()
            .flat_map(|domain| schema.slots_for_domain(domain).map(|e| e.slot_name.as_str()))
            .collect();
        for domain in &d.domains {
            if schema.slots_for_domain(domain).next().is_none() {
                return Err(JointError::UncoveredDomain { id: d.id.clone(), domain: domain.clone() });
            }
        }
        for turn in &d.turns {
            let history = serialize_history(d, turn.index)?;
            let state = &states[turn.index];
            for slot in &slots {
                let target = state
                    .get(*slot)
                    .map(|v| v.primary().to_string())
                    .unwrap_or_else(|| "none".to_string());
                samples.push(PromptSample {
                    task: Task::Main,
                    dialogue_id: d.id.clone(),
                    turn_index: turn.index,
                    slot_name: slot.to_string(),
                    input_text: main_prompt(schema, slot, &history)?,
                    target_text: target,
                });
            }
        }
    }
    if samples.is_empty() {
        log::warn!("joint training source produced no main samples");
    }
    Ok(samples)
}

/// One aux sample per (turn, set slot) whose value occurs verbatim in the
/// history: the value is masked and the slot name becomes the target.
/// Non-maskable slots (yes/no style) are skipped by schema flag; set slots
/// whose value happens not to occur are skipped silently; gold
/// alternatives are tried in order and the first maskable one wins.
pub fn build_aux_samples(
    dialogues: &[Dialogue],
    schema: &SlotSchema,
) -> Result<Vec<PromptSample>, JointError> {
    let mut samples = Vec::new();
    for d in dialogues {
        let states = require_states(d)?;
        for turn in &d.turns {
            let history = serialize_history(d, turn.index)?;
            for (slot, gold) in &states[turn.index] {
                let maskable = schema.get(slot).is_none_or(|e| e.maskable);
                if !maskable {
                    continue;
                }
                let Some(masked) =
                    gold.alternatives().iter().find_map(|alt| mask_value(&history, alt))
                else {
                    continue;
                };
                samples.push(PromptSample {
                    task: Task::Aux,
                    dialogue_id: d.id.clone(),
                    turn_index: turn.index,
                    slot_name: slot.clone(),
                    input_text: inverse_prompt(&masked),
                    target_text: slot.clone(),
                });
            }
        }
    }
    Ok(samples)
}

/// Shuffle main and aux samples together. The counts survive as metadata;
/// nothing reweighs the tasks.
pub fn assemble(
    main: Vec<PromptSample>,
    aux: Vec<PromptSample>,
    shuffle_seed: u64,
    provenance: impl Into<String>,
) -> JointManifest {
    let counts = ManifestCounts { main: main.len(), aux: aux.len() };
    let mut samples = main;
    samples.extend(aux);
    samples.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    JointManifest { samples, counts, provenance: provenance.into() }
}

/// Convenience: build both sample kinds and assemble them.
pub fn build(
    dialogues: &[Dialogue],
    schema: &SlotSchema,
    shuffle_seed: u64,
    provenance: impl Into<String>,
) -> Result<JointManifest, JointError> {
    let main = build_main_samples(dialogues, schema)?;
    let aux = build_aux_samples(dialogues, schema)?;
    Ok(assemble(main, aux, shuffle_seed, provenance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{GoldValue, SlotEntry, StateMap, Turn};
    use crate::prompting::parse_main_prompt;

    fn schema() -> SlotSchema {
        let entry = |slot: &str, maskable: bool| SlotEntry {
            slot_name: slot.into(),
            domain: slot.split_once('-').unwrap().0.into(),
            maskable,
            description: None,
        };
        SlotSchema::new(vec![
            entry("hotel-area", true),
            entry("hotel-day", true),
            entry("hotel-internet", false),
            entry("hotel-name", true),
            entry("hotel-parking", false),
            entry("hotel-people", true),
            entry("hotel-price", true),
            entry("hotel-stars", true),
            entry("hotel-stay", true),
            entry("hotel-type", true),
            entry("taxi-departure", true),
            entry("taxi-destination", true),
        ])
        .unwrap()
    }

    fn hilton_dialogue() -> Dialogue {
        let mut state = StateMap::new();
        state.insert("hotel-name".into(), GoldValue::new("the hilton").unwrap());
        Dialogue {
            id: "D1".into(),
            domains: ["hotel".to_string()].into(),
            turns: vec![Turn {
                index: 0,
                system_utterance: String::new(),
                user_utterance: "i want to stay at the hilton".into(),
            }],
            gold_states: Some(vec![state]),
        }
    }

    #[test]
    fn main_samples_cover_every_domain_slot_with_none_targets() {
        let samples = build_main_samples(&[hilton_dialogue()], &schema()).unwrap();
        assert_eq!(samples.len(), 10);
        let named: Vec<&PromptSample> =
            samples.iter().filter(|s| s.target_text != "none").collect();
        assert_eq!(named.len(), 1);
        assert_eq!(named[0].slot_name, "hotel-name");
        assert_eq!(named[0].target_text, "the hilton");
        assert!(samples.iter().all(|s| s.task == Task::Main));
    }

    #[test]
    fn multi_domain_dialogue_enumerates_both_domains_slots() {
        let mut d = hilton_dialogue();
        d.domains.insert("taxi".into());
        let mut state = d.gold_states.as_ref().unwrap()[0].clone();
        state.insert("taxi-destination".into(), GoldValue::new("city plaza").unwrap());
        d.gold_states = Some(vec![state]);
        d.turns[0].user_utterance = "a taxi to city plaza and the hilton hotel".into();
        let samples = build_main_samples(&[d.clone()], &schema()).unwrap();
        // 10 hotel slots + 2 taxi slots, one turn
        assert_eq!(samples.len(), d.turns.len() * 12);
    }

    #[test]
    fn main_inputs_carry_exactly_the_history() {
        // the prompt must end at the history; targets are never appended
        let d = hilton_dialogue();
        let history = serialize_history(&d, 0).unwrap();
        for s in build_main_samples(&[d], &schema()).unwrap() {
            let (slot, parsed_history) = parse_main_prompt(&s.input_text).unwrap();
            assert_eq!(slot, s.slot_name);
            assert_eq!(parsed_history, history);
        }
    }

    #[test]
    fn unlabeled_source_is_an_error() {
        let mut d = hilton_dialogue();
        d.gold_states = None;
        assert!(matches!(
            build_main_samples(&[d], &schema()),
            Err(JointError::Unlabeled { .. })
        ));
    }

    #[test]
    fn uncovered_domain_is_an_error() {
        let mut d = hilton_dialogue();
        d.domains.insert("bus".into());
        assert!(matches!(
            build_main_samples(&[d], &schema()),
            Err(JointError::UncoveredDomain { .. })
        ));
    }

    #[test]
    fn aux_samples_mask_set_values_once_per_turn_slot() {
        let samples = build_aux_samples(&[hilton_dialogue()], &schema()).unwrap();
        assert_eq!(samples.len(), 1);
        let s = &samples[0];
        assert_eq!(s.task, Task::Aux);
        assert_eq!(s.target_text, "hotel-name");
        assert_eq!(
            s.input_text,
            "what is the masked slot type in context user: i want to stay at <mask>?"
        );
    }

    #[test]
    fn aux_skips_non_maskable_and_unexpressed_values() {
        let mut d = hilton_dialogue();
        let mut state = d.gold_states.as_ref().unwrap()[0].clone();
        // yes/no slot: schema says non-maskable
        state.insert("hotel-parking".into(), GoldValue::new("yes").unwrap());
        // set but never said: maskable by schema, absent from text
        state.insert("hotel-area".into(), GoldValue::new("centre").unwrap());
        d.gold_states = Some(vec![state]);
        let samples = build_aux_samples(&[d], &schema()).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].target_text, "hotel-name");
    }

    #[test]
    fn aux_masks_values_from_earlier_turns() {
        // the state accumulates, so a turn-0 value is still masked in the
        // longer turn-1 history
        let mut d = hilton_dialogue();
        d.turns.push(Turn {
            index: 1,
            system_utterance: "sure. anything else?".into(),
            user_utterance: "in the centre please".into(),
        });
        let mut s1 = d.gold_states.as_ref().unwrap()[0].clone();
        s1.insert("hotel-area".into(), GoldValue::new("centre").unwrap());
        d.gold_states.as_mut().unwrap().push(s1);
        let samples = build_aux_samples(&[d], &schema()).unwrap();
        let turn1: Vec<&PromptSample> = samples.iter().filter(|s| s.turn_index == 1).collect();
        assert_eq!(turn1.len(), 2);
        let name = turn1.iter().find(|s| s.target_text == "hotel-name").unwrap();
        assert!(name.input_text.contains("user: i want to stay at <mask>"));
        assert!(name.input_text.contains("in the centre"));
    }

    #[test]
    fn gold_alternatives_are_tried_in_order() {
        let mut d = hilton_dialogue();
        let mut state = StateMap::new();
        // the primary form never occurs; the second does
        state.insert(
            "hotel-name".into(),
            GoldValue::with_alternatives(["hilton hotel and spa", "the hilton"]).unwrap(),
        );
        d.gold_states = Some(vec![state]);
        let samples = build_aux_samples(&[d], &schema()).unwrap();
        assert_eq!(samples.len(), 1);
        assert!(samples[0].input_text.contains("stay at <mask>?"));
    }

    #[test]
    fn assemble_counts_shuffles_and_is_seed_deterministic() {
        let mut d = hilton_dialogue();
        d.turns.push(Turn {
            index: 1,
            system_utterance: "ok".into(),
            user_utterance: "in the centre".into(),
        });
        let mut s1 = d.gold_states.as_ref().unwrap()[0].clone();
        s1.insert("hotel-area".into(), GoldValue::new("centre").unwrap());
        d.gold_states.as_mut().unwrap().push(s1);
        let dialogues = [d];
        let a = build(&dialogues, &schema(), 13, "unit").unwrap();
        let b = build(&dialogues, &schema(), 13, "unit").unwrap();
        let c = build(&dialogues, &schema(), 14, "unit").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.counts, ManifestCounts { main: 20, aux: 3 });
        assert_eq!(a.samples.len(), 23);
        // same multiset, seed-dependent order
        let sorted = |m: &JointManifest| {
            let mut v = m.samples.clone();
            v.sort_by(|x, y| x.input_text.cmp(&y.input_text).then(x.target_text.cmp(&y.target_text)));
            v
        };
        assert_eq!(sorted(&a), sorted(&c));
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn empty_source_gives_an_empty_manifest() {
        let manifest = build(&[], &schema(), 1, "unit").unwrap();
        assert!(manifest.samples.is_empty());
        assert_eq!(manifest.counts, ManifestCounts { main: 0, aux: 0 });
    }

    #[test]
    fn manifest_files_round_trip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("joint.jsonl");
        let manifest = build(&[hilton_dialogue()], &schema(), 5, "unit").unwrap();
        manifest.write_to(&path).unwrap();
        let back = crate::prompting::read_manifest(
            std::io::BufReader::new(std::fs::File::open(&path).unwrap()),
        )
        .unwrap();
        assert_eq!(back, manifest.samples);
        let sidecar: serde_json::Value = serde_json::from_reader(
            std::fs::File::open(sidecar_path(&path)).unwrap(),
        )
        .unwrap();
        assert_eq!(sidecar["main"], 10);
        assert_eq!(sidecar["aux"], 1);
        assert_eq!(sidecar["provenance"], "unit");
    }
}
