//! Gold-answering backends. The extractive oracle plays a perfect model:
//! main-task answers come straight from the labels it was built on, and
//! inverse-task answers are found by reconstruction, i.e. by checking which
//! gold value, when masked out of the recomputed history, reproduces the
//! masked text it was asked about. The noisy variant corrupts a controlled
//! fraction of answers to exercise the consistency filter.
//!
//! Both keep their own copy of the labels at construction time, so they
//! can be built before a corpus is sealed and used after.

use std::collections::BTreeMap;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{
    simulated_training_id, validate_requests, Backend, BackendError, GenerationRequest,
    TrainingJob,
};
use crate::corpus::{Dialogue, SlotSchema};
use crate::prompting::{mask_value, parse_inverse_prompt, serialize_history, Task};
use crate::text::find_occurrences;

/// Answers every prompt from gold labels.
pub struct ExtractiveOracleBackend {
    dialogues: BTreeMap<String, Dialogue>,
    schema: SlotSchema,
    trained: Mutex<Vec<String>>,
}

impl ExtractiveOracleBackend {
    /// Copies labeled dialogues in. Every dialogue must carry gold states.
    pub fn new(dialogues: &[Dialogue], schema: &SlotSchema) -> Result<Self, BackendError> {
        let mut map = BTreeMap::new();
        for d in dialogues {
            if d.gold_states.is_none() {
                return Err(BackendError::UnlabeledOracleSource { id: d.id.clone() });
            }
            map.insert(d.id.clone(), d.clone());
        }
        Ok(ExtractiveOracleBackend { dialogues: map, schema: schema.clone(), trained: Mutex::new(Vec::new()) })
    }

    /// Model ids produced by simulated training, in submission order.
    pub fn trained_models(&self) -> Vec<String> {
        self.trained.lock().unwrap().clone()
    }

    fn answer(&self, request: &GenerationRequest) -> Result<String, String> {
        let sample = &request.sample;
        let dialogue = self
            .dialogues
            .get(&sample.dialogue_id)
            .ok_or_else(|| format!("unknown dialogue {:?}", sample.dialogue_id))?;
        let state = dialogue
            .state_at(sample.turn_index)
            .ok_or_else(|| format!("turn {} out of range", sample.turn_index))?;
        match sample.task {
            Task::Main => Ok(state
                .get(&sample.slot_name)
                .map(|v| v.primary().to_string())
                .unwrap_or_else(|| "none".to_string())),
            Task::Aux => {
                let masked_text = parse_inverse_prompt(&sample.input_text)
                    .ok_or_else(|| "input is not an inverse prompt".to_string())?;
                let history = serialize_history(dialogue, sample.turn_index)
                    .map_err(|e| e.to_string())?;
                for (slot, gold) in state {
                    for alt in gold.alternatives() {
                        if let Some(masked) = mask_value(&history, alt) {
                            if masked.text == masked_text {
                                return Ok(slot.clone());
                            }
                        }
                    }
                }
                Ok("none".to_string())
            }
        }
    }

    /// Hard negatives for a main-task request: values of other slots in the
    /// same gold state that actually occur in the history. Sorted for
    /// determinism.
    fn hard_negatives(&self, request: &GenerationRequest, exclude: &str) -> Vec<String> {
        let sample = &request.sample;
        let Some(dialogue) = self.dialogues.get(&sample.dialogue_id) else { return Vec::new() };
        let Some(state) = dialogue.state_at(sample.turn_index) else { return Vec::new() };
        let Ok(history) = serialize_history(dialogue, sample.turn_index) else { return Vec::new() };
        let mut out: std::collections::BTreeSet<String> = state
            .iter()
            .filter(|(slot, _)| slot.as_str() != sample.slot_name)
            .flat_map(|(_, gold)| gold.alternatives())
            .filter(|alt| !find_occurrences(&history, alt).is_empty())
            .cloned()
            .collect();
        out.remove(exclude);
        out.into_iter().collect()
    }
}

fn run_batch(
    requests: &[GenerationRequest],
    mut answer: impl FnMut(&GenerationRequest) -> Result<String, String>,
) -> Result<Vec<String>, BackendError> {
    validate_requests(requests)?;
    let outcomes: Vec<Result<String, String>> = requests.iter().map(&mut answer).collect();
    let failed: Vec<usize> = outcomes
        .iter()
        .enumerate()
        .filter_map(|(i, o)| o.is_err().then_some(i))
        .collect();
    if failed.is_empty() {
        Ok(outcomes.into_iter().map(Result::unwrap).collect())
    } else {
        Err(BackendError::Generation { outcomes, failed })
    }
}

impl Backend for ExtractiveOracleBackend {
    fn name(&self) -> &str {
        "extractive-oracle"
    }

    fn generate_batch(&self, requests: &[GenerationRequest]) -> Result<Vec<String>, BackendError> {
        run_batch(requests, |r| self.answer(r))
    }

    fn submit_training(&self, job: &TrainingJob) -> Result<String, BackendError> {
        let id = simulated_training_id(job)?;
        self.trained.lock().unwrap().push(id.clone());
        Ok(id)
    }
}

/// Wraps the extractive oracle and corrupts answers at controlled rates:
/// a main answer is replaced with probability `p_main` by a hard negative
/// (another slot's in-history value) or "none"; an aux answer is replaced
/// with probability `q_aux` by a random other schema slot.
///
/// Corruption is decided per item from a stable hash of (seed, task,
/// dialogue, turn, slot), so outcomes do not depend on how requests are
/// batched and repeat exactly across rounds.
pub struct NoisyOracleBackend {
    inner: ExtractiveOracleBackend,
    p_main: f64,
    q_aux: f64,
    seed: u64,
}

impl NoisyOracleBackend {
    pub fn new(
        dialogues: &[Dialogue],
        schema: &SlotSchema,
        p_main: f64,
        q_aux: f64,
        seed: u64,
    ) -> Result<Self, BackendError> {
        for (name, p) in [("p_main", p_main), ("q_aux", q_aux)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(BackendError::InvalidRequest(format!("{name} = {p} outside [0, 1]")));
            }
        }
        Ok(NoisyOracleBackend {
            inner: ExtractiveOracleBackend::new(dialogues, schema)?,
            p_main,
            q_aux,
            seed,
        })
    }

    fn item_rng(&self, request: &GenerationRequest) -> ChaCha8Rng {
        let s = &request.sample;
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update([match s.task {
            Task::Main => 0u8,
            Task::Aux => 1u8,
        }]);
        hasher.update(s.dialogue_id.as_bytes());
        hasher.update([0xff]);
        hasher.update(s.turn_index.to_le_bytes());
        hasher.update(s.slot_name.as_bytes());
        let digest = hasher.finalize();
        ChaCha8Rng::seed_from_u64(u64::from_le_bytes(digest[..8].try_into().unwrap()))
    }

    fn answer(&self, request: &GenerationRequest) -> Result<String, String> {
        let truth = self.inner.answer(request)?;
        let mut rng = self.item_rng(request);
        match request.sample.task {
            Task::Main => {
                if rng.gen::<f64>() >= self.p_main {
                    return Ok(truth);
                }
                let mut options = self.inner.hard_negatives(request, &truth);
                if truth != "none" {
                    options.push("none".to_string());
                }
                if options.is_empty() {
                    return Ok(truth);
                }
                let pick = rng.gen_range(0..options.len());
                Ok(options.swap_remove(pick))
            }
            Task::Aux => {
                if rng.gen::<f64>() >= self.q_aux {
                    return Ok(truth);
                }
                let options: Vec<&str> =
                    self.inner.schema.slot_names().filter(|s| *s != truth).collect();
                if options.is_empty() {
                    return Ok(truth);
                }
                Ok(options[rng.gen_range(0..options.len())].to_string())
            }
        }
    }
}

impl Backend for NoisyOracleBackend {
    fn name(&self) -> &str {
        "noisy-oracle"
    }

    fn generate_batch(&self, requests: &[GenerationRequest]) -> Result<Vec<String>, BackendError> {
        run_batch(requests, |r| self.answer(r))
    }

    fn submit_training(&self, job: &TrainingJob) -> Result<String, BackendError> {
        self.inner.submit_training(job)
    }
}
