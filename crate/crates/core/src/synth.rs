//! Deterministic synthetic dialogue corpus. Five travel domains, thirty
//! slots, and value pools engineered so that within any one dialogue no
//! two slots share a token: masking a value can never collide with
//! another slot's surface form. Every value except the yes/no pair
//! (internet, parking) appears verbatim in the user utterance that
//! introduces it, which makes the corpus ideal for exercising the masking
//! and cycle-check machinery end to end. The generator is pure: the same
//! config always produces byte-identical dialogues.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::corpus::{Dialogue, GoldValue, SlotEntry, SlotSchema, StateMap, Turn};

pub const SYNTH_DOMAINS: [&str; 5] = ["attraction", "hotel", "restaurant", "taxi", "train"];

/// Slot suffixes per domain. `hotel-internet` and `hotel-parking` are the
/// two unmaskable slots: their gold values are yes/no, which the phrasing
/// never spells out.
const DOMAIN_SLOTS: [(&str, &[&str]); 5] = [
    ("attraction", &["area", "name", "type"]),
    (
        "hotel",
        &["area", "day", "internet", "name", "parking", "people", "price", "stars", "stay", "type"],
    ),
    ("restaurant", &["area", "day", "food", "name", "people", "price", "time"]),
    ("taxi", &["arriveby", "departure", "destination", "leaveat"]),
    ("train", &["arriveby", "day", "departure", "destination", "leaveat", "people"]),
];

/// The 30-slot schema the generator fills.
pub fn synth_schema() -> SlotSchema {
    let mut entries = Vec::new();
    for (domain, suffixes) in DOMAIN_SLOTS {
        for suffix in suffixes {
            entries.push(SlotEntry {
                slot_name: format!("{domain}-{suffix}"),
                domain: domain.to_string(),
                maskable: !matches!(*suffix, "internet" | "parking"),
                description: None,
            });
        }
    }
    SlotSchema::new(entries).expect("static schema is valid")
}

const AREAS: &[&str] = &["north", "south", "east", "west", "centre"];
const DAYS: &[&str] =
    &["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"];
const PEOPLE: &[&str] = &["one", "two", "three", "four"];
const PRICES: &[&str] = &["cheap", "moderate", "expensive"];
const YES_NO: &[&str] = &["yes", "no"];

/// Distinct surface values per (domain, slot suffix). Within one domain
/// the pools are pairwise token-disjoint, and no pool token appears in
/// any phrasing template.
fn pool(domain: &str, suffix: &str) -> &'static [&'static str] {
    match (domain, suffix) {
        ("attraction", "area") | ("hotel", "area") | ("restaurant", "area") => AREAS,
        ("hotel", "day") | ("restaurant", "day") | ("train", "day") => DAYS,
        ("hotel", "people") | ("restaurant", "people") | ("train", "people") => PEOPLE,
        ("hotel", "price") | ("restaurant", "price") => PRICES,
        ("hotel", "internet") | ("hotel", "parking") => YES_NO,
        ("attraction", "name") => {
            &["camboats marina", "whipple museum", "clare chapel", "fenland observatory"]
        }
        ("attraction", "type") => &["cinema", "theatre", "gallery", "nightclub"],
        ("hotel", "name") => &[
            "acorn lodge",
            "gonville grand",
            "ashley manor",
            "warkworth villa",
            "lensfield towers",
            "huntingdon suites",
            "kirkwood residence",
            "leverton retreat",
        ],
        ("hotel", "stars") => &["2", "3", "4", "5"],
        ("hotel", "stay") => &["five nights", "seven nights", "nine nights", "eleven nights"],
        ("hotel", "type") => &["guesthouse", "boutique", "hostel", "resort"],
        ("restaurant", "food") => {
            &["thai", "chinese", "italian", "indian", "korean", "turkish", "mexican", "lebanese"]
        }
        ("restaurant", "name") => &[
            "spice garden",
            "golden wok",
            "riverside bistro",
            "curry palace",
            "mezze corner",
            "pasta cellar",
            "seoul kitchen",
            "taco yard",
        ],
        ("restaurant", "time") => &["17:15", "18:30", "19:45", "20:00", "12:15", "13:30"],
        ("taxi", "arriveby") => &["09:15", "10:45", "11:30", "08:20"],
        ("taxi", "leaveat") => &["14:05", "15:25", "16:40", "13:55"],
        ("taxi", "departure") => {
            &["magdalene bridge", "queens quarter", "science park", "abbey lane"]
        }
        ("taxi", "destination") => {
            &["grafton mall", "trinity quay", "riverbank plaza", "cherry orchard"]
        }
        ("train", "arriveby") => &["07:10", "08:35", "09:50", "06:45"],
        ("train", "leaveat") => &["05:40", "06:25", "11:05", "12:40"],
        ("train", "departure") => &["norwich", "stevenage", "peterborough", "ely"],
        ("train", "destination") => &["broxbourne", "leicester", "stansted", "birmingham"],
        other => unreachable!("no pool for {other:?}"),
    }
}

/// User phrasing that embeds the value verbatim, except for the yes/no
/// slots whose phrasing conveys the answer without the literal token.
fn phrase(domain: &str, suffix: &str, value: &str) -> String {
    match (domain, suffix) {
        ("hotel", "internet") => match value {
            "yes" => "it must come with complimentary wifi.".to_string(),
            _ => "wifi coverage does not matter.".to_string(),
        },
        ("hotel", "parking") => match value {
            "yes" => "my car comes along, covered spaces would help.".to_string(),
            _ => "we travel light, a garage does not matter.".to_string(),
        },
        (_, "area") => format!("somewhere in the {value} of the city."),
        (_, "day") => format!("checking the plan against {value}."),
        ("hotel", "name") => format!("i would like the {value}."),
        ("hotel", "people") => format!("reserving rooms covering {value} guests."),
        (_, "price") => format!("keep it {value} priced."),
        ("hotel", "stars") => format!("rated {value} stars."),
        ("hotel", "stay") => format!("staying {value}."),
        ("hotel", "type") => format!("ideally a {value}."),
        ("attraction", "name") => format!("is {value} worth seeing?"),
        ("attraction", "type") => format!("maybe a {value}."),
        ("restaurant", "food") => format!("serving {value} cuisine."),
        ("restaurant", "name") => format!("how about {value}?"),
        ("restaurant", "people") => format!("a group of {value} guests."),
        ("restaurant", "time") => format!("around {value} would suit us."),
        ("taxi", "arriveby") | ("train", "arriveby") => format!("arriving by {value}."),
        ("taxi", "leaveat") | ("train", "leaveat") => format!("leaving at {value}."),
        ("taxi", "departure") => format!("pick us up from {value}."),
        ("taxi", "destination") => format!("drop us off near {value}."),
        ("train", "departure") => format!("departing from {value}."),
        ("train", "destination") => format!("heading to {value}."),
        (_, "people") => format!("tickets covering {value} passengers."),
        other => unreachable!("no phrasing for {other:?}"),
    }
}

fn opener(domain: &str) -> String {
    format!("hello, i am sorting out a {domain} plan.")
}

const ACKS: &[&str] = &["okay, go on.", "noted, anything more?", "sure, tell me more.", "understood."];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub dialogues_per_domain: usize,
    /// Prepended to every dialogue id, so train and test portions drawn
    /// with different prefixes can never collide.
    pub id_prefix: String,
    /// Chance that a system turn echoes an earlier maskable value.
    pub echo_probability: f64,
}

impl SynthConfig {
    pub fn new(seed: u64, dialogues_per_domain: usize, id_prefix: impl Into<String>) -> Self {
        SynthConfig {
            seed,
            dialogues_per_domain,
            id_prefix: id_prefix.into(),
            echo_probability: 0.3,
        }
    }
}

fn dialogue_rng(seed: u64, id: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(id.as_bytes());
    ChaCha8Rng::from_seed(hasher.finalize().into())
}

fn generate_dialogue(domain: &str, id: &str, seed: u64, echo_probability: f64) -> Dialogue {
    let mut rng = dialogue_rng(seed, id);
    let suffixes: &[&str] = DOMAIN_SLOTS
        .iter()
        .find(|(d, _)| *d == domain)
        .expect("known domain")
        .1;
    let mut order: Vec<&str> = suffixes.to_vec();
    order.shuffle(&mut rng);
    let n_turns = rng.gen_range(2..=4).min(order.len());

    let mut turns = Vec::with_capacity(n_turns);
    let mut states = Vec::with_capacity(n_turns);
    let mut acc = StateMap::new();
    // (suffix, value) pairs that are safe to echo back verbatim
    let mut echoable: Vec<(String, String)> = Vec::new();
    let mut next = 0usize;
    for t in 0..n_turns {
        let turns_left = n_turns - 1 - t;
        let budget = order.len() - next - turns_left;
        let k = rng.gen_range(1..=3).min(budget).max(1);
        let introduced = &order[next..next + k];
        next += k;

        let mut pieces = Vec::new();
        if t == 0 {
            pieces.push(opener(domain));
        }
        let system = if t == 0 {
            String::new()
        } else if !echoable.is_empty() && rng.gen_bool(echo_probability) {
            let (_, value) = &echoable[rng.gen_range(0..echoable.len())];
            format!("you mentioned {value}, noted.")
        } else {
            ACKS[rng.gen_range(0..ACKS.len())].to_string()
        };
        for suffix in introduced {
            let choices = pool(domain, suffix);
            let value = choices[rng.gen_range(0..choices.len())];
            pieces.push(phrase(domain, suffix, value));
            acc.insert(
                format!("{domain}-{suffix}"),
                GoldValue::new(value).expect("pool values are non-empty"),
            );
            if !matches!(*suffix, "internet" | "parking") {
                echoable.push((suffix.to_string(), value.to_string()));
            }
        }
        turns.push(Turn {
            index: t,
            system_utterance: system,
            user_utterance: pieces.join(" "),
        });
        states.push(acc.clone());
    }
    Dialogue {
        id: id.to_string(),
        domains: [domain.to_string()].into(),
        turns,
        gold_states: Some(states),
    }
}

/// Generate a labeled corpus: `dialogues_per_domain` single-domain
/// dialogues for each of the five domains, ids sorted.
pub fn generate(config: &SynthConfig) -> Vec<Dialogue> {
    let mut out = Vec::new();
    for domain in SYNTH_DOMAINS {
        for i in 0..config.dialogues_per_domain {
            let id = format!("{}-{}-{:03}", config.id_prefix, domain, i);
            out.push(generate_dialogue(domain, &id, config.seed, config.echo_probability));
        }
    }
    out
}

/// Render dialogues in the MultiWOZ-style raw shape, good for exercising
/// the ingest path end to end.
pub fn to_raw_multiwoz(dialogues: &[Dialogue]) -> Value {
    let mut root = Map::new();
    for d in dialogues {
        let states = d.gold_states.as_ref().expect("synthetic dialogues are labeled");
        let mut log = Vec::new();
        for turn in &d.turns {
            log.push(json!({"text": turn.user_utterance, "metadata": {}}));
            // the system entry after user turn t carries the state reached
            // at t; its text is the next turn's system utterance
            let follow_up = d
                .turns
                .get(turn.index + 1)
                .map(|n| n.system_utterance.clone())
                .unwrap_or_else(|| "thank you, goodbye.".to_string());
            let mut metadata: Map<String, Value> = Map::new();
            for (slot, gold) in &states[turn.index] {
                let (domain, suffix) = slot.split_once('-').expect("canonical slot name");
                let semi = metadata
                    .entry(domain.to_string())
                    .or_insert_with(|| json!({"semi": {}}));
                semi["semi"][suffix] = Value::String(gold.joined());
            }
            log.push(json!({"text": follow_up, "metadata": metadata}));
        }
        let goal: Map<String, Value> = d
            .domains
            .iter()
            .map(|domain| (domain.clone(), json!({"info": {"synthetic": "true"}})))
            .collect();
        root.insert(d.id.clone(), json!({"goal": goal, "log": log}));
    }
    Value::Object(root)
}

fn service_name(domain: &str) -> String {
    let mut chars = domain.chars();
    let head = chars.next().map(|c| c.to_ascii_uppercase()).unwrap_or('X');
    format!("{head}{}_1", chars.as_str())
}

/// Render dialogues in the SGD-style raw shape.
pub fn to_raw_sgd(dialogues: &[Dialogue]) -> Value {
    let mut out = Vec::new();
    for d in dialogues {
        let states = d.gold_states.as_ref().expect("synthetic dialogues are labeled");
        let mut raw_turns = Vec::new();
        for turn in &d.turns {
            // group the accumulated state by domain into one frame each
            let mut per_domain: Map<String, Value> = Map::new();
            for (slot, gold) in &states[turn.index] {
                let (domain, suffix) = slot.split_once('-').expect("canonical slot name");
                let frame = per_domain
                    .entry(service_name(domain))
                    .or_insert_with(|| json!({}));
                frame[suffix] = json!(gold.alternatives());
            }
            let frames: Vec<Value> = per_domain
                .into_iter()
                .map(|(service, slot_values)| {
                    json!({"service": service, "state": {"slot_values": slot_values}})
                })
                .collect();
            raw_turns.push(json!({
                "speaker": "USER",
                "utterance": turn.user_utterance,
                "frames": frames
            }));
            if let Some(next) = d.turns.get(turn.index + 1) {
                raw_turns.push(json!({
                    "speaker": "SYSTEM",
                    "utterance": next.system_utterance,
                    "frames": []
                }));
            }
        }
        let services: Vec<String> = d.domains.iter().map(|dm| service_name(dm)).collect();
        out.push(json!({
            "dialogue_id": d.id,
            "services": services,
            "turns": raw_turns
        }));
    }
    Value::Array(out)
}
