//! The subcommands. Each one reads its upstream artifacts from the
//! workdir, does its work through the library crate, and writes its own
//! artifacts plus a provenance sidecar. Artifacts are deterministic for a
//! fixed config and seed, so rerunning a command rewrites identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use cycledst::backend::{
    build_icl_prompt, Backend, ExtractiveOracleBackend, NoisyOracleBackend, PoolKind,
    RemoteBackend, RemoteConfig,
};
use cycledst::corpus::{
    by_id, classify_seen, ingest, leave_one_out, read_normalized, seal, write_normalized,
    Dialogue, RawFormat, SlotSchema, Split, TurnKey,
};
use cycledst::eval::{evaluate, read_predictions, write_predictions, GoldStates, Predictions};
use cycledst::oracle_selection::{oracular_select, pseudo_label_precision, MarginReport};
use cycledst::prompting::{serialize_history, serialize_state};
use cycledst::selftrain::{
    cycle_check, generate_states, run_loop, select, write_round_reports, EvalHook, LoopConfig,
    SelectionPolicy, SelectionReport, SelfTrainError, StopMode, TurnPrediction,
};
use cycledst::slotgen::{
    build_random_probes, build_value_probes, discover, merge_and_select, MaskStrategy,
    MergeConfig,
};
use cycledst::synth::{generate as synth_generate, synth_schema, to_raw_multiwoz, SynthConfig};
use cycledst::text::normalize_value;
use serde::Serialize;
use serde_json::Value;

use crate::artifacts::{create, require, write_meta};
use crate::config::{BackendKind, ProbeMode, RunConfig};
use crate::{
    CliError, DiscoverArgs, EvalArgs, IclArgs, IngestArgs, OracleArgs, SynthArgs,
};

pub const SCHEMA: &str = "schema.json";
pub const CORPUS_TRAIN: &str = "corpus_train.jsonl";
pub const CORPUS_TEST: &str = "corpus_test.jsonl";
pub const SPLIT: &str = "split.json";
pub const SEEN: &str = "seen.json";
pub const JOINT: &str = "joint_manifest.jsonl";
pub const ROUNDS: &str = "rounds.jsonl";
pub const SELECTION: &str = "selection.json";
pub const PSEUDO_LABELS: &str = "pseudo_labels.jsonl";
pub const PREDICTIONS: &str = "predictions.jsonl";
pub const METRICS: &str = "metrics.json";
pub const PER_SLOT: &str = "per_slot.csv";
pub const ORACLE_SELECTION: &str = "oracle_selection.json";
pub const MARGIN_JSON: &str = "margin.json";
pub const MARGIN_CSV: &str = "margin.csv";
pub const CANDIDATES: &str = "candidates.json";
pub const MERGE_STATS: &str = "merge_stats.json";
pub const ICL_JSON: &str = "icl_prompt.json";
pub const ICL_TXT: &str = "icl_prompt.txt";

/// Map a self-training failure onto the exit-code taxonomy: backend
/// trouble is distinguishable from bad inputs, and an abort inherits the
/// class of its cause.
pub(crate) fn classify_selftrain(e: &SelfTrainError) -> CliError {
    match e {
        SelfTrainError::Aborted { source, .. } => match classify_selftrain(source) {
            CliError::Backend(_) => CliError::Backend(e.to_string()),
            CliError::Usage(_) => CliError::Usage(e.to_string()),
            CliError::Data(_) => CliError::Data(e.to_string()),
        },
        SelfTrainError::GenerationFailed { .. }
        | SelfTrainError::Backend(_)
        | SelfTrainError::EvalHook(_) => CliError::Backend(e.to_string()),
        SelfTrainError::MissingHook => CliError::Usage(e.to_string()),
        _ => CliError::Data(e.to_string()),
    }
}

/// Build the configured backend over the dialogues it may be asked about.
/// Oracle backends copy those labels in; they play the model, so knowing
/// the answers is their job. Run hygiene is audited separately through the
/// sealed gold store.
pub fn build_backend(
    config: &RunConfig,
    labeled: &[Dialogue],
    schema: &SlotSchema,
) -> Result<Box<dyn Backend>, CliError> {
    match config.backend.kind {
        BackendKind::ExtractiveOracle => {
            Ok(Box::new(ExtractiveOracleBackend::new(labeled, schema)?))
        }
        BackendKind::NoisyOracle => Ok(Box::new(NoisyOracleBackend::new(
            labeled,
            schema,
            config.backend.p_main,
            config.backend.q_aux,
            config.seed,
        )?)),
        BackendKind::Remote => {
            let mut remote = match &config.backend.endpoint {
                Some(url) => {
                    let mut remote = RemoteConfig::new(url.clone());
                    remote.api_key = std::env::var("CYCLEDST_API_KEY").ok();
                    remote
                }
                None => RemoteConfig::from_env()?,
            };
            remote.mask_token = config.backend.mask_token.clone();
            Ok(Box::new(RemoteBackend::new(remote)))
        }
    }
}

fn load_schema(config: &RunConfig) -> Result<SlotSchema, CliError> {
    let reader = require(&config.workdir().join(SCHEMA), "ingest")?;
    Ok(SlotSchema::from_reader(reader)?)
}

fn load_corpus(config: &RunConfig, name: &str, producer: &str) -> Result<Vec<Dialogue>, CliError> {
    let reader = require(&config.workdir().join(name), producer)?;
    Ok(read_normalized(reader)?)
}

fn load_split(config: &RunConfig) -> Result<Split, CliError> {
    let reader = require(&config.workdir().join(SPLIT), "split")?;
    Ok(Split::from_reader(reader)?)
}

/// Clone the dialogues named by `ids`, in id order, skipping unknowns.
fn select_ids(all: &[Dialogue], ids: &[String]) -> Vec<Dialogue> {
    let index = by_id(all);
    let mut wanted: Vec<&String> = ids.iter().collect();
    wanted.sort();
    wanted
        .into_iter()
        .filter_map(|id| index.get(id.as_str()).map(|d| (*d).clone()))
        .collect()
}

fn ensure_target(split: &Split, target: &str) -> Result<(), CliError> {
    if split.target_domain != target {
        return Err(CliError::Data(format!(
            "split targets {:?} but the config targets {target:?}; rerun `cycledst split`",
            split.target_domain
        )));
    }
    Ok(())
}

fn gold_states_of(dialogues: &[Dialogue]) -> Result<GoldStates, CliError> {
    let mut map = GoldStates::new();
    for d in dialogues {
        let states = d.gold_states.as_ref().ok_or_else(|| {
            CliError::Data(format!("dialogue {:?} carries no gold states", d.id))
        })?;
        for (turn, state) in states.iter().enumerate() {
            map.insert((d.id.clone(), turn), state.clone());
        }
    }
    Ok(map)
}

fn predictions_map(preds: &[TurnPrediction]) -> Predictions {
    preds
        .iter()
        .map(|p| ((p.dialogue_id.clone(), p.turn_index), p.values.clone()))
        .collect()
}

fn read_pseudo_labels(config: &RunConfig) -> Result<Vec<TurnPrediction>, CliError> {
    let reader = require(&config.workdir().join(PSEUDO_LABELS), "selftrain")?;
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| CliError::Data(format!("bad pseudo-label file: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let pred: TurnPrediction = serde_json::from_str(&line)
            .map_err(|e| CliError::Data(format!("bad pseudo-label line: {e}")))?;
        out.push(pred);
    }
    Ok(out)
}

fn write_json_artifact<T: Serialize>(
    config: &RunConfig,
    name: &str,
    command: &str,
    value: &T,
    extra: BTreeMap<&str, Value>,
) -> Result<(), CliError> {
    let path = config.workdir().join(name);
    let mut writer = create(&path)?;
    serde_json::to_writer_pretty(&mut writer, value)
        .map_err(|e| CliError::Data(format!("cannot encode {name}: {e}")))?;
    writeln!(writer).map_err(|e| CliError::Data(e.to_string()))?;
    writer.flush().map_err(|e| CliError::Data(e.to_string()))?;
    write_meta(&path, command, &config.hash(), config.seed, extra)
}

pub fn cmd_ingest(config: &RunConfig, args: &IngestArgs) -> Result<(), CliError> {
    let raw_train = args
        .train
        .clone()
        .or_else(|| config.paths.raw_train.clone())
        .ok_or_else(|| {
            CliError::Usage("no raw training corpus; pass --train or set paths.raw_train".into())
        })?;
    let format: RawFormat = args
        .format
        .as_deref()
        .unwrap_or(&config.paths.format)
        .parse()
        .map_err(CliError::Usage)?;
    let schema_path = args
        .schema
        .clone()
        .or_else(|| config.paths.schema.clone())
        .ok_or_else(|| {
            CliError::Usage("no slot schema; pass --schema or set paths.schema".into())
        })?;
    let schema_file = File::open(&schema_path).map_err(|e| {
        CliError::Data(format!("cannot read schema {}: {e}", schema_path.display()))
    })?;
    let schema = SlotSchema::from_reader(BufReader::new(schema_file))?;

    let open_raw = |path: &Path| {
        File::open(path)
            .map(BufReader::new)
            .map_err(|e| CliError::Data(format!("cannot read corpus {}: {e}", path.display())))
    };
    let train = ingest(open_raw(&raw_train)?, format, &schema)?;

    let hash = config.hash();
    let schema_out = config.workdir().join(SCHEMA);
    let mut writer = create(&schema_out)?;
    schema.to_writer(&mut writer)?;
    writer.flush().map_err(|e| CliError::Data(e.to_string()))?;
    write_meta(&schema_out, "ingest", &hash, config.seed, BTreeMap::new())?;

    let train_out = config.workdir().join(CORPUS_TRAIN);
    let mut writer = create(&train_out)?;
    write_normalized(&mut writer, &train)?;
    writer.flush().map_err(|e| CliError::Data(e.to_string()))?;
    write_meta(&train_out, "ingest", &hash, config.seed, BTreeMap::new())?;

    let raw_test = args.test.clone().or_else(|| config.paths.raw_test.clone());
    let test_count = match raw_test {
        Some(path) => {
            let test = ingest(open_raw(&path)?, format, &schema)?;
            let test_out = config.workdir().join(CORPUS_TEST);
            let mut writer = create(&test_out)?;
            write_normalized(&mut writer, &test)?;
            writer.flush().map_err(|e| CliError::Data(e.to_string()))?;
            write_meta(&test_out, "ingest", &hash, config.seed, BTreeMap::new())?;
            test.len()
        }
        None => {
            log::warn!("no raw test corpus given; `split` will refuse to run without one");
            0
        }
    };
    println!(
        "ingested {} train and {} test dialogues into {}",
        train.len(),
        test_count,
        config.workdir().display()
    );
    Ok(())
}

pub fn cmd_split(config: &RunConfig) -> Result<(), CliError> {
    let target = normalize_value(&config.target_domain);
    let schema = load_schema(config)?;
    let train = load_corpus(config, CORPUS_TRAIN, "ingest")?;
    let test = load_corpus(config, CORPUS_TEST, "ingest (with a test corpus)")?;
    let split = leave_one_out(&train, &test, &target)?;
    let seen = classify_seen(&schema, &target)?;
    write_json_artifact(config, SPLIT, "split", &split, BTreeMap::new())?;
    write_json_artifact(config, SEEN, "split", &seen, BTreeMap::new())?;
    println!(
        "split target={target}: {} source, {} unlabeled pool, {} test dialogues",
        split.source_train.len(),
        split.target_unlabeled.len(),
        split.target_test.len()
    );
    Ok(())
}

pub fn cmd_joint(config: &RunConfig) -> Result<(), CliError> {
    let schema = load_schema(config)?;
    let train = load_corpus(config, CORPUS_TRAIN, "ingest")?;
    let split = load_split(config)?;
    ensure_target(&split, &normalize_value(&config.target_domain))?;
    let source = select_ids(&train, &split.source_train);
    if source.is_empty() {
        return Err(CliError::Data(
            "the source side of the split is empty; nothing to export".into(),
        ));
    }
    let hash = config.hash();
    let manifest =
        cycledst::jointtrain::build(&source, &schema, config.seed, format!("joint:{hash}"))?;
    let path = config.workdir().join(JOINT);
    manifest.write_to(&path)?;
    write_meta(&path, "joint", &hash, config.seed, BTreeMap::new())?;
    println!(
        "joint manifest: {} main + {} aux samples from {} source dialogues",
        manifest.counts.main,
        manifest.counts.aux,
        source.len()
    );
    Ok(())
}

pub fn cmd_selftrain(config: &RunConfig) -> Result<(), CliError> {
    let target = normalize_value(&config.target_domain);
    let schema = load_schema(config)?;
    let train = load_corpus(config, CORPUS_TRAIN, "ingest")?;
    let split = load_split(config)?;
    ensure_target(&split, &target)?;
    let pool_labeled = select_ids(&train, &split.target_unlabeled);
    if pool_labeled.is_empty() {
        return Err(CliError::Data(format!(
            "no unlabeled pool for target {target:?}; check `cycledst split`"
        )));
    }

    let labeled_mode = config.selftrain.stop_mode == StopMode::Labeled;
    let (test_dialogues, test_gold) = if labeled_mode {
        let test = load_corpus(config, CORPUS_TEST, "ingest (with a test corpus)")?;
        let dialogues = select_ids(&test, &split.target_test);
        if dialogues.is_empty() {
            return Err(CliError::Data(
                "labeled stop mode needs a target test set; check the split".into(),
            ));
        }
        let gold = gold_states_of(&dialogues)?;
        (dialogues, gold)
    } else {
        (Vec::new(), GoldStates::new())
    };

    // The backend plays the model. Oracle variants take their own copy of
    // every dialogue they may be asked about, before the pool is sealed.
    let mut oracle_source = pool_labeled.clone();
    oracle_source.extend(test_dialogues.iter().cloned());
    let backend = build_backend(config, &oracle_source, &schema)?;

    let (pool, store) = seal(pool_labeled);

    let mut loop_config = LoopConfig::new(config.selftrain.base_model.clone());
    loop_config.max_rounds = config.selftrain.max_rounds;
    loop_config.stop_mode = config.selftrain.stop_mode;
    loop_config.stop_margin = config.selftrain.stop_margin;
    loop_config.granularity = config.selftrain.granularity;
    loop_config.export_aux = config.selftrain.export_aux;
    loop_config.epochs = config.selftrain.epochs;

    std::fs::create_dir_all(config.workdir())
        .map_err(|e| CliError::Data(format!("cannot create workdir: {e}")))?;

    let mut hook = |_model: &str| -> Result<f64, String> {
        let preds = generate_states(backend.as_ref(), &test_dialogues, &schema, &target)
            .map_err(|e| e.to_string())?;
        let report = evaluate(&predictions_map(&preds), &test_gold, &schema, &target)
            .map_err(|e| e.to_string())?;
        Ok(report.jga * 100.0)
    };
    let hook_opt: Option<&mut EvalHook> = if labeled_mode { Some(&mut hook) } else { None };

    let hash = config.hash();
    let reports = match run_loop(
        backend.as_ref(),
        &pool,
        &schema,
        &target,
        &loop_config,
        config.workdir(),
        hook_opt,
    ) {
        Ok(reports) => reports,
        Err(e) => {
            // keep what finished so a partial run is still inspectable
            if let SelfTrainError::Aborted { completed, .. } = &e {
                if !completed.is_empty() {
                    let path = config.workdir().join(ROUNDS);
                    let mut writer = create(&path)?;
                    write_round_reports(&mut writer, completed)
                        .map_err(|x| CliError::Data(x.to_string()))?;
                    writer.flush().map_err(|x| CliError::Data(x.to_string()))?;
                    write_meta(&path, "selftrain", &hash, config.seed, BTreeMap::new())?;
                }
            }
            return Err(classify_selftrain(&e));
        }
    };

    // Materialize the final pseudo labels with cycle annotations. The loop
    // consumes its per-round predictions, so regenerate once with the
    // final model; deterministic backends reproduce the last round bit for
    // bit, and the pool stays sealed throughout.
    let preds = generate_states(backend.as_ref(), &pool, &schema, &target)
        .map_err(|e| classify_selftrain(&e))?;
    let preds = cycle_check(backend.as_ref(), &pool, &schema, preds)
        .map_err(|e| classify_selftrain(&e))?;
    let selection = select(&preds, loop_config.granularity, SelectionPolicy::AllConsistent);

    let gold_reads = store.total_reads();
    let extra = BTreeMap::from([
        ("gold_reads", Value::from(gold_reads)),
        ("rounds", Value::from(reports.len())),
    ]);

    let rounds_path = config.workdir().join(ROUNDS);
    let mut writer = create(&rounds_path)?;
    write_round_reports(&mut writer, &reports).map_err(|e| CliError::Data(e.to_string()))?;
    writer.flush().map_err(|e| CliError::Data(e.to_string()))?;
    write_meta(&rounds_path, "selftrain", &hash, config.seed, extra.clone())?;

    let pseudo_path = config.workdir().join(PSEUDO_LABELS);
    let mut writer = create(&pseudo_path)?;
    for pred in &preds {
        let line = serde_json::to_string(pred)
            .map_err(|e| CliError::Data(format!("cannot encode pseudo label: {e}")))?;
        writeln!(writer, "{line}").map_err(|e| CliError::Data(e.to_string()))?;
    }
    writer.flush().map_err(|e| CliError::Data(e.to_string()))?;
    write_meta(&pseudo_path, "selftrain", &hash, config.seed, extra.clone())?;

    write_json_artifact(config, SELECTION, "selftrain", &selection, extra)?;

    let final_model = reports.last().map(|r| r.model_id.as_str()).unwrap_or("-");
    println!(
        "self-training: {} rounds, selected {} of {} turns, final model {}, gold reads {}",
        reports.len(),
        selection.stats.selected_count,
        selection.stats.selected_count + selection.stats.rejected_count,
        final_model,
        gold_reads
    );
    Ok(())
}

pub fn cmd_eval(config: &RunConfig, args: &EvalArgs) -> Result<(), CliError> {
    let target = normalize_value(&config.target_domain);
    let schema = load_schema(config)?;
    let hash = config.hash();

    let (predictions, gold) = match &args.predictions {
        Some(path) => {
            let file = File::open(path).map_err(|e| {
                CliError::Data(format!("cannot read predictions {}: {e}", path.display()))
            })?;
            let predictions = read_predictions(BufReader::new(file))?;
            // gold may live in either portion; collect what exists and
            // demand exactly the predicted keys
            let mut gold_all = GoldStates::new();
            for name in [CORPUS_TRAIN, CORPUS_TEST] {
                if config.workdir().join(name).exists() {
                    let dialogues = load_corpus(config, name, "ingest")?;
                    for d in &dialogues {
                        if let Some(states) = &d.gold_states {
                            for (turn, state) in states.iter().enumerate() {
                                gold_all.insert((d.id.clone(), turn), state.clone());
                            }
                        }
                    }
                }
            }
            let mut gold = GoldStates::new();
            for key in predictions.keys() {
                let state = gold_all.get(key).ok_or_else(|| {
                    CliError::Data(format!(
                        "no gold state for dialogue {:?} turn {}; was it ingested?",
                        key.0, key.1
                    ))
                })?;
                gold.insert(key.clone(), state.clone());
            }
            (predictions, gold)
        }
        None => {
            let split = load_split(config)?;
            ensure_target(&split, &target)?;
            let test = load_corpus(config, CORPUS_TEST, "ingest (with a test corpus)")?;
            let test_dialogues = select_ids(&test, &split.target_test);
            if test_dialogues.is_empty() {
                return Err(CliError::Data(
                    "target test set is empty; check `cycledst split`".into(),
                ));
            }
            let backend = build_backend(config, &test_dialogues, &schema)?;
            let preds = generate_states(backend.as_ref(), &test_dialogues, &schema, &target)
                .map_err(|e| classify_selftrain(&e))?;
            let predictions = predictions_map(&preds);
            let gold = gold_states_of(&test_dialogues)?;
            let path = config.workdir().join(PREDICTIONS);
            let mut writer = create(&path)?;
            write_predictions(&mut writer, &predictions)?;
            writer.flush().map_err(|e| CliError::Data(e.to_string()))?;
            write_meta(&path, "eval", &hash, config.seed, BTreeMap::new())?;
            (predictions, gold)
        }
    };

    let report = evaluate(&predictions, &gold, &schema, &target)?;
    write_json_artifact(config, METRICS, "eval", &report, BTreeMap::new())?;

    let seen_map = classify_seen(&schema, &target)?;
    let csv_path = config.workdir().join(PER_SLOT);
    let mut writer = create(&csv_path)?;
    report.write_per_slot_csv(&mut writer, &seen_map)?;
    writer.flush().map_err(|e| CliError::Data(e.to_string()))?;
    write_meta(&csv_path, "eval", &hash, config.seed, BTreeMap::new())?;

    match report.aga {
        Some(aga) => println!(
            "jga={:.4} aga={:.4} over {} turns",
            report.jga, aga, report.turn_count
        ),
        None => println!("jga={:.4} over {} turns", report.jga, report.turn_count),
    }
    Ok(())
}

/// Oracular selection plus the margin report artifact.
#[derive(Debug, Serialize)]
struct OracleArtifact {
    selection: SelectionReport,
    /// Fraction of predictions exactly matching gold, per subset. The
    /// oracular subset is 1.0 by construction whenever it is non-empty.
    precision_oracular: Option<f64>,
    precision_cycle_selected: Option<f64>,
    precision_unfiltered: Option<f64>,
}

pub fn cmd_oracle(config: &RunConfig, args: &OracleArgs) -> Result<(), CliError> {
    let target = normalize_value(&config.target_domain);
    let schema = load_schema(config)?;
    let train = load_corpus(config, CORPUS_TRAIN, "ingest")?;
    let split = load_split(config)?;
    ensure_target(&split, &target)?;
    let preds = read_pseudo_labels(config)?;
    let pool_labeled = select_ids(&train, &split.target_unlabeled);
    let (_pool, store) = seal(pool_labeled);

    let selection = oracular_select(&preds, &store, &schema, &target)?;
    let all_keys: BTreeSet<TurnKey> = preds
        .iter()
        .map(|p| (p.dialogue_id.clone(), p.turn_index))
        .collect();
    let precision_oracular =
        pseudo_label_precision(&preds, &selection.selected, &store, &schema, &target)?;
    let precision_unfiltered =
        pseudo_label_precision(&preds, &all_keys, &store, &schema, &target)?;
    let selection_path = config.workdir().join(SELECTION);
    let precision_cycle_selected = if selection_path.exists() {
        let reader = require(&selection_path, "selftrain")?;
        let cycle: SelectionReport = serde_json::from_reader(reader)
            .map_err(|e| CliError::Data(format!("bad {SELECTION}: {e}")))?;
        pseudo_label_precision(&preds, &cycle.selected, &store, &schema, &target)?
    } else {
        None
    };

    let kept = selection.selected.len();
    let artifact = OracleArtifact {
        selection,
        precision_oracular,
        precision_cycle_selected,
        precision_unfiltered,
    };
    write_json_artifact(config, ORACLE_SELECTION, "oracle", &artifact, BTreeMap::new())?;

    let jga_joint = match args.jga_joint {
        Some(value) => value,
        None => {
            let reader = require(&config.workdir().join(METRICS), "eval (or pass --jga-joint)")?;
            let metrics: Value = serde_json::from_reader(reader)
                .map_err(|e| CliError::Data(format!("bad {METRICS}: {e}")))?;
            metrics
                .get("jga")
                .and_then(Value::as_f64)
                .ok_or_else(|| CliError::Data(format!("{METRICS} carries no jga field")))?
        }
    };
    // Without a fine-tuning run on the oracular labels the true upper
    // bound is unknown; 1.0 is the conservative ceiling unless measured.
    let jga_upper = args.jga_upper.unwrap_or(1.0);
    let margin = MarginReport::new(target.clone(), jga_joint, jga_upper)?;

    let hash = config.hash();
    let margin_path = config.workdir().join(MARGIN_JSON);
    let writer = create(&margin_path)?;
    margin.to_writer(writer)?;
    write_meta(&margin_path, "oracle", &hash, config.seed, BTreeMap::new())?;
    let csv_path = config.workdir().join(MARGIN_CSV);
    let mut writer = create(&csv_path)?;
    margin.write_csv(&mut writer)?;
    writer.flush().map_err(|e| CliError::Data(e.to_string()))?;
    write_meta(&csv_path, "oracle", &hash, config.seed, BTreeMap::new())?;

    println!(
        "oracular selection kept {kept} of {} turns; margin = {:.4} (upper {:.4} vs joint {:.4})",
        all_keys.len(),
        margin.margin,
        jga_upper,
        jga_joint
    );
    Ok(())
}

/// Spec'd interchange shape for discovered slot types.
#[derive(Debug, Serialize)]
struct CandidateOut<'a> {
    name: &'a str,
    frequency: usize,
    examples: &'a [TurnKey],
    #[serde(skip_serializing_if = "Option::is_none")]
    matched_schema_slot: Option<&'a String>,
}

pub fn cmd_discover(config: &RunConfig, args: &DiscoverArgs) -> Result<(), CliError> {
    let target = normalize_value(&config.target_domain);
    let schema = load_schema(config)?;
    let train = load_corpus(config, CORPUS_TRAIN, "ingest")?;
    let split = load_split(config)?;
    ensure_target(&split, &target)?;
    let pool_labeled = select_ids(&train, &split.target_unlabeled);
    if pool_labeled.is_empty() {
        return Err(CliError::Data(format!(
            "no unlabeled pool for target {target:?}; check `cycledst split`"
        )));
    }
    let mode = match &args.probe_mode {
        Some(text) => crate::parse_keyword::<ProbeMode>("probe mode", text)?,
        None => config.slotgen.probe_mode,
    };
    let backend = build_backend(config, &pool_labeled, &schema)?;
    let probes = match mode {
        ProbeMode::Random => {
            let (pool, _store) = seal(pool_labeled);
            let strategy = MaskStrategy {
                span_length: config.slotgen.span_length,
                num_masks: config.slotgen.num_masks,
                seed: config.seed,
            };
            build_random_probes(&pool, strategy)?
        }
        ProbeMode::Value => build_value_probes(&pool_labeled)?,
    };
    let candidates = discover(backend.as_ref(), &probes, &schema)?;
    let merge_config = MergeConfig {
        min_frequency: config.slotgen.min_frequency,
        similarity_threshold: config.slotgen.similarity_threshold,
    };
    let (merged, stats) = merge_and_select(&candidates, merge_config);

    let out: Vec<CandidateOut> = merged
        .iter()
        .map(|c| CandidateOut {
            name: &c.name,
            frequency: c.frequency,
            examples: &c.example_refs,
            matched_schema_slot: c.matched_schema_slot.as_ref(),
        })
        .collect();
    let extra = BTreeMap::from([("probes", Value::from(probes.len()))]);
    write_json_artifact(config, CANDIDATES, "discover", &out, extra.clone())?;
    write_json_artifact(config, MERGE_STATS, "discover", &stats, extra)?;

    println!(
        "discovered {} candidate slot types from {} probes, {} after merging",
        stats.total_before,
        probes.len(),
        stats.total_after
    );
    Ok(())
}

pub fn cmd_icl(config: &RunConfig, args: &IclArgs) -> Result<(), CliError> {
    let target = normalize_value(&config.target_domain);
    let split = load_split(config)?;
    ensure_target(&split, &target)?;
    let kind = match &args.pool {
        Some(text) => crate::parse_keyword::<PoolKind>("pool", text)?,
        None => config.icl.pool,
    };
    let k = args.k.unwrap_or(config.icl.k);

    let train = load_corpus(config, CORPUS_TRAIN, "ingest")?;
    let pool = match kind {
        PoolKind::Source => {
            let source = select_ids(&train, &split.source_train);
            let mut out = Vec::new();
            for d in &source {
                let gold = d.gold_states.as_ref().ok_or_else(|| {
                    CliError::Data(format!("dialogue {:?} carries no gold states", d.id))
                })?;
                let domain = d.domains.iter().next().cloned().unwrap_or_default();
                for turn in &d.turns {
                    let history = serialize_history(d, turn.index)?;
                    let state: BTreeMap<String, String> = gold[turn.index]
                        .iter()
                        .map(|(slot, v)| (slot.clone(), v.primary().to_string()))
                        .collect();
                    out.push(cycledst::backend::IclExample {
                        domain: domain.clone(),
                        history,
                        state_line: serialize_state(&state),
                    });
                }
            }
            out
        }
        PoolKind::SelectedTarget => {
            let pool_dialogues = select_ids(&train, &split.target_unlabeled);
            let index = by_id(&pool_dialogues);
            let preds = read_pseudo_labels(config)?;
            let reader = require(&config.workdir().join(SELECTION), "selftrain")?;
            let cycle: SelectionReport = serde_json::from_reader(reader)
                .map_err(|e| CliError::Data(format!("bad {SELECTION}: {e}")))?;
            let mut out = Vec::new();
            for p in &preds {
                let key = (p.dialogue_id.clone(), p.turn_index);
                if !cycle.selected.contains(&key) || p.values.is_empty() {
                    continue;
                }
                let Some(d) = index.get(p.dialogue_id.as_str()) else { continue };
                let history = serialize_history(d, p.turn_index)?;
                out.push(cycledst::backend::IclExample {
                    domain: target.clone(),
                    history,
                    state_line: serialize_state(&p.values),
                });
            }
            out
        }
    };

    let query = match &args.query {
        Some(q) => q.clone(),
        None => {
            let test = load_corpus(config, CORPUS_TEST, "ingest (with a test corpus)")?;
            let test_dialogues = select_ids(&test, &split.target_test);
            let dialogue = match &args.dialogue {
                Some(id) => test_dialogues.iter().find(|d| &d.id == id).ok_or_else(|| {
                    CliError::Data(format!("dialogue {id:?} is not in the target test set"))
                })?,
                None => test_dialogues.first().ok_or_else(|| {
                    CliError::Data("target test set is empty; check `cycledst split`".into())
                })?,
            };
            let turn = args.turn.unwrap_or(dialogue.turns.len().saturating_sub(1));
            serialize_history(dialogue, turn)?
        }
    };

    let prompt =
        build_icl_prompt(&config.icl.instructions, &pool, &query, k, kind, &target, config.seed)?;
    write_json_artifact(config, ICL_JSON, "icl", &prompt, BTreeMap::new())?;
    let txt_path = config.workdir().join(ICL_TXT);
    let mut writer = create(&txt_path)?;
    writer
        .write_all(prompt.render().as_bytes())
        .and_then(|_| writer.flush())
        .map_err(|e| CliError::Data(e.to_string()))?;
    write_meta(&txt_path, "icl", &config.hash(), config.seed, BTreeMap::new())?;

    println!(
        "icl prompt: {} of {} pool examples, pool={:?}",
        prompt.examples.len(),
        pool.len(),
        kind
    );
    Ok(())
}

pub fn cmd_synth(config: &RunConfig, args: &SynthArgs) -> Result<(), CliError> {
    let out = args.out.clone().unwrap_or_else(|| config.paths.workdir.clone());
    let per_domain = args.dialogues_per_domain.unwrap_or(12);
    if per_domain == 0 {
        return Err(CliError::Usage("--dialogues-per-domain must be at least 1".into()));
    }
    let train = synth_generate(&SynthConfig::new(config.seed, per_domain, "train"));
    let test = synth_generate(&SynthConfig::new(
        config.seed + 1,
        (per_domain / 3).max(2),
        "test",
    ));
    let schema = synth_schema();
    let hash = config.hash();

    let write_raw = |name: &str, dialogues: &[Dialogue]| -> Result<(), CliError> {
        let path = out.join(name);
        let mut writer = create(&path)?;
        serde_json::to_writer_pretty(&mut writer, &to_raw_multiwoz(dialogues))
            .map_err(|e| CliError::Data(format!("cannot encode {name}: {e}")))?;
        writeln!(writer).map_err(|e| CliError::Data(e.to_string()))?;
        writer.flush().map_err(|e| CliError::Data(e.to_string()))?;
        write_meta(&path, "synth", &hash, config.seed, BTreeMap::new())
    };
    write_raw("raw_train.json", &train)?;
    write_raw("raw_test.json", &test)?;

    let schema_path = out.join("schema.json");
    let mut writer = create(&schema_path)?;
    schema.to_writer(&mut writer)?;
    writer.flush().map_err(|e| CliError::Data(e.to_string()))?;
    write_meta(&schema_path, "synth", &hash, config.seed, BTreeMap::new())?;

    let mut run = config.clone();
    run.paths.raw_train = Some(out.join("raw_train.json"));
    run.paths.raw_test = Some(out.join("raw_test.json"));
    run.paths.format = "multiwoz".into();
    run.paths.schema = Some(out.join("schema.json"));
    let toml_text = toml::to_string_pretty(&run)
        .map_err(|e| CliError::Data(format!("cannot encode starter config: {e}")))?;
    let config_path = out.join("synth_run.toml");
    let mut writer = create(&config_path)?;
    writer
        .write_all(toml_text.as_bytes())
        .and_then(|_| writer.flush())
        .map_err(|e| CliError::Data(e.to_string()))?;

    println!(
        "synthetic corpus: {} train and {} test dialogues in {}; next: cycledst --config {} ingest",
        train.len(),
        test.len(),
        out.display(),
        config_path.display()
    );
    Ok(())
}
