use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{to_sorted_json, write_json, Overrides, RunManifest, Settings};
use super::report::{table1, table2, table3};
use super::{Cli, Command, ModelArgs, Switch};
use crate::attention::{mean_cross_attention, modality_share, per_visit_attention, HeatmapExport};
use crate::data::{
    encode_visit, normalize_vitals, prepare, read_corpus_dir, synth_generate, tokenize, truncate_icd, write_corpus_csv,
    EncodedVisit, LabelSpace, RawVisit, VitalStats, Vocab, CORPUS_FILES,
};
use crate::error::{Error, Result};
use crate::metrics::{format_table, MetricsReport};
use crate::model::{check_model_gradients, random_inputs, Modality, ModelConfig, ModelWeights, TabularMode};
use crate::train::{
    load_checkpoint, predict_proba, repeated_runs, save_checkpoint, split, train, AggregateReport, ArtifactHashes,
    Checkpoint, CheckpointMeta, FORMAT_VERSION,
};

const CHECKPOINT_FILE: &str = "model.ckpt";
const VOCAB_FILE: &str = "vocab.json";
const LABELS_FILE: &str = "labels.json";
const STATS_FILE: &str = "stats.json";
const SPLIT_FILE: &str = "split.json";

pub(super) fn dispatch(cli: Cli, argv: &[String]) -> Result<i32> {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let jobs = cli.global.jobs.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("--jobs: {e}")))?;
    let settings = |model: &ModelArgs, runs: Option<usize>, samples: Option<usize>| {
        let flags = Overrides {
            seed: cli.global.seed,
            modality: model.modality,
            tabular_mode: model.tabular_mode,
            epochs: model.epochs,
            runs,
            top_k: model.top_k,
            samples_per_class: samples,
            decision_rule: model.rule,
            text_pe: model.text_pe.map(|t| t == Switch::On),
            weight_sharing: model.weight_sharing.then_some(true),
        };
        Settings::resolve(cli.global.config.as_deref(), &flags)
    };
    let none = ModelArgs::default();
    pool.install(|| match &cli.command {
        Command::Synth { out, samples_per_class } => synth(&settings(&none, None, *samples_per_class)?, out, argv),
        Command::Train { data, out, model } => train_cmd(&settings(model, None, None)?, data, out, argv),
        Command::Eval {
            checkpoint,
            data,
            artifacts,
            all,
            rule,
            out,
        } => {
            let s = settings(
                &ModelArgs {
                    rule: *rule,
                    ..ModelArgs::default()
                },
                None,
                None,
            )?;
            eval(&s, checkpoint, data, artifacts.as_deref(), *all, out.as_deref(), argv)
        }
        Command::Ablate { data, out, runs, model } => {
            let s = settings(model, *runs, None)?;
            let modality_fixed = model.modality.is_some();
            ablate(&s, data, out, modality_fixed, argv)
        }
        Command::Attention {
            checkpoint,
            data,
            out,
            artifacts,
            block,
            visit_id,
        } => {
            let s = settings(&none, None, None)?;
            attention(
                &s,
                checkpoint,
                data,
                out,
                artifacts.as_deref(),
                *block,
                visit_id.as_deref(),
                argv,
            )
        }
        Command::Gradcheck { eps, tol, out } => {
            gradcheck(&settings(&none, None, None)?, *eps, *tol, out.as_deref(), argv)
        }
        Command::Repro {
            out,
            runs,
            samples_per_class,
            model,
        } => {
            let s = settings(model, *runs, *samples_per_class)?;
            let corpus = out.join("corpus");
            synth(&s, &corpus, argv)?;
            ablate(&s, &corpus, &out.join("reports"), model.modality.is_some(), argv)
        }
    })
}

fn corpus_inputs(manifest: &mut RunManifest, data: &Path) -> Result<()> {
    for f in CORPUS_FILES {
        let path = data.join(f);
        if !path.exists() {
            return Err(Error::Data(format!("{} is missing", path.display())));
        }
        manifest.input(&path)?;
    }
    Ok(())
}

fn synth(s: &Settings, out: &Path, argv: &[String]) -> Result<i32> {
    let mut manifest = RunManifest::new("synth", argv, s, vec![s.synth.seed]);
    for f in CORPUS_FILES.iter().chain(&["truth.json"]) {
        manifest.output(out.join(f));
    }
    manifest.write(out)?;
    let corpus = synth_generate(&s.synth)?;
    write_corpus_csv(&corpus, out)?;
    println!(
        "wrote {} synthetic visits over {} categories to {}",
        corpus.visits.len(),
        corpus.truth.len(),
        out.display()
    );
    Ok(0)
}

#[derive(Serialize, Deserialize)]
struct SplitIds {
    seed: u64,
    train: Vec<String>,
    test: Vec<String>,
}

fn load_corpus(s: &Settings, data: &Path) -> Result<Vec<RawVisit>> {
    let (raw, report) = read_corpus_dir(data, &s.data.bounds)?;
    log::info!("{}", serde_json::to_string(&report)?);
    if raw.is_empty() {
        return Err(Error::Data(format!("{} holds no usable visits", data.display())));
    }
    Ok(raw)
}

fn train_cmd(s: &Settings, data: &Path, out: &Path, argv: &[String]) -> Result<i32> {
    let seed = s.train.base_seed;
    let mut manifest = RunManifest::new("train", argv, s, vec![seed]);
    corpus_inputs(&mut manifest, data)?;
    for f in [
        CHECKPOINT_FILE,
        VOCAB_FILE,
        LABELS_FILE,
        STATS_FILE,
        SPLIT_FILE,
        "history.json",
        "metrics.json",
    ] {
        manifest.output(out.join(f));
    }
    manifest.write(out)?;

    let raw = load_corpus(s, data)?;
    let (train_idx, test_idx) = split(raw.len(), s.train.split_ratio, seed)?;
    let prepared = prepare(&raw, &train_idx, &test_idx, &s.data)?;
    let config = ModelConfig {
        vocab_size: prepared.vocab.len(),
        num_classes: prepared.labels.len(),
        ..s.model.clone()
    };
    let (weights, history) = train(&prepared.train, &config, &s.train, seed)?;
    let ckpt = Checkpoint {
        meta: CheckpointMeta {
            format_version: FORMAT_VERSION,
            model: config.clone(),
            train: s.train.clone(),
            seed,
            epochs: s.train.epochs,
            final_loss: history.final_loss(),
            hashes: ArtifactHashes::of(&prepared.vocab, &prepared.labels, &prepared.stats)?,
        },
        weights,
    };
    save_checkpoint(&ckpt, &out.join(CHECKPOINT_FILE))?;
    std::fs::write(out.join(VOCAB_FILE), prepared.vocab.to_json()?)?;
    std::fs::write(out.join(LABELS_FILE), prepared.labels.to_json()?)?;
    std::fs::write(out.join(STATS_FILE), prepared.stats.to_json()?)?;
    let ids = |idx: &[usize]| idx.iter().map(|&i| raw[i].stay_id.clone()).collect();
    write_json(
        &out.join(SPLIT_FILE),
        &SplitIds {
            seed,
            train: ids(&train_idx),
            test: ids(&test_idx),
        },
    )?;
    write_json(&out.join("history.json"), &history)?;

    let probs = predict_proba(&prepared.test, &ckpt.weights, &config)?;
    let labels: Vec<usize> = prepared.test.iter().map(|v| v.label).collect();
    let metrics = MetricsReport::compute(&probs, &labels, s.decision_rule)?;
    write_json(&out.join("metrics.json"), &metrics)?;
    println!("final training loss {:.4}", history.final_loss());
    println!("{}", metrics_table(&metrics));
    Ok(0)
}

fn metrics_table(m: &MetricsReport) -> String {
    let rows: Vec<Vec<String>> = m
        .scalars()
        .iter()
        .map(|(name, v)| vec![name.to_string(), format!("{v:.2}")])
        .collect();
    format_table(&["metric", "value"], &rows)
}

struct Artifacts {
    vocab: Vocab,
    labels: LabelSpace,
    stats: VitalStats,
}

fn load_artifacts(ckpt: &Checkpoint, checkpoint: &Path, dir: Option<&Path>) -> Result<Artifacts> {
    let dir = dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
    let read = |f: &str| std::fs::read_to_string(dir.join(f));
    let a = Artifacts {
        vocab: Vocab::from_json(&read(VOCAB_FILE)?)?,
        labels: LabelSpace::from_json(&read(LABELS_FILE)?)?,
        stats: VitalStats::from_json(&read(STATS_FILE)?)?,
    };
    ckpt.meta
        .hashes
        .verify(&ArtifactHashes::of(&a.vocab, &a.labels, &a.stats)?)?;
    Ok(a)
}

fn eval(
    s: &Settings,
    checkpoint: &Path,
    data: &Path,
    artifacts: Option<&Path>,
    all: bool,
    out: Option<&Path>,
    argv: &[String],
) -> Result<i32> {
    let ckpt = load_checkpoint(checkpoint)?;
    if let Some(out) = out {
        let mut manifest = RunManifest::new("eval", argv, s, vec![ckpt.meta.seed]);
        manifest.input(checkpoint)?;
        corpus_inputs(&mut manifest, data)?;
        manifest.output(out.join("metrics.json"));
        manifest.write(out)?;
    }
    let art = load_artifacts(&ckpt, checkpoint, artifacts)?;
    let raw = load_corpus(s, data)?;
    let split_path = artifacts
        .map(Path::to_path_buf)
        .unwrap_or_else(|| checkpoint.with_file_name(SPLIT_FILE));
    let split_path = if split_path.is_dir() {
        split_path.join(SPLIT_FILE)
    } else {
        split_path
    };
    let keep: Option<HashSet<String>> = if all || !split_path.exists() {
        None
    } else {
        let ids: SplitIds = serde_json::from_str(&std::fs::read_to_string(&split_path)?)?;
        Some(ids.test.into_iter().collect())
    };
    let config = &ckpt.meta.model;
    let visits: Vec<EncodedVisit> = raw
        .iter()
        .filter(|v| keep.as_ref().is_none_or(|k| k.contains(&v.stay_id)))
        .filter_map(|v| encode_visit(v, &art.vocab, &art.labels, &art.stats, config.max_text_len))
        .collect();
    if visits.is_empty() {
        return Err(Error::Data(
            "no visits to evaluate inside the checkpoint's label space".into(),
        ));
    }
    let probs = predict_proba(&visits, &ckpt.weights, config)?;
    let labels: Vec<usize> = visits.iter().map(|v| v.label).collect();
    let metrics = MetricsReport::compute(&probs, &labels, s.decision_rule)?;
    metrics.check_identities()?;
    if let Some(out) = out {
        write_json(&out.join("metrics.json"), &metrics)?;
    }
    println!("{} visits", visits.len());
    println!("{}", metrics_table(&metrics));
    println!("{}", to_sorted_json(&metrics)?);
    Ok(0)
}

/// Category titles from the diagnosis file, when it carries an `icd_title` column.
fn category_titles(data: &Path) -> BTreeMap<String, String> {
    let mut titles = BTreeMap::new();
    let Ok(mut reader) = csv::Reader::from_path(data.join(CORPUS_FILES[2])) else {
        return titles;
    };
    let Ok(headers) = reader.headers().cloned() else {
        return titles;
    };
    let col = |name: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name));
    let (Some(code), Some(title)) = (col("icd_code"), col("icd_title")) else {
        return titles;
    };
    let version = col("icd_version");
    for record in reader.records().flatten() {
        if version.is_some_and(|v| record.get(v).map(str::trim) != Some("10")) {
            continue;
        }
        if let (Some(c), Some(t)) = (record.get(code), record.get(title)) {
            if let Ok(cat) = truncate_icd(c) {
                titles.entry(cat).or_insert_with(|| t.trim().to_string());
            }
        }
    }
    titles
}

fn ablate(s: &Settings, data: &Path, out: &Path, modality_fixed: bool, argv: &[String]) -> Result<i32> {
    let seeds: Vec<u64> = (0..s.train.num_runs as u64).map(|i| s.train.base_seed + i).collect();
    let mut manifest = RunManifest::new("ablate", argv, s, seeds);
    corpus_inputs(&mut manifest, data)?;
    for t in ["table1", "table2", "table3"] {
        manifest.output(out.join(format!("{t}.json")));
        manifest.output(out.join(format!("{t}.txt")));
    }
    manifest.write(out)?;
    if modality_fixed {
        log::warn!("--modality is ignored by ablate, which trains every modality");
    }

    let raw = load_corpus(s, data)?;
    let runs_dir = out.join("runs");
    std::fs::create_dir_all(&runs_dir)?;
    let mut cache: HashMap<(Modality, TabularMode), AggregateReport> = HashMap::new();
    let mut get = |modality: Modality, mode: TabularMode| -> Result<AggregateReport> {
        if let Some(r) = cache.get(&(modality, mode)) {
            return Ok(r.clone());
        }
        let model = ModelConfig {
            modality,
            tabular_mode: mode,
            ..s.model.clone()
        };
        log::info!("{modality} / {}: {} runs", mode.as_str(), s.train.num_runs);
        let report = repeated_runs(&raw, &s.data, &model, &s.train, s.decision_rule)?;
        let name = format!("{}_{}.json", modality.as_str().replace('+', "_"), mode.as_str());
        std::fs::write(runs_dir.join(name), report.to_json()?)?;
        cache.insert((modality, mode), report.clone());
        Ok(report)
    };

    let mode = s.model.tabular_mode;
    let by_modality: Vec<AggregateReport> = Modality::ALL.iter().map(|&m| get(m, mode)).collect::<Result<_>>()?;
    let by_mode: Vec<AggregateReport> = [TabularMode::ValueOnly, TabularMode::FeatureId, TabularMode::FourierPe]
        .iter()
        .map(|&t| get(Modality::TextVitals, t))
        .collect::<Result<_>>()?;

    let (t1, t1_text) = table1(&by_mode.iter().collect::<Vec<_>>());
    let (t2, t2_text) = table2(&by_modality.iter().collect::<Vec<_>>());
    let (t3, t3_text) = table3(&by_modality[0], &by_modality[1], &category_titles(data), 5)?;
    for (name, json, text) in [
        ("table1", to_sorted_json(&t1)?, t1_text),
        ("table2", to_sorted_json(&t2)?, t2_text),
        ("table3", to_sorted_json(&t3)?, t3_text),
    ] {
        std::fs::write(out.join(format!("{name}.json")), json)?;
        std::fs::write(out.join(format!("{name}.txt")), &text)?;
        println!("{text}");
    }
    Ok(0)
}

fn encode_for_attention(raw: &RawVisit, art: &Artifacts, max_len: usize) -> EncodedVisit {
    let (vitals, missing) = normalize_vitals(&raw.vitals, &art.stats);
    let label = truncate_icd(&raw.icd_code)
        .ok()
        .and_then(|c| art.labels.index_of(&c))
        .unwrap_or(0);
    EncodedVisit {
        id: raw.stay_id.clone(),
        token_ids: art.vocab.encode(&tokenize(&raw.chief_complaint), max_len),
        vitals,
        missing,
        label,
    }
}

#[allow(clippy::too_many_arguments)]
fn attention(
    s: &Settings,
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    artifacts: Option<&Path>,
    block: Option<usize>,
    visit_id: Option<&str>,
    argv: &[String],
) -> Result<i32> {
    let ckpt = load_checkpoint(checkpoint)?;
    let config = &ckpt.meta.model;
    let block = block.unwrap_or(config.depth - 1);
    let stem = match visit_id {
        Some(id) => format!("attention_{id}"),
        None => "attention_mean".to_string(),
    };
    let mut manifest = RunManifest::new("attention", argv, s, vec![ckpt.meta.seed]);
    manifest.input(checkpoint)?;
    corpus_inputs(&mut manifest, data)?;
    manifest.output(out.join(format!("{stem}.csv")));
    manifest.output(out.join(format!("{stem}.json")));
    manifest.write(out)?;

    let art = load_artifacts(&ckpt, checkpoint, artifacts)?;
    let raw = load_corpus(s, data)?;
    let hash = ckpt.hash()?;
    let export: HeatmapExport = match visit_id {
        Some(id) => {
            let v = raw
                .iter()
                .find(|v| v.stay_id == id)
                .ok_or_else(|| Error::Data(format!("no visit with stay_id `{id}`")))?;
            let visit = encode_for_attention(v, &art, config.max_text_len);
            per_visit_attention(&visit, &ckpt.weights, config, block, Some(&art.vocab), &hash)?
        }
        None => {
            let visits: Vec<EncodedVisit> = raw
                .iter()
                .map(|v| encode_for_attention(v, &art, config.max_text_len))
                .collect();
            mean_cross_attention(&visits, &ckpt.weights, config, block, &hash)?
        }
    };
    export.write(out, &stem)?;
    let (text, tab) = modality_share(&export);
    println!("block {block}: text share {text:.3}, tabular share {tab:.3}");
    let rows: Vec<Vec<String>> = export
        .tabular_mass()
        .into_iter()
        .map(|(l, m)| vec![l, format!("{m:.4}")])
        .collect();
    if !rows.is_empty() {
        println!("{}", format_table(&["feature", "mean column mass"], &rows));
    }
    Ok(0)
}

fn gradcheck(s: &Settings, eps: f64, tol: f64, out: Option<&Path>, argv: &[String]) -> Result<i32> {
    let seed = s.train.base_seed;
    if let Some(out) = out {
        let mut manifest = RunManifest::new("gradcheck", argv, s, vec![seed]);
        manifest.output(out.join("gradcheck.json"));
        manifest.write(out)?;
    }
    let mut reports = BTreeMap::new();
    let mut rows = Vec::new();
    let mut pass = true;
    for mode in [TabularMode::ValueOnly, TabularMode::FeatureId, TabularMode::FourierPe] {
        let config = ModelConfig {
            tabular_mode: mode,
            ..ModelConfig::tiny()
        };
        let weights = ModelWeights::init(&config, seed)?;
        let (inputs, labels) = random_inputs(&config, 2, seed.wrapping_add(1));
        let report = check_model_gradients(&weights, &inputs, &labels, &config, eps)?;
        pass &= report.passes(tol);
        for p in &report.params {
            rows.push(vec![
                mode.as_str().to_string(),
                p.name.clone(),
                p.entries.to_string(),
                format!("{:.2e}", p.max_rel_err),
                if p.max_rel_err <= tol { "ok" } else { "FAIL" }.to_string(),
            ]);
        }
        reports.insert(mode.as_str(), report);
    }
    println!(
        "{}",
        format_table(&["mode", "parameter", "entries", "max rel err", ""], &rows)
    );
    let worst = reports.values().map(|r| r.max_rel_err()).fold(0.0, f64::max);
    println!(
        "max relative error {worst:.2e} (tolerance {tol:.0e}): {}",
        if pass { "pass" } else { "FAIL" }
    );
    if let Some(out) = out {
        write_json(&out.join("gradcheck.json"), &reports)?;
    }
    Ok(if pass { 0 } else { 2 })
}
