//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Select criteria by number: `cargo test --test acceptance -- 4 8`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use perceiver_triage::attention::per_visit_attention;
use perceiver_triage::data::{
    prepare, synth_generate, write_corpus_csv, PrepareOptions, PreparedData, RawVisit, SignalModality, SynthSpec,
};
use perceiver_triage::metrics::{f1, per_class_auc, roc_auc, Averaging, DecisionRule, MetricsReport, StratifiedDiff};
use perceiver_triage::model::{
    check_model_gradients, forward_batch, random_inputs, Modality, ModelConfig, ModelInput, ModelWeights, TabularMode,
};
use perceiver_triage::train::{
    accuracy, load_checkpoint, predict_inputs, save_checkpoint, split, train, ArtifactHashes, Checkpoint,
    CheckpointMeta, TrainConfig, FORMAT_VERSION,
};

const SEEDS: [u64; 3] = [0, 1, 2];
const FEVER: &str = "R50";

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Key = (u64, Modality, TabularMode);

struct Trained {
    weights: ModelWeights,
    config: ModelConfig,
}

/// Synthetic corpus, per-seed splits and a cache of trained models.
struct Lab {
    raw: Vec<RawVisit>,
    truth: BTreeMap<String, SignalModality>,
    data: HashMap<u64, PreparedData>,
    models: HashMap<Key, Trained>,
    reports: Vec<MetricsReport>,
}

impl Lab {
    fn new() -> Self {
        let corpus = synth_generate(&SynthSpec::default()).expect("synthetic corpus");
        Self {
            raw: corpus.visits,
            truth: corpus.truth,
            data: HashMap::new(),
            models: HashMap::new(),
            reports: Vec::new(),
        }
    }

    fn data(&mut self, seed: u64) -> &PreparedData {
        let raw = &self.raw;
        let k = self.truth.len();
        self.data.entry(seed).or_insert_with(|| {
            let (tr, te) = split(raw.len(), 0.8, seed).expect("split");
            let opts = PrepareOptions {
                top_k: k,
                ..Default::default()
            };
            prepare(raw, &tr, &te, &opts).expect("prepare")
        })
    }

    fn model(&mut self, seed: u64, modality: Modality, mode: TabularMode) -> &Trained {
        let key = (seed, modality, mode);
        if !self.models.contains_key(&key) {
            let data = self.data(seed);
            let config = ModelConfig {
                vocab_size: data.vocab.len(),
                num_classes: data.labels.len(),
                modality,
                tabular_mode: mode,
                ..ModelConfig::default()
            };
            let start = Instant::now();
            let (weights, history) = train(&data.train, &config, &TrainConfig::default(), seed).expect("train");
            eprintln!(
                "  trained {modality} / {} seed {seed}: final loss {:.4} in {:.0} s",
                mode.as_str(),
                history.final_loss(),
                start.elapsed().as_secs_f64()
            );
            self.models.insert(key, Trained { weights, config });
        }
        &self.models[&key]
    }

    /// Test-set probabilities, with tabular columns optionally shuffled per visit.
    fn probs(
        &mut self,
        seed: u64,
        modality: Modality,
        mode: TabularMode,
        shuffle: bool,
    ) -> (Vec<Vec<f64>>, Vec<usize>) {
        self.model(seed, modality, mode);
        let data = &self.data[&seed];
        let m = &self.models[&(seed, modality, mode)];
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let inputs: Vec<ModelInput> = data
            .test
            .iter()
            .map(|v| {
                let input = ModelInput::from_visit(v);
                if shuffle {
                    let mut perm: Vec<usize> = (0..input.tabular.len()).collect();
                    perm.shuffle(&mut rng);
                    input.permute_tabular(&perm).expect("permutation")
                } else {
                    input
                }
            })
            .collect();
        let probs = predict_inputs(&inputs, &m.weights, &m.config).expect("predict");
        let labels = data.test.iter().map(|v| v.label).collect();
        (probs, labels)
    }

    fn report(&mut self, probs: &[Vec<f64>], labels: &[usize]) -> MetricsReport {
        let r = MetricsReport::compute(probs, labels, DecisionRule::Argmax).expect("metrics");
        self.reports.push(r.clone());
        r
    }

    /// Mean per-class AUC over seeds, keyed by category.
    fn class_auc(&mut self, modality: Modality) -> BTreeMap<String, f64> {
        let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for seed in SEEDS {
            let (probs, labels) = self.probs(seed, modality, TabularMode::FeatureId, false);
            self.report(&probs, &labels);
            let aucs = per_class_auc(&probs, &labels).expect("auc");
            let space = self.data[&seed].labels.labels().to_vec();
            for (label, auc) in space.into_iter().zip(aucs) {
                acc.entry(label).or_default().extend(auc);
            }
        }
        acc.into_iter()
            .map(|(l, v)| (l, v.iter().sum::<f64>() / v.len() as f64))
            .collect()
    }
}

fn c1_ablate_pipeline(_: &mut Lab) -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let spec = SynthSpec {
        classes: SynthSpec::default().classes.into_iter().step_by(3).collect(),
        samples_per_class: 25,
        ..SynthSpec::default()
    };
    let corpus = synth_generate(&spec).expect("corpus");
    let data_dir = dir.path().join("mimic");
    write_corpus_csv(&corpus, &data_dir).expect("csv");
    let out = dir.path().join("out");
    let args: Vec<String> = [
        "perceiver-triage",
        "ablate",
        "--data",
        data_dir.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--runs",
        "2",
        "--epochs",
        "2",
        "--top-k",
        "4",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let code = perceiver_triage::cli::run(args);
    if code != 0 {
        return outcome(false, format!("ablate exited with {code}"));
    }
    let mut problems = Vec::new();
    check_report(&out, "table1.json", &mut problems, |v| {
        let rows = v["rows"].as_array().map(Vec::len).unwrap_or(0);
        (rows == 3, format!("{rows} tabular-mode rows"))
    });
    check_report(&out, "table2.json", &mut problems, |v| {
        let rows = v["rows"].as_array().cloned().unwrap_or_default();
        let ok = rows.len() == 3
            && rows.iter().all(|r| {
                r["runs"].as_u64() == Some(2)
                    && ["micro_auc", "macro_auc", "micro_f1", "macro_f1", "accuracy"]
                        .iter()
                        .all(|m| r["mean"][m].is_number() && r["std"][m].is_number())
            });
        (ok, format!("{} modality rows with mean and std", rows.len()))
    });
    check_report(&out, "table3.json", &mut problems, |v| {
        let rows = v["rows"].as_array().map(Vec::len).unwrap_or(0);
        (rows == 4, format!("{rows} per-category rows"))
    });
    for f in ["manifest.json", "table1.txt", "table2.txt", "table3.txt"] {
        if !out.join(f).exists() {
            problems.push(format!("missing {f}"));
        }
    }
    if problems.is_empty() {
        outcome(
            true,
            "ablate on a MIMIC-shaped fixture emitted Table 1/2/3 reports and a manifest",
        )
    } else {
        outcome(false, problems.join("; "))
    }
}

fn check_report(
    dir: &Path,
    file: &str,
    problems: &mut Vec<String>,
    check: impl Fn(&serde_json::Value) -> (bool, String),
) {
    match std::fs::read_to_string(dir.join(file)).map(|s| serde_json::from_str::<serde_json::Value>(&s)) {
        Ok(Ok(v)) => {
            let (ok, what) = check(&v);
            if !ok {
                problems.push(format!("{file}: {what}"));
            }
        }
        _ => problems.push(format!("{file} missing or not JSON")),
    }
}

fn c2_gradients(_: &mut Lab) -> Outcome {
    let mut worst = 0.0f64;
    let mut failing = Vec::new();
    for mode in [TabularMode::ValueOnly, TabularMode::FeatureId, TabularMode::FourierPe] {
        let config = ModelConfig {
            tabular_mode: mode,
            ..ModelConfig::tiny()
        };
        let weights = ModelWeights::init(&config, 7).expect("init");
        let (inputs, labels) = random_inputs(&config, 2, 8);
        let report = check_model_gradients(&weights, &inputs, &labels, &config, 1e-4).expect("gradcheck");
        worst = worst.max(report.max_rel_err());
        failing.extend(
            report
                .failing(1e-4)
                .iter()
                .map(|p| format!("{}:{}", mode.as_str(), p.name)),
        );
    }
    outcome(
        failing.is_empty(),
        format!("max relative error {worst:.2e} over all parameters of 3 tabular modes; failing {failing:?}"),
    )
}

fn c3_permutation(_: &mut Lab) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut details = Vec::new();
    let mut pass = true;
    for mode in [TabularMode::ValueOnly, TabularMode::FeatureId, TabularMode::FourierPe] {
        let config = ModelConfig {
            tabular_mode: mode,
            vocab_size: 50,
            num_classes: 10,
            ..ModelConfig::default()
        };
        let weights = ModelWeights::init(&config, 3).expect("init");
        let (inputs, _) = random_inputs(&config, 20, 4);
        let base = forward_batch(&inputs, &weights, &config, false)
            .expect("forward")
            .logits;
        let trials = if mode.is_permutation_invariant() { 100 } else { 20 };
        let mut max_diff = 0.0f64;
        for _ in 0..trials {
            let mut perm: Vec<usize> = (0..8).collect();
            perm.shuffle(&mut rng);
            let permuted: Vec<ModelInput> = inputs.iter().map(|i| i.permute_tabular(&perm).unwrap()).collect();
            let logits = forward_batch(&permuted, &weights, &config, false)
                .expect("forward")
                .logits;
            max_diff = max_diff.max(logits.max_abs_diff(&base));
        }
        let ok = if mode.is_permutation_invariant() {
            max_diff <= 1e-6
        } else {
            max_diff > 1e-3
        };
        pass &= ok;
        details.push(format!("{} max |dlogit| {max_diff:.2e}", mode.as_str()));
    }
    outcome(pass, details.join(", "))
}

fn c4_table3(lab: &mut Lab) -> Outcome {
    let tv = lab.class_auc(Modality::TextVitals);
    let text = lab.class_auc(Modality::Text);
    let labels: Vec<String> = lab.truth.keys().cloned().collect();
    let a: Vec<Option<f64>> = labels.iter().map(|l| tv.get(l).copied()).collect();
    let b: Vec<Option<f64>> = labels.iter().map(|l| text.get(l).copied()).collect();
    let diff = StratifiedDiff::from_class_aucs("text+vitals", "text", &labels, &a, &b).expect("diff");
    eprintln!("{}", diff.table(labels.len()));
    let half = labels.len() / 2;
    let mut problems = Vec::new();
    for row in &diff.rows {
        let d = row.diff.unwrap_or(f64::NAN);
        match lab.truth[&row.label] {
            SignalModality::Vitals => {
                if !(d >= 2.0) {
                    problems.push(format!("planted {} gains {d:+.2}", row.label));
                }
                if diff.rank_of(&row.label).unwrap() >= half {
                    problems.push(format!("planted {} ranks in the bottom half", row.label));
                }
            }
            SignalModality::Text => {
                if !(d.abs() <= 1.0) {
                    problems.push(format!("text-only {} moves {d:+.2}", row.label));
                }
            }
        }
    }
    let planted: Vec<f64> = diff
        .rows
        .iter()
        .filter(|r| lab.truth[&r.label] == SignalModality::Vitals)
        .filter_map(|r| r.diff)
        .collect();
    let min_gain = planted.iter().copied().fold(f64::INFINITY, f64::min);
    if problems.is_empty() {
        outcome(
            true,
            format!("smallest planted-class gain {min_gain:+.2} points; text-only classes within 1 point"),
        )
    } else {
        outcome(false, problems.join("; "))
    }
}

fn c5_table1(lab: &mut Lab) -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    for mode in [TabularMode::ValueOnly, TabularMode::FeatureId, TabularMode::FourierPe] {
        let mut loss = 0.0;
        for seed in SEEDS {
            let (p, l) = lab.probs(seed, Modality::TextVitals, mode, false);
            let (ps, ls) = lab.probs(seed, Modality::TextVitals, mode, true);
            let clean = lab.report(&p, &l).micro_auc;
            let shuffled = lab.report(&ps, &ls).micro_auc;
            loss += (clean - shuffled) / SEEDS.len() as f64;
        }
        let ok = if mode.is_permutation_invariant() {
            loss <= 0.5
        } else {
            loss >= 1.0
        };
        pass &= ok;
        details.push(format!("{} loses {loss:.2}", mode.as_str()));
    }
    outcome(
        pass,
        format!("micro AUC under column shuffling: {}", details.join(", ")),
    )
}

fn c6_table2(lab: &mut Lab) -> Outcome {
    let mut pass = true;
    let mut details = Vec::new();
    for seed in SEEDS {
        let mut auc = BTreeMap::new();
        for modality in Modality::ALL {
            let (p, l) = lab.probs(seed, modality, TabularMode::FeatureId, false);
            auc.insert(modality.as_str(), lab.report(&p, &l).micro_auc);
        }
        let tv = auc["text+vitals"];
        pass &= tv > auc["text"] && tv > auc["vitals"];
        details.push(format!(
            "seed {seed}: {tv:.2} vs text {:.2}, vitals {:.2}",
            auc["text"], auc["vitals"]
        ));
    }
    outcome(pass, details.join("; "))
}

fn brute_auc(scores: &[Vec<f64>], labels: &[usize], averaging: Averaging) -> f64 {
    let k = scores[0].len();
    let count = |pos: &[f64], neg: &[f64]| -> (f64, f64) {
        let mut wins = 0.0;
        for &p in pos {
            for &n in neg {
                wins += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        (wins, (pos.len() * neg.len()) as f64)
    };
    let split = |c: usize| -> (Vec<f64>, Vec<f64>) {
        let pos = scores
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == c)
            .map(|(s, _)| s[c])
            .collect();
        let neg = scores
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l != c)
            .map(|(s, _)| s[c])
            .collect();
        (pos, neg)
    };
    match averaging {
        Averaging::Macro => {
            let aucs: Vec<f64> = (0..k)
                .map(split)
                .filter(|(p, n)| !p.is_empty() && !n.is_empty())
                .map(|(p, n)| {
                    let (w, t) = count(&p, &n);
                    100.0 * w / t
                })
                .collect();
            aucs.iter().sum::<f64>() / aucs.len() as f64
        }
        Averaging::Micro => {
            let (mut pos, mut neg) = (Vec::new(), Vec::new());
            for c in 0..k {
                let (p, n) = split(c);
                pos.extend(p);
                neg.extend(n);
            }
            let (w, t) = count(&pos, &neg);
            100.0 * w / t
        }
    }
}

fn c7_metrics(lab: &mut Lab) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(10..=200);
        let k = rng.random_range(2..=6);
        let labels: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..k).map(|_| (rng.random_range(0..20) as f64) / 20.0).collect())
            .collect();
        for avg in [Averaging::Macro, Averaging::Micro] {
            let ours = roc_auc(&scores, &labels, avg).expect("auc");
            worst = worst.max((ours - brute_auc(&scores, &labels, avg)).abs());
        }
    }
    let identity_failures = lab.reports.iter().filter(|r| r.check_identities().is_err()).count();
    let f = f1(74.0, 50.0);
    let pass = worst <= 1e-9 && identity_failures == 0 && (f - 59.7).abs() < 0.05;
    outcome(
        pass,
        format!(
            "AUC vs brute force max diff {worst:.1e}; identities held on {}/{} evaluations; F1(74, 50) = {f:.2}",
            lab.reports.len() - identity_failures,
            lab.reports.len()
        ),
    )
}

fn c8_attention(lab: &mut Lab) -> Outcome {
    let mut hits = 0usize;
    let mut total = 0usize;
    let mut worst_row = 0.0f64;
    let mut ratios = Vec::new();
    for seed in SEEDS {
        lab.model(seed, Modality::TextVitals, TabularMode::FeatureId);
        let data = &lab.data[&seed];
        let m = &lab.models[&(seed, Modality::TextVitals, TabularMode::FeatureId)];
        let Some(fever) = data.labels.index_of(FEVER) else {
            return outcome(false, format!("{FEVER} missing from the label space of seed {seed}"));
        };
        let block = m.config.depth - 1;
        for v in data.test.iter().filter(|v| v.label == fever) {
            let ex = per_visit_attention(v, &m.weights, &m.config, block, Some(&data.vocab), "").expect("attention");
            for row in &ex.matrix {
                worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            }
            let tab = ex.tabular_mass();
            let mean = tab.iter().map(|(_, x)| x).sum::<f64>() / tab.len() as f64;
            let temp = tab
                .iter()
                .find(|(l, _)| l == "temperature")
                .map(|(_, x)| *x)
                .unwrap_or(0.0);
            let ratio = temp / mean;
            ratios.push(ratio);
            total += 1;
            if ratio >= 1.5 {
                hits += 1;
            }
        }
    }
    ratios.sort_by(f64::total_cmp);
    let median = ratios.get(ratios.len() / 2).copied().unwrap_or(f64::NAN);
    let share = hits as f64 / total.max(1) as f64;
    outcome(
        share >= 0.8 && worst_row <= 1e-6,
        format!(
            "temperature >= 1.5x mean tabular mass in {hits}/{total} fever visits ({:.1}%), median ratio {median:.2}; \
             max row-sum error {worst_row:.1e}",
            100.0 * share
        ),
    )
}

fn c9_determinism(_: &mut Lab) -> Outcome {
    let spec = SynthSpec {
        classes: SynthSpec::default().classes.into_iter().step_by(2).collect(),
        samples_per_class: 40,
        ..SynthSpec::default()
    };
    let corpus = synth_generate(&spec).expect("corpus");
    let (tr, te) = split(corpus.visits.len(), 0.8, 5).expect("split");
    let opts = PrepareOptions {
        top_k: 5,
        ..Default::default()
    };
    let data = prepare(&corpus.visits, &tr, &te, &opts).expect("prepare");
    let config = ModelConfig {
        vocab_size: data.vocab.len(),
        num_classes: data.labels.len(),
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        epochs: 3,
        ..Default::default()
    };
    let ckpt = |seed| {
        let (weights, history) = train(&data.train, &config, &tc, seed).expect("train");
        let c = Checkpoint {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                model: config.clone(),
                train: tc.clone(),
                seed,
                epochs: tc.epochs,
                final_loss: history.final_loss(),
                hashes: ArtifactHashes::of(&data.vocab, &data.labels, &data.stats).expect("hashes"),
            },
            weights,
        };
        (c, history)
    };
    let (a, ha) = ckpt(11);
    let (b, hb) = ckpt(11);
    let same_run = ha == hb && a.to_bytes().unwrap() == b.to_bytes().unwrap();

    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&a, &path).expect("save");
    let back = load_checkpoint(&path).expect("load");
    let inputs: Vec<ModelInput> = data.test.iter().map(ModelInput::from_visit).collect();
    let la = forward_batch(&inputs, &a.weights, &config, false).unwrap().logits;
    let lb = forward_batch(&inputs, &back.weights, &back.meta.model, false)
        .unwrap()
        .logits;
    let round_trip = la.data() == lb.data();

    let mut small = data.train.clone();
    small.truncate(32);
    let overfit_tc = TrainConfig {
        epochs: 200,
        ..Default::default()
    };
    let (w, _) = train(&small, &config, &overfit_tc, 1).expect("train");
    let acc = accuracy(&small, &w, &config).expect("accuracy");
    outcome(
        same_run && round_trip && acc == 100.0,
        format!("identical seeds bit-identical: {same_run}; checkpoint round trip bit-identical: {round_trip}; overfit accuracy {acc:.1}%"),
    )
}

type Criterion = fn(&mut Lab) -> Outcome;

fn main() {
    let criteria: [(u32, &str, Criterion, Option<Duration>); 9] = [
        (1, "ablate pipeline on MIMIC-shaped CSVs", c1_ablate_pipeline, None),
        (2, "gradient integrity", c2_gradients, Some(Duration::from_secs(60))),
        (
            3,
            "tabular permutation invariance",
            c3_permutation,
            Some(Duration::from_secs(30)),
        ),
        (
            4,
            "modality gain per category",
            c4_table3,
            Some(Duration::from_secs(15 * 60)),
        ),
        (5, "column shuffling by tabular mode", c5_table1, None),
        (6, "multimodal beats single modalities", c6_table2, None),
        (7, "metric oracles", c7_metrics, None),
        (8, "fever attention on temperature", c8_attention, None),
        (9, "determinism and persistence", c9_determinism, None),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut lab = Lab::new();
    let mut failures = 0;
    for (n, name, run, budget) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let mut out = run(&mut lab);
        let elapsed = start.elapsed();
        if let Some(limit) = budget {
            if elapsed > limit {
                out.pass = false;
                out.detail = format!("{} (over the {} s budget)", out.detail, limit.as_secs());
            }
        }
        if !out.pass {
            failures += 1;
        }
        println!(
            "{} criterion {n}: {name}: {} [{:.1} s]",
            if out.pass { "PASS" } else { "FAIL" },
            out.detail,
            elapsed.as_secs_f64()
        );
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
