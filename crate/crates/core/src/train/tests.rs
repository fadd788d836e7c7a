use super::*;
use crate::data::{prepare, synth_generate, PrepareOptions, PreparedData, SynthSpec};
use crate::metrics::DecisionRule;

fn spec(classes: &[usize], per_class: usize, seed: u64) -> SynthSpec {
    let base = SynthSpec::default();
    SynthSpec {
        classes: classes.iter().map(|&c| base.classes[c].clone()).collect(),
        samples_per_class: per_class,
        seed,
        ..base
    }
}

fn small_data(classes: &[usize], per_class: usize, seed: u64) -> PreparedData {
    let corpus = synth_generate(&spec(classes, per_class, seed)).unwrap();
    let n = corpus.visits.len();
    let (tr, te) = split(n, 0.8, seed).unwrap();
    let opts = PrepareOptions {
        top_k: classes.len(),
        ..Default::default()
    };
    prepare(&corpus.visits, &tr, &te, &opts).unwrap()
}

fn config_for(data: &PreparedData) -> ModelConfig {
    ModelConfig {
        vocab_size: data.vocab.len(),
        num_classes: data.labels.len(),
        ..ModelConfig::default()
    }
}

#[test]
fn cross_entropy_closed_forms() {
    let uniform = Tensor::zeros(&[50]);
    assert!((cross_entropy(&uniform, 7).unwrap() - 50f64.ln()).abs() < 1e-12);
    let mut margin = vec![0.0; 5];
    margin[2] = 20.0;
    let l = cross_entropy(&Tensor::vector(margin).unwrap(), 2).unwrap();
    assert!((0.0..1e-8).contains(&l));
    assert!(cross_entropy(&uniform, 50).is_err());
}

#[test]
fn split_sizes_and_determinism() {
    let (tr, te) = split(100, 0.8, 1).unwrap();
    assert_eq!((tr.len(), te.len()), (80, 20));
    let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
    all.sort();
    assert_eq!(all, (0..100).collect::<Vec<_>>());
    assert_eq!(split(100, 0.8, 1).unwrap(), (tr, te.clone()));
    for s in 0..5u64 {
        let mut a = split(100, 0.8, 2 * s + 10).unwrap().1;
        let mut b = split(100, 0.8, 2 * s + 11).unwrap().1;
        a.sort();
        b.sort();
        assert_ne!(a, b);
    }
    assert!(split(1, 0.8, 0).is_err());
    assert!(split(3, 0.1, 0).is_err());
    assert!(split(10, 1.0, 0).is_err());
}

#[test]
fn loss_descends_on_small_corpus() {
    let data = small_data(&[0, 1, 5, 6], 50, 4);
    let config = config_for(&data);
    let tc = TrainConfig {
        epochs: 50,
        ..Default::default()
    };
    let (_, history) = train(&data.train, &config, &tc, 0).unwrap();
    let l = &history.epoch_loss;
    assert_eq!(l.len(), 50);
    assert!(l[49] < l[0], "{l:?}");
    let ma: Vec<f64> = l.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    for w in ma.windows(2) {
        assert!(w[1] <= w[0], "moving average rose: {ma:?}");
    }
}

#[test]
fn memorizes_32_visits() {
    let mut data = small_data(&[0, 1, 5, 6], 20, 5);
    data.train.truncate(32);
    let config = config_for(&data);
    let tc = TrainConfig {
        epochs: 200,
        ..Default::default()
    };
    let (weights, _) = train(&data.train, &config, &tc, 1).unwrap();
    assert_eq!(accuracy(&data.train, &weights, &config).unwrap(), 100.0);
}

#[test]
fn same_seed_gives_identical_history_and_weights() {
    let data = small_data(&[0, 5], 20, 6);
    let config = config_for(&data);
    let tc = TrainConfig {
        epochs: 3,
        ..Default::default()
    };
    let (wa, ha) = train(&data.train, &config, &tc, 9).unwrap();
    let (wb, hb) = train(&data.train, &config, &tc, 9).unwrap();
    assert_eq!(ha, hb);
    assert_eq!(wa, wb);
    let (wc, _) = train(&data.train, &config, &tc, 10).unwrap();
    assert_ne!(wa, wc);
}

#[test]
fn ablated_modality_receives_no_gradient() {
    let data = small_data(&[0, 5], 10, 7);
    let inputs: Vec<ModelInput> = data.train.iter().map(ModelInput::from_visit).collect();
    let labels: Vec<usize> = data.train.iter().map(|v| v.label).collect();
    for (modality, silent) in [(Modality::Text, true), (Modality::Vitals, false)] {
        let config = ModelConfig {
            modality,
            missing_indicator: true,
            ..config_for(&data)
        };
        let weights = ModelWeights::init(&config, 0).unwrap();
        let (_, grads) = batch_gradients(&weights, &inputs, &labels, &config).unwrap();
        let names = if silent {
            weights.tabular_param_names()
        } else {
            weights.text_param_names()
        };
        assert!(!names.is_empty());
        for name in names {
            assert!(grads[&name].iter().all(|&g| g == 0.0), "{modality}: {name}");
        }
        let live = if silent { "embed.token" } else { "embed.feature_id" };
        assert!(grads[live].iter().any(|&g| g != 0.0), "{modality}: {live}");
    }
}

#[test]
fn value_only_direction_stays_frozen() {
    let data = small_data(&[0, 5], 10, 8);
    let config = ModelConfig {
        tabular_mode: TabularMode::ValueOnly,
        ..config_for(&data)
    };
    let tc = TrainConfig {
        epochs: 2,
        ..Default::default()
    };
    let (weights, _) = train(&data.train, &config, &tc, 2).unwrap();
    let init = ModelWeights::init(&config, 2).unwrap();
    assert_eq!(
        weights.get("embed.feature_value").unwrap(),
        init.get("embed.feature_value").unwrap()
    );
    assert_ne!(weights.get("embed.token").unwrap(), init.get("embed.token").unwrap());
}

fn checkpoint_of(data: &PreparedData, config: &ModelConfig) -> Checkpoint {
    let tc = TrainConfig {
        epochs: 1,
        ..Default::default()
    };
    let (weights, history) = train(&data.train, config, &tc, 3).unwrap();
    Checkpoint {
        meta: CheckpointMeta {
            format_version: FORMAT_VERSION,
            model: config.clone(),
            train: tc,
            seed: 3,
            epochs: 1,
            final_loss: history.final_loss(),
            hashes: ArtifactHashes::of(&data.vocab, &data.labels, &data.stats).unwrap(),
        },
        weights,
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let data = small_data(&[0, 5], 10, 9);
    let config = config_for(&data);
    let ckpt = checkpoint_of(&data, &config);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.prcv");
    save_checkpoint(&ckpt, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);
    let a = predict_proba(&data.test, &ckpt.weights, &config).unwrap();
    let b = predict_proba(&data.test, &back.weights, &back.meta.model).unwrap();
    assert_eq!(a, b);
    assert_eq!(back.to_bytes().unwrap(), ckpt.to_bytes().unwrap());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let data = small_data(&[0, 5], 10, 10);
    let config = config_for(&data);
    let ckpt = checkpoint_of(&data, &config);
    let bytes = ckpt.to_bytes().unwrap();
    for cut in [2, 10, bytes.len() / 2, bytes.len() - 3] {
        match Checkpoint::from_bytes(&bytes[..cut]) {
            Err(Error::Checkpoint(_)) => {}
            other => panic!("cut at {cut}: {other:?}"),
        }
    }
    let mut wrong_version = bytes.clone();
    wrong_version[4] = 9;
    assert!(matches!(Checkpoint::from_bytes(&wrong_version), Err(Error::Checkpoint(m)) if m.contains("version")));
    let mut wrong_magic = bytes;
    wrong_magic[0] = b'X';
    assert!(Checkpoint::from_bytes(&wrong_magic).is_err());
}

#[test]
fn foreign_vocabulary_is_refused() {
    let data = small_data(&[0, 5], 10, 11);
    let other = small_data(&[0, 6], 10, 11);
    let ckpt = checkpoint_of(&data, &config_for(&data));
    let supplied = ArtifactHashes::of(&other.vocab, &data.labels, &data.stats).unwrap();
    match ckpt.meta.hashes.verify(&supplied) {
        Err(Error::HashMismatch { what, .. }) => assert_eq!(what, "vocab"),
        other => panic!("{other:?}"),
    }
    assert!(ckpt.meta.hashes.verify(&ckpt.meta.hashes).is_ok());
}

#[test]
fn aggregate_of_one_run_has_zero_std() {
    let corpus = synth_generate(&spec(&[0, 5], 15, 12)).unwrap();
    let opts = PrepareOptions {
        top_k: 2,
        ..Default::default()
    };
    let tc = TrainConfig {
        epochs: 2,
        num_runs: 1,
        ..Default::default()
    };
    let report = repeated_runs(
        &corpus.visits,
        &opts,
        &ModelConfig::default(),
        &tc,
        DecisionRule::Argmax,
    )
    .unwrap();
    assert_eq!(report.runs.len(), 1);
    assert!(report.std.values().all(|&s| s == 0.0));
    assert_eq!(report.mean["micro_auc"], report.runs[0].metrics.micro_auc);
}

#[test]
fn sample_std_convention() {
    let (m, s) = mean_and_std(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(m, 2.5);
    assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    assert_eq!(mean_and_std(&[7.0]), (7.0, 0.0));
}
