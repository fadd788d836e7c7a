use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::EncodedVisit;
use crate::tensor::Tensor;

fn visit(tokens: &[usize], vitals: &[f64]) -> EncodedVisit {
    EncodedVisit {
        id: "v".into(),
        token_ids: tokens.to_vec(),
        vitals: vitals.to_vec(),
        missing: vec![false; vitals.len()],
        label: 0,
    }
}

fn random_vitals(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..8).map(|_| rng.random_range(-2.0..2.0)).collect()
}

#[test]
fn fourier_center_position_is_zero_coordinate() {
    let pe = fourier_position_encoding(&[2], 3, 5).unwrap();
    assert_eq!(pe.shape(), &[1, 7]);
    let row = pe.row(0);
    for b in 0..3 {
        assert!(row[b].abs() < 1e-15);
        assert!((row[3 + b] - 1.0).abs() < 1e-15);
    }
    assert_eq!(row[6], 0.0);
}

#[test]
fn fourier_single_resolution_is_degenerate() {
    let pe = fourier_position_encoding(&[0], 2, 1).unwrap();
    assert_eq!(pe.row(0), &[0.0, 0.0, 1.0, 1.0, 0.0]);
    assert!(fourier_position_encoding(&[1], 2, 1).is_err());
}

#[test]
fn fourier_last_of_eight_matches_direct_formula() {
    let pe = fourier_position_encoding(&[7], 4, 8).unwrap();
    let x = 1.0;
    let freqs = [1.0, 2.0, 3.0, 4.0];
    for (b, f) in freqs.iter().enumerate() {
        assert!((pe.row(0)[b] - (f * PI * x).sin()).abs() < 1e-12);
        assert!((pe.row(0)[4 + b] - (f * PI * x).cos()).abs() < 1e-12);
    }
    assert_eq!(pe.row(0)[8], 1.0);
    assert!(fourier_position_encoding(&[8], 4, 8).is_err());
}

#[test]
fn empty_text_is_fully_masked() {
    let config = ModelConfig::tiny();
    let weights = ModelWeights::init(&config, 0).unwrap();
    let (rows, mask) = embed_text(&[], &weights, &config).unwrap();
    assert_eq!(rows.shape(), &[4, 4]);
    assert!(rows.data().iter().all(|&v| v == 0.0));
    assert_eq!(mask, vec![false; 4]);
}

#[test]
fn repeated_token_differs_only_by_position() {
    let config = ModelConfig::tiny();
    let weights = ModelWeights::init(&config, 0).unwrap();
    let (rows, mask) = embed_text(&[5, 6, 7, 5], &weights, &config).unwrap();
    assert_eq!(mask, vec![true; 4]);
    let pe = fourier_position_encoding(&[0, 3], 1, 4).unwrap();
    for c in 0..4 {
        let pe0 = pe.row(0).get(c).copied().unwrap_or(0.0);
        let pe3 = pe.row(1).get(c).copied().unwrap_or(0.0);
        let diff = rows.get2(3, c) - rows.get2(0, c);
        assert!((diff - (pe3 - pe0)).abs() < 1e-12);
    }
}

#[test]
fn five_real_tokens_of_eight() {
    let config = ModelConfig {
        vocab_size: 10,
        ..ModelConfig::default()
    };
    let weights = ModelWeights::init(&config, 0).unwrap();
    let (_, mask) = embed_text(&[2, 3, 4, 5, 6], &weights, &config).unwrap();
    assert_eq!(mask, vec![true, true, true, true, true, false, false, false]);
    assert!(embed_text(&[1; 9], &weights, &config).is_err());
    assert!(embed_text(&[10], &weights, &config).is_err());
}

#[test]
fn tabular_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let values = random_vitals(&mut rng);
    let missing = vec![false; 8];
    for mode in [TabularMode::ValueOnly, TabularMode::FeatureId, TabularMode::FourierPe] {
        let config = ModelConfig {
            tabular_mode: mode,
            ..ModelConfig::tiny()
        };
        let weights = ModelWeights::init(&config, 2).unwrap();
        let rows = encode_tabular(&values, &missing, &weights, &config).unwrap();
        assert_eq!(rows.shape(), &[8, 4]);
        let mut swapped = values.clone();
        swapped.swap(0, 1);
        let rows_sw = encode_tabular(&swapped, &missing, &weights, &config).unwrap();
        match mode {
            TabularMode::ValueOnly => {
                // Rows are value times one shared direction.
                let dir = weights.get("embed.feature_value").unwrap().row(0).to_vec();
                for j in 0..8 {
                    for c in 0..4 {
                        assert!((rows.get2(j, c) - values[j] * dir[c]).abs() < 1e-12);
                    }
                }
                assert_eq!(rows_sw.row(0), rows.row(1));
            }
            TabularMode::FeatureId => {
                let id = weights.get("embed.feature_id").unwrap();
                let dir = weights.get("embed.feature_value").unwrap();
                for c in 0..4 {
                    let want = values[3] * dir.get2(3, c) + id.get2(3, c);
                    assert!((rows.get2(3, c) - want).abs() < 1e-12);
                }
            }
            TabularMode::FourierPe => {
                assert_ne!(rows_sw.row(0), rows.row(1));
            }
        }
    }
    let config = ModelConfig::tiny();
    let weights = ModelWeights::init(&config, 2).unwrap();
    assert!(encode_tabular(&values[..7], &missing[..7], &weights, &config).is_err());
}

#[test]
fn identical_keys_give_uniform_attention_over_valid_columns() {
    let config = ModelConfig::tiny();
    let weights = ModelWeights::init(&config, 3).unwrap();
    let latent = Tensor::new(vec![2, 4], vec![0.1, -0.2, 0.3, 0.5, 1.0, 0.0, -1.0, 0.2]).unwrap();
    let inputs = Tensor::new(vec![5, 4], [0.3, -0.1, 0.7, 0.2].repeat(5)).unwrap();
    let mask = vec![true, true, false, true, true];
    let (out, rec) = cross_attention_block(&latent, &inputs, &mask, &weights, 0, &config).unwrap();
    assert_eq!(out.shape(), &[2, 4]);
    for r in 0..2 {
        for (c, &valid) in mask.iter().enumerate() {
            let want = if valid { 0.25 } else { 0.0 };
            assert!((rec.matrix.get2(r, c) - want).abs() < 1e-12);
        }
    }
    assert!(cross_attention_block(&latent, &inputs, &[false; 5], &weights, 0, &config).is_err());
}

#[test]
fn latent_block_with_zero_weights_is_identity() {
    let config = ModelConfig {
        num_latents: 1,
        ..ModelConfig::tiny()
    };
    let mut weights = ModelWeights::init(&config, 4).unwrap();
    let latent = Tensor::new(vec![1, 4], vec![0.4, -1.0, 2.0, 0.0]).unwrap();
    let out = latent_transformer_block(&latent, &weights, 0, &config).unwrap();
    assert_eq!(out.shape(), &[1, 4]);
    for (name, t) in weights.iter_mut() {
        if name.starts_with("blocks.0.self_attn.out") || name.starts_with("blocks.0.mlp.fc2") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let out = latent_transformer_block(&latent, &weights, 0, &config).unwrap();
    assert_eq!(out, latent);
}

#[test]
fn forward_shapes_and_attention_rows() {
    let config = ModelConfig::tiny();
    let weights = ModelWeights::init(&config, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let v = visit(&[3, 4], &random_vitals(&mut rng));
    let (logits, records) = forward(&v, &weights, &config).unwrap();
    assert_eq!(logits.shape(), &[3]);
    assert_eq!(records.len(), 2);
    for (r, rec) in records.iter().enumerate() {
        assert_eq!(rec.block_index, r);
        assert_eq!(rec.matrix.shape(), &[2, 12]);
        assert_eq!(rec.column_labels[0], "T0");
        assert_eq!(rec.column_labels[4], "temperature");
        for row in 0..2 {
            let s: f64 = rec.matrix.row(row).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert_eq!(rec.matrix.get2(row, 2), 0.0);
            assert_eq!(rec.matrix.get2(row, 3), 0.0);
        }
    }
}

#[test]
fn batch_rows_equal_single_visit_runs() {
    let config = ModelConfig::tiny();
    let weights = ModelWeights::init(&config, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inputs: Vec<ModelInput> = [vec![1, 2, 3], vec![], vec![7]]
        .iter()
        .map(|t| ModelInput::from_visit(&visit(t, &random_vitals(&mut rng))))
        .collect();
    let batch = forward_batch(&inputs, &weights, &config, false).unwrap();
    for (b, input) in inputs.iter().enumerate() {
        let single = forward_batch(std::slice::from_ref(input), &weights, &config, false).unwrap();
        for k in 0..3 {
            assert!((batch.logits.get2(b, k) - single.logits.get2(0, k)).abs() < 1e-12);
        }
    }
}

#[test]
fn parameter_count_matches_closed_form() {
    let configs = [
        ModelConfig::tiny(),
        ModelConfig {
            vocab_size: 300,
            ..ModelConfig::default()
        },
        ModelConfig {
            weight_sharing: true,
            missing_indicator: true,
            ..ModelConfig::tiny()
        },
    ];
    for config in configs {
        let weights = ModelWeights::init(&config, 0).unwrap();
        assert_eq!(weights.param_count(), config.param_count());
    }
}

#[test]
fn weight_sharing_reuses_second_block() {
    let config = ModelConfig {
        weight_sharing: true,
        depth: 4,
        ..ModelConfig::tiny()
    };
    assert_eq!(config.distinct_blocks(), 2);
    assert_eq!(
        (0..4).map(|r| config.block_for_repeat(r)).collect::<Vec<_>>(),
        vec![0, 1, 1, 1]
    );
    let weights = ModelWeights::init(&config, 0).unwrap();
    assert!(weights.get("blocks.2.cross.q").is_err());
    let v = visit(&[2], &[0.0; 8]);
    assert_eq!(forward(&v, &weights, &config).unwrap().1.len(), 4);
}

#[test]
fn same_seed_same_weights() {
    let config = ModelConfig::tiny();
    assert_eq!(
        ModelWeights::init(&config, 9).unwrap(),
        ModelWeights::init(&config, 9).unwrap()
    );
    assert_ne!(
        ModelWeights::init(&config, 9).unwrap(),
        ModelWeights::init(&config, 10).unwrap()
    );
}

fn max_logit_change_under_permutations(mode: TabularMode, trials: usize) -> (f64, f64) {
    let config = ModelConfig {
        tabular_mode: mode,
        ..ModelConfig::tiny()
    };
    let weights = ModelWeights::init(&config, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let base = ModelInput::from_visit(&visit(&[4, 5], &random_vitals(&mut rng)));
    let reference = forward_batch(std::slice::from_ref(&base), &weights, &config, true).unwrap();
    let mut worst_logit: f64 = 0.0;
    let mut worst_attn: f64 = 0.0;
    for _ in 0..trials {
        let mut perm: Vec<usize> = (0..8).collect();
        perm.shuffle(&mut rng);
        let permuted = base.permute_tabular(&perm).unwrap();
        let out = forward_batch(std::slice::from_ref(&permuted), &weights, &config, true).unwrap();
        worst_logit = worst_logit.max(out.logits.max_abs_diff(&reference.logits));
        for (rec, ref_rec) in out.attention[0].iter().zip(&reference.attention[0]) {
            for r in 0..config.num_latents {
                for (i, &p) in perm.iter().enumerate() {
                    let moved = rec.matrix.get2(r, 4 + i);
                    let orig = ref_rec.matrix.get2(r, 4 + p);
                    worst_attn = worst_attn.max((moved - orig).abs());
                }
            }
            assert_eq!(
                rec.column_labels[4..].to_vec(),
                perm.iter().map(|&p| FEATURE_NAMES[p]).collect::<Vec<_>>()
            );
        }
    }
    (worst_logit, worst_attn)
}

#[test]
fn identity_carrying_modes_are_permutation_invariant() {
    for mode in [TabularMode::ValueOnly, TabularMode::FeatureId] {
        let (logit, attn) = max_logit_change_under_permutations(mode, 20);
        assert!(logit <= 1e-6, "{mode:?}: {logit}");
        assert!(attn <= 1e-6, "{mode:?}: {attn}");
    }
}

#[test]
fn positional_mode_is_not_permutation_invariant() {
    let (logit, _) = max_logit_change_under_permutations(TabularMode::FourierPe, 20);
    assert!(logit > 1e-3, "{logit}");
}

#[test]
fn permutation_must_be_a_bijection() {
    let base = ModelInput::from_visit(&visit(&[1], &[0.0; 8]));
    assert!(base.permute_tabular(&[0, 0, 1, 2, 3, 4, 5, 6]).is_err());
    assert!(base.permute_tabular(&[0, 1]).is_err());
}

#[test]
fn text_only_and_vitals_only_widths() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let v = visit(&[], &random_vitals(&mut rng));
    for (modality, width) in [(Modality::Text, 4), (Modality::Vitals, 8), (Modality::TextVitals, 12)] {
        let config = ModelConfig {
            modality,
            ..ModelConfig::tiny()
        };
        let weights = ModelWeights::init(&config, 0).unwrap();
        let (_, records) = forward(&v, &weights, &config).unwrap();
        assert_eq!(records[0].matrix.cols(), width);
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    for mode in [TabularMode::FeatureId, TabularMode::FourierPe] {
        let config = ModelConfig {
            tabular_mode: mode,
            ..ModelConfig::tiny()
        };
        let weights = ModelWeights::init(&config, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let inputs = vec![
            ModelInput::from_visit(&visit(&[3, 9, 4], &random_vitals(&mut rng))),
            ModelInput::from_visit(&visit(&[12], &random_vitals(&mut rng))),
        ];
        let labels = [2, 0];
        let report = check_model_gradients(&weights, &inputs, &labels, &config, 1e-4).unwrap();
        assert!(report.passes(1e-4), "{mode:?}: {:?}", report.failing(1e-4));
    }
}
