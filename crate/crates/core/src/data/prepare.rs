use serde::{Deserialize, Serialize};

use super::{
    normalize_vitals, select_top_k, tokenize, truncate_icd, EncodedVisit, LabelSpace, PlausibilityBounds, RawVisit,
    VitalStats, Vocab,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareOptions {
    pub top_k: usize,
    pub min_freq: usize,
    pub max_text_len: usize,
    pub bounds: PlausibilityBounds,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            top_k: 50,
            min_freq: 1,
            max_text_len: 8,
            bounds: PlausibilityBounds::default(),
        }
    }
}

/// Encoded train/test visits plus the artifacts fitted on the training split.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub vocab: Vocab,
    pub labels: LabelSpace,
    pub stats: VitalStats,
    pub train: Vec<EncodedVisit>,
    pub test: Vec<EncodedVisit>,
    /// Training visits outside the label space.
    pub dropped_train: usize,
    /// Test visits whose category is not in the training label space.
    pub dropped_test: usize,
}

/// Encodes one visit; `None` when its category is outside `labels`.
pub fn encode_visit(
    raw: &RawVisit,
    vocab: &Vocab,
    labels: &LabelSpace,
    stats: &VitalStats,
    max_text_len: usize,
) -> Option<EncodedVisit> {
    let label = labels.index_of(&truncate_icd(&raw.icd_code).ok()?)?;
    let (vitals, missing) = normalize_vitals(&raw.vitals, stats);
    Some(EncodedVisit {
        id: raw.stay_id.clone(),
        token_ids: vocab.encode(&tokenize(&raw.chief_complaint), max_text_len),
        vitals,
        missing,
        label,
    })
}

/// Fits vocabulary, label space and vital statistics on `train_idx` only,
/// then encodes both splits.
pub fn prepare(
    raw: &[RawVisit],
    train_idx: &[usize],
    test_idx: &[usize],
    opts: &PrepareOptions,
) -> Result<PreparedData> {
    if let Some(&i) = train_idx.iter().chain(test_idx).find(|&&i| i >= raw.len()) {
        return Err(Error::out_of_range("visit index", i, raw.len()));
    }
    if train_idx.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let train_raw: Vec<RawVisit> = train_idx.iter().map(|&i| raw[i].clone()).collect();
    let top = select_top_k(&train_raw, opts.top_k)?;
    let token_lists: Vec<Vec<String>> = top.retained.iter().map(|v| tokenize(&v.chief_complaint)).collect();
    let vocab = Vocab::build(token_lists.iter().map(Vec::as_slice), opts.min_freq);
    let stats = VitalStats::fit(&top.retained, opts.bounds.clone())?;

    let encode = |v: &RawVisit| encode_visit(v, &vocab, &top.space, &stats, opts.max_text_len);
    let train: Vec<EncodedVisit> = top.retained.iter().filter_map(encode).collect();
    let test: Vec<EncodedVisit> = test_idx.iter().filter_map(|&i| encode(&raw[i])).collect();
    let dropped_test = test_idx.len() - test.len();
    if top.dropped > 0 || dropped_test > 0 {
        log::info!(
            "dropped {} training and {dropped_test} test visits outside the label space",
            top.dropped
        );
    }
    Ok(PreparedData {
        vocab,
        labels: top.space,
        stats,
        train,
        test,
        dropped_train: top.dropped,
        dropped_test,
    })
}
