//! Raw triage records to encoded visits.

mod ingest;
mod labels;
mod prepare;
mod synth;
mod tokenize;
mod vitals;
mod vocab;

pub use ingest::{ingest_csv, read_corpus_dir, IngestReport, CORPUS_FILES};
pub use labels::{select_top_k, truncate_icd, LabelSpace, TopK};
pub use prepare::{encode_visit, prepare, PrepareOptions, PreparedData};
pub use synth::{
    synth_generate, write_corpus_csv, SignalModality, SynthClass, SynthCorpus, SynthSpec, VitalShift, REFERENCE_SCALES,
};
pub use tokenize::tokenize;
pub use vitals::{normalize_vitals, PlausibilityBounds, VitalStats};
pub use vocab::{Vocab, PAD_ID, PAD_TOKEN, UNK_TOKEN};

use serde::{Deserialize, Serialize};

pub use crate::model::FEATURE_NAMES;

/// Number of tabular features: six vital signs, pain and acuity.
pub const NUM_FEATURES: usize = 8;

/// One ED stay as read from source files. Vitals are in canonical units
/// (temperature in degrees Celsius) and ordered as [`FEATURE_NAMES`];
/// `None` marks a missing or implausible reading.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawVisit {
    pub stay_id: String,
    pub chief_complaint: String,
    pub vitals: [Option<f64>; NUM_FEATURES],
    pub icd_code: String,
    pub icd_version: u32,
}

/// A visit ready for the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedVisit {
    pub id: String,
    pub token_ids: Vec<usize>,
    /// z-scored; imputed entries are 0.
    pub vitals: Vec<f64>,
    pub missing: Vec<bool>,
    pub label: usize,
}
