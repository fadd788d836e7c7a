use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PlausibilityBounds, RawVisit, FEATURE_NAMES, NUM_FEATURES};
use crate::error::{Error, Result};

/// File names expected inside a corpus directory.
pub const CORPUS_FILES: [&str; 3] = ["edstays.csv", "triage.csv", "diagnosis.csv"];

const TRIAGE_TEXT: &str = "chiefcomplaint";

/// Counts gathered while reading a corpus.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub edstays_rows: usize,
    pub triage_rows: usize,
    pub diagnosis_rows: usize,
    /// Diagnosis rows with a version other than 10.
    pub non_icd10_rows: usize,
    /// ICD-10 diagnosis rows with `seq_num != 1`.
    pub secondary_rows: usize,
    /// Diagnosis rows whose `seq_num` or `icd_version` could not be parsed.
    pub malformed_diagnosis_rows: usize,
    /// Stays lacking a triage row or a primary ICD-10 diagnosis.
    pub unmatched_stays: usize,
    /// Per feature: readings outside the plausibility bounds.
    pub implausible: BTreeMap<String, usize>,
    /// Per feature: non-empty readings that are not numbers.
    pub unparseable: BTreeMap<String, usize>,
    pub visits: usize,
}

struct Table {
    name: String,
    headers: HashMap<String, usize>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
        let headers = reader
            .headers()?
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim().to_ascii_lowercase(), i))
            .collect();
        let rows = reader.records().collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            name: path.display().to_string(),
            headers,
            rows,
        })
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.headers.get(name).copied().ok_or_else(|| Error::MissingColumn {
            file: self.name.clone(),
            column: name.to_string(),
        })
    }
}

fn field(row: &csv::StringRecord, col: usize) -> &str {
    row.get(col).unwrap_or("").trim()
}

/// Joins the three source tables into one visit per stay.
///
/// Stays are emitted in `edstays` order. A stay is kept when it has a triage
/// row and a diagnosis row with `seq_num == 1` and `icd_version == 10`.
/// Implausible and unparseable vitals become missing and are tallied.
pub fn ingest_csv(
    edstays: &Path,
    triage: &Path,
    diagnosis: &Path,
    bounds: &PlausibilityBounds,
) -> Result<(Vec<RawVisit>, IngestReport)> {
    let stays = Table::read(edstays)?;
    let tri = Table::read(triage)?;
    let diag = Table::read(diagnosis)?;
    let mut report = IngestReport {
        edstays_rows: stays.rows.len(),
        triage_rows: tri.rows.len(),
        diagnosis_rows: diag.rows.len(),
        ..Default::default()
    };

    let stay_col = stays.column("stay_id")?;
    let tri_stay = tri.column("stay_id")?;
    let tri_text = tri.column(TRIAGE_TEXT)?;
    let tri_features = FEATURE_NAMES
        .iter()
        .map(|f| tri.column(f))
        .collect::<Result<Vec<_>>>()?;
    let diag_stay = diag.column("stay_id")?;
    let diag_seq = diag.column("seq_num")?;
    let diag_code = diag.column("icd_code")?;
    let diag_version = diag.column("icd_version")?;

    let mut primary: HashMap<&str, &str> = HashMap::new();
    for row in &diag.rows {
        let seq = field(row, diag_seq).parse::<u32>();
        let version = field(row, diag_version).parse::<u32>();
        let (Ok(seq), Ok(version)) = (seq, version) else {
            report.malformed_diagnosis_rows += 1;
            continue;
        };
        if version != 10 {
            report.non_icd10_rows += 1;
        } else if seq != 1 {
            report.secondary_rows += 1;
        } else {
            primary.entry(field(row, diag_stay)).or_insert(field(row, diag_code));
        }
    }

    let mut triage_rows: HashMap<&str, &csv::StringRecord> = HashMap::new();
    for row in &tri.rows {
        triage_rows.entry(field(row, tri_stay)).or_insert(row);
    }

    for name in FEATURE_NAMES {
        report.implausible.insert(name.to_string(), 0);
        report.unparseable.insert(name.to_string(), 0);
    }

    let mut seen = HashSet::new();
    let mut visits = Vec::new();
    for row in &stays.rows {
        let id = field(row, stay_col);
        if !seen.insert(id) {
            continue;
        }
        let (Some(t), Some(code)) = (triage_rows.get(id), primary.get(id)) else {
            report.unmatched_stays += 1;
            continue;
        };
        let mut vitals = [None; NUM_FEATURES];
        for (j, &col) in tri_features.iter().enumerate() {
            let raw = field(t, col);
            if raw.is_empty() {
                continue;
            }
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => match bounds.clean(j, v) {
                    Some(c) => vitals[j] = Some(c),
                    None => *report.implausible.get_mut(FEATURE_NAMES[j]).expect("seeded") += 1,
                },
                _ => *report.unparseable.get_mut(FEATURE_NAMES[j]).expect("seeded") += 1,
            }
        }
        visits.push(RawVisit {
            stay_id: id.to_string(),
            chief_complaint: field(t, tri_text).to_string(),
            vitals,
            icd_code: code.to_string(),
            icd_version: 10,
        });
    }
    report.visits = visits.len();
    log::info!(
        "ingested {} visits from {} stays ({} secondary, {} non-ICD-10 diagnosis rows dropped)",
        report.visits,
        report.edstays_rows,
        report.secondary_rows,
        report.non_icd10_rows
    );
    Ok((visits, report))
}

/// Reads `edstays.csv`, `triage.csv` and `diagnosis.csv` from `dir`.
pub fn read_corpus_dir(dir: &Path, bounds: &PlausibilityBounds) -> Result<(Vec<RawVisit>, IngestReport)> {
    let [e, t, d] = CORPUS_FILES.map(|f| dir.join(f));
    ingest_csv(&e, &t, &d, bounds)
}
