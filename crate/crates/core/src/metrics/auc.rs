use serde::{Deserialize, Serialize};

use super::Averaging;
use crate::data::LabelSpace;
use crate::error::{Error, Result};

/// Mann-Whitney AUC in percent with midranks for ties; `None` unless both
/// classes are present.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * order[i..=j].iter().filter(|&&o| positive[o]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some(100.0 * (rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// One-vs-rest AUC of every class.
pub fn per_class_auc(scores: &[Vec<f64>], labels: &[usize]) -> Result<Vec<Option<f64>>> {
    let k = check_rows_loose(scores)?;
    if scores.len() != labels.len() {
        return Err(Error::Data("scores and labels differ in length".into()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::out_of_range("label", y, k));
    }
    Ok((0..k)
        .map(|c| {
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            binary_auc(&s, &pos)
        })
        .collect())
}

fn check_rows_loose(scores: &[Vec<f64>]) -> Result<usize> {
    let k = scores
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Data("no scores".into()))?;
    if scores.iter().any(|r| r.len() != k || r.iter().any(|v| !v.is_finite())) {
        return Err(Error::Data("scores must be finite rows of equal length".into()));
    }
    Ok(k)
}

/// Macro: mean over classes that have positives and negatives (others are
/// skipped with a warning). Micro: AUC of all (visit, class) pairs pooled.
pub fn roc_auc(scores: &[Vec<f64>], labels: &[usize], averaging: Averaging) -> Result<f64> {
    let per_class = per_class_auc(scores, labels)?;
    match averaging {
        Averaging::Macro => {
            let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
            if valid.is_empty() {
                return Err(Error::Data("no class has both positives and negatives".into()));
            }
            let skipped = per_class.len() - valid.len();
            if skipped > 0 {
                log::warn!("{skipped} classes lack positives or negatives; excluded from macro AUC");
            }
            Ok(valid.iter().sum::<f64>() / valid.len() as f64)
        }
        Averaging::Micro => {
            let flat: Vec<f64> = scores.iter().flatten().copied().collect();
            let pos: Vec<bool> = labels
                .iter()
                .flat_map(|&y| (0..per_class.len()).map(move |c| c == y))
                .collect();
            binary_auc(&flat, &pos).ok_or_else(|| Error::Data("all pooled pairs belong to one class".into()))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffRow {
    pub label: String,
    pub auc_a: Option<f64>,
    pub auc_b: Option<f64>,
    /// `auc_a - auc_b` in points.
    pub diff: Option<f64>,
}

/// Per-class AUC of model A against model B, sorted by descending difference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratifiedDiff {
    pub model_a: String,
    pub model_b: String,
    pub rows: Vec<DiffRow>,
}

impl StratifiedDiff {
    /// Builds the sorted table from precomputed per-class AUCs; classes with
    /// an undefined difference go last in label order.
    pub fn from_class_aucs(
        model_a: &str,
        model_b: &str,
        labels: &[String],
        a: &[Option<f64>],
        b: &[Option<f64>],
    ) -> Result<Self> {
        if labels.len() != a.len() || labels.len() != b.len() {
            return Err(Error::Data("per-class AUC lists do not cover the label space".into()));
        }
        let mut rows: Vec<DiffRow> = labels
            .iter()
            .zip(a.iter().zip(b))
            .map(|(l, (&x, &y))| DiffRow {
                label: l.clone(),
                auc_a: x,
                auc_b: y,
                diff: x.zip(y).map(|(x, y)| x - y),
            })
            .collect();
        rows.sort_by(|r, s| match (r.diff, s.diff) {
            (Some(x), Some(y)) => y.total_cmp(&x).then_with(|| r.label.cmp(&s.label)),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => r.label.cmp(&s.label),
        });
        Ok(Self {
            model_a: model_a.to_string(),
            model_b: model_b.to_string(),
            rows,
        })
    }

    /// Rank of `label` in the sorted table.
    pub fn rank_of(&self, label: &str) -> Option<usize> {
        self.rows.iter().position(|r| r.label == label)
    }

    pub fn table(&self, top: usize) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.1}")).unwrap_or_else(|| "-".into());
        let headers = ["ICD", self.model_a.as_str(), self.model_b.as_str(), "diff"];
        let n = self.rows.len();
        let pick: Vec<&DiffRow> = if 2 * top >= n {
            self.rows.iter().collect()
        } else {
            self.rows[..top].iter().chain(&self.rows[n - top..]).collect()
        };
        let rows: Vec<Vec<String>> = pick
            .iter()
            .map(|r| {
                vec![
                    r.label.clone(),
                    fmt(r.auc_a),
                    fmt(r.auc_b),
                    r.diff.map(|d| format!("{d:+.1}")).unwrap_or_else(|| "-".into()),
                ]
            })
            .collect();
        super::format_table(&headers, &rows)
    }
}

/// Per-class AUC difference between two models scored on the same visits.
pub fn stratified_auc_diff(
    scores_a: &[Vec<f64>],
    scores_b: &[Vec<f64>],
    labels: &[usize],
    space: &LabelSpace,
) -> Result<StratifiedDiff> {
    if scores_a.len() != scores_b.len() {
        return Err(Error::Data("score sets cover different visits".into()));
    }
    let a = per_class_auc(scores_a, labels)?;
    let b = per_class_auc(scores_b, labels)?;
    if a.len() != space.len() {
        return Err(Error::out_of_range("score width", a.len(), space.len()));
    }
    StratifiedDiff::from_class_aucs("A", "B", space.labels(), &a, &b)
}
