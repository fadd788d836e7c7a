//! Classification metrics in percent: precision, recall, F1, accuracy and
//! one-vs-rest ROC AUC, macro- and micro-averaged.

mod auc;
mod table;

pub use auc::{binary_auc, per_class_auc, roc_auc, stratified_auc_diff, DiffRow, StratifiedDiff};
pub use table::{format_table, mean_std_cell};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecisionRule {
    /// One positive per visit; ties go to the lowest class index.
    #[default]
    Argmax,
    /// Every class with probability at least 0.5; may be empty.
    Threshold,
}

impl std::str::FromStr for DecisionRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "argmax" => Ok(DecisionRule::Argmax),
            "threshold" => Ok(DecisionRule::Threshold),
            other => Err(Error::Config(format!("unknown decision rule `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    Macro,
    Micro,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_rows(probs: &[Vec<f64>]) -> Result<usize> {
    let k = probs
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Data("no predictions".into()))?;
    for (i, row) in probs.iter().enumerate() {
        if row.len() != k || k == 0 {
            return Err(Error::Data(format!(
                "probability row {i} has {} entries, expected {k}",
                row.len()
            )));
        }
        if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Data(format!("probability row {i} has an invalid entry")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::Data(format!("probability row {i} sums to {s}")));
        }
    }
    Ok(k)
}

/// Positive class set per visit.
pub fn decisions(probs: &[Vec<f64>], rule: DecisionRule) -> Result<Vec<Vec<usize>>> {
    check_rows(probs)?;
    Ok(probs
        .iter()
        .map(|row| match rule {
            DecisionRule::Argmax => vec![argmax(row)],
            DecisionRule::Threshold => (0..row.len()).filter(|&c| row[c] >= 0.5).collect(),
        })
        .collect())
}

/// Per-class true positive, false positive and false negative counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

pub fn class_counts(decisions: &[Vec<usize>], labels: &[usize], k: usize) -> Result<Vec<ClassCounts>> {
    if decisions.is_empty() || decisions.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} decisions for {} labels",
            decisions.len(),
            labels.len()
        )));
    }
    let mut counts = vec![ClassCounts::default(); k];
    for (set, &y) in decisions.iter().zip(labels) {
        if y >= k {
            return Err(Error::out_of_range("label", y, k));
        }
        for &c in set {
            if c >= k {
                return Err(Error::out_of_range("decision", c, k));
            }
            if c == y {
                counts[c].tp += 1;
            } else {
                counts[c].fp += 1;
            }
        }
        if !set.contains(&y) {
            counts[y].fn_ += 1;
        }
    }
    Ok(counts)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Precision, recall and F1 in percent. Macro averaging scores classes with
/// a zero denominator as 0 and still counts them.
pub fn prf1(decisions: &[Vec<usize>], labels: &[usize], k: usize, averaging: Averaging) -> Result<(f64, f64, f64)> {
    let counts = class_counts(decisions, labels, k)?;
    Ok(match averaging {
        Averaging::Micro => {
            let tp: usize = counts.iter().map(|c| c.tp).sum();
            let fp: usize = counts.iter().map(|c| c.fp).sum();
            let fn_: usize = counts.iter().map(|c| c.fn_).sum();
            let p = 100.0 * ratio(tp, tp + fp);
            let r = 100.0 * ratio(tp, tp + fn_);
            (p, r, f1(p, r))
        }
        Averaging::Macro => {
            let kf = k as f64;
            let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
            for c in &counts {
                let cp = 100.0 * ratio(c.tp, c.tp + c.fp);
                let cr = 100.0 * ratio(c.tp, c.tp + c.fn_);
                p += cp;
                r += cr;
                f += f1(cp, cr);
            }
            (p / kf, r / kf, f / kf)
        }
    })
}

/// Share of visits whose highest-probability class is the label, in percent.
pub fn top1_accuracy(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_rows(probs)?;
    if probs.len() != labels.len() {
        return Err(Error::Data("predictions and labels differ in length".into()));
    }
    let hits = probs.iter().zip(labels).filter(|(row, &y)| argmax(row) == y).count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub decision_rule: DecisionRule,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub accuracy: f64,
    pub macro_auc: f64,
    pub micro_auc: f64,
    /// `None` for classes without both positives and negatives in the test set.
    pub per_class_auc: Vec<Option<f64>>,
}

impl MetricsReport {
    pub const SCALARS: [&'static str; 9] = [
        "macro_precision",
        "macro_recall",
        "macro_f1",
        "micro_precision",
        "micro_recall",
        "micro_f1",
        "accuracy",
        "macro_auc",
        "micro_auc",
    ];

    pub fn compute(probs: &[Vec<f64>], labels: &[usize], rule: DecisionRule) -> Result<Self> {
        let k = check_rows(probs)?;
        let dec = decisions(probs, rule)?;
        let (macro_precision, macro_recall, macro_f1) = prf1(&dec, labels, k, Averaging::Macro)?;
        let (micro_precision, micro_recall, micro_f1) = prf1(&dec, labels, k, Averaging::Micro)?;
        let report = Self {
            decision_rule: rule,
            macro_precision,
            macro_recall,
            macro_f1,
            micro_precision,
            micro_recall,
            micro_f1,
            accuracy: top1_accuracy(probs, labels)?,
            macro_auc: roc_auc(probs, labels, Averaging::Macro)?,
            micro_auc: roc_auc(probs, labels, Averaging::Micro)?,
            per_class_auc: per_class_auc(probs, labels)?,
        };
        report.check_identities()?;
        Ok(report)
    }

    /// Micro F1 is the harmonic mean of micro P and R; under argmax all three
    /// micro scores equal top-1 accuracy.
    pub fn check_identities(&self) -> Result<()> {
        let tol = 1e-9;
        let fail = |what: &str| Err(Error::Data(format!("metric identity violated: {what}")));
        if (self.micro_f1 - f1(self.micro_precision, self.micro_recall)).abs() > tol {
            return fail("micro F1 != harmonic mean of micro P and R");
        }
        if self.decision_rule == DecisionRule::Argmax
            && ((self.micro_precision - self.accuracy).abs() > tol || (self.micro_recall - self.accuracy).abs() > tol)
        {
            return fail("micro P = micro R = accuracy under argmax");
        }
        for (name, v) in self.scalars() {
            if !(0.0..=100.0).contains(&v) {
                return fail(&format!("{name} = {v} outside [0, 100]"));
            }
        }
        Ok(())
    }

    /// The nine scalar metrics in [`Self::SCALARS`] order.
    pub fn scalars(&self) -> Vec<(&'static str, f64)> {
        let values = [
            self.macro_precision,
            self.macro_recall,
            self.macro_f1,
            self.micro_precision,
            self.micro_recall,
            self.micro_f1,
            self.accuracy,
            self.macro_auc,
            self.micro_auc,
        ];
        Self::SCALARS.into_iter().zip(values).collect()
    }
}
