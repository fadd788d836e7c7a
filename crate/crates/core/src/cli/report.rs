use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::{format_table, mean_std_cell, StratifiedDiff};
use crate::model::{Modality, TabularMode};
use crate::train::AggregateReport;

/// Mean and sample standard deviation of every metric for one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub modality: Modality,
    pub tabular_mode: TabularMode,
    pub runs: usize,
    pub mean: BTreeMap<String, f64>,
    pub std: BTreeMap<String, f64>,
}

impl SummaryRow {
    pub fn of(report: &AggregateReport) -> Self {
        Self {
            modality: report.modality,
            tabular_mode: report.tabular_mode,
            runs: report.runs.len(),
            mean: report.mean.clone(),
            std: report.std.clone(),
        }
    }

    fn cells(&self, averaging: &str) -> Vec<String> {
        let keys = [
            format!("{averaging}_precision"),
            format!("{averaging}_recall"),
            format!("{averaging}_f1"),
            "accuracy".to_string(),
            format!("{averaging}_auc"),
        ];
        keys.iter().map(|k| mean_std_cell(self.mean[k], self.std[k])).collect()
    }
}

const METRIC_HEADERS: [&str; 5] = ["Prec", "Rec", "F1", "Acc", "AUC"];

/// Tabular encodings compared on micro-averaged metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table1 {
    pub averaging: String,
    pub rows: Vec<SummaryRow>,
}

/// Modalities compared on macro- and micro-averaged metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table2 {
    pub rows: Vec<SummaryRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table3Row {
    pub label: String,
    pub description: String,
    pub auc_a: Option<f64>,
    pub auc_b: Option<f64>,
    pub diff: Option<f64>,
}

/// Per-category AUC difference between two modalities, largest gain first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table3 {
    pub model_a: String,
    pub model_b: String,
    pub rows: Vec<Table3Row>,
}

fn with_header(title: &str, table: String) -> String {
    format!("{title}\n{table}")
}

pub fn table1(reports: &[&AggregateReport]) -> (Table1, String) {
    let rows: Vec<SummaryRow> = reports.iter().map(|r| SummaryRow::of(r)).collect();
    let mut headers = vec!["Tabular encoding"];
    headers.extend(METRIC_HEADERS);
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let name = if r.tabular_mode.is_permutation_invariant() {
                format!("WPE ({})", r.tabular_mode.as_str())
            } else {
                format!("PE ({})", r.tabular_mode.as_str())
            };
            std::iter::once(name).chain(r.cells("micro")).collect()
        })
        .collect();
    let text = with_header(
        "Table 1: tabular encoding, micro-averaged",
        format_table(&headers, &body),
    );
    (
        Table1 {
            averaging: "micro".into(),
            rows,
        },
        text,
    )
}

pub fn table2(reports: &[&AggregateReport]) -> (Table2, String) {
    let rows: Vec<SummaryRow> = reports.iter().map(|r| SummaryRow::of(r)).collect();
    let mut headers = vec!["Modality"];
    headers.extend(METRIC_HEADERS);
    let block = |averaging: &str| {
        let body: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                std::iter::once(r.modality.to_string())
                    .chain(r.cells(averaging))
                    .collect()
            })
            .collect();
        format_table(&headers, &body)
    };
    let text = format!(
        "{}\n{}",
        with_header("Table 2: modalities, macro-averaged", block("macro")),
        with_header("Table 2: modalities, micro-averaged", block("micro"))
    );
    (Table2 { rows }, text)
}

/// Builds the stratified table from two reports' mean per-category AUCs.
pub fn table3(
    a: &AggregateReport,
    b: &AggregateReport,
    titles: &BTreeMap<String, String>,
    top: usize,
) -> Result<(Table3, String)> {
    let labels: Vec<String> = a
        .class_auc_mean
        .keys()
        .chain(b.class_auc_mean.keys())
        .cloned()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let auc_a: Vec<Option<f64>> = labels.iter().map(|l| a.class_auc_mean.get(l).copied()).collect();
    let auc_b: Vec<Option<f64>> = labels.iter().map(|l| b.class_auc_mean.get(l).copied()).collect();
    let diff = StratifiedDiff::from_class_aucs(a.modality.as_str(), b.modality.as_str(), &labels, &auc_a, &auc_b)?;
    let rows: Vec<Table3Row> = diff
        .rows
        .iter()
        .map(|r| Table3Row {
            label: r.label.clone(),
            description: titles.get(&r.label).cloned().unwrap_or_default(),
            auc_a: r.auc_a,
            auc_b: r.auc_b,
            diff: r.diff,
        })
        .collect();
    let n = rows.len();
    let picked: Vec<(&str, &Table3Row)> = if 2 * top >= n {
        rows.iter().map(|r| ("", r)).collect()
    } else {
        let head = rows[..top].iter().map(|r| ("top", r));
        let tail = rows[n - top..].iter().map(|r| ("bottom", r));
        head.chain(tail).collect()
    };
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.1}")).unwrap_or_else(|| "-".into());
    let body: Vec<Vec<String>> = picked
        .iter()
        .map(|(group, r)| {
            vec![
                group.to_string(),
                r.diff.map(|d| format!("{d:+.1}")).unwrap_or_else(|| "-".into()),
                r.label.clone(),
                fmt(r.auc_a),
                fmt(r.auc_b),
                r.description.clone(),
            ]
        })
        .collect();
    let col_a = format!("AUC {}", a.modality);
    let col_b = format!("AUC {}", b.modality);
    let headers = ["", "AUC diff", "ICD-10", col_a.as_str(), col_b.as_str(), "Description"];
    let text = with_header(
        &format!("Table 3: per-category macro AUC, {} minus {}", a.modality, b.modality),
        format_table(&headers, &body),
    );
    Ok((
        Table3 {
            model_a: a.modality.to_string(),
            model_b: b.modality.to_string(),
            rows,
        },
        text,
    ))
}
