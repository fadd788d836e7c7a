use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::RawVisit;
use crate::error::{Error, Result};

/// Three-character ICD-10 category of a code: `"A41.9"` becomes `"A41"`.
pub fn truncate_icd(code: &str) -> Result<String> {
    let head = code.trim().split('.').next().unwrap_or("");
    if head.chars().count() < 3 || !head.chars().all(|c| c.is_ascii_alphanumeric()) {
        return Err(Error::Data(format!("`{code}` is not an ICD-10 code")));
    }
    Ok(head[..3].to_ascii_uppercase())
}

/// Ordered set of retained diagnosis categories and their training counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    labels: Vec<String>,
    counts: Vec<usize>,
}

impl LabelSpace {
    pub fn new(labels: Vec<String>, counts: Vec<usize>) -> Result<Self> {
        if labels.len() != counts.len() {
            return Err(Error::Data("labels and counts differ in length".into()));
        }
        let mut seen = labels.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != labels.len() {
            return Err(Error::Data("duplicate label".into()));
        }
        Ok(Self { labels, counts })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn label(&self, index: usize) -> Option<&str> {
        self.labels.get(index).map(String::as_str)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&serde_json::to_value(self)?)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: LabelSpace = serde_json::from_str(text)?;
        Self::new(raw.labels, raw.counts)
    }

    pub fn hash(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&value)?)))
    }
}

/// Result of restricting visits to the most frequent categories.
#[derive(Clone, Debug)]
pub struct TopK {
    pub space: LabelSpace,
    pub retained: Vec<RawVisit>,
    /// Visits outside the space, including ones with unusable codes.
    pub dropped: usize,
}

/// Keeps the `k` most frequent categories (ties broken lexicographically)
/// and the visits that carry them.
pub fn select_top_k(visits: &[RawVisit], k: usize) -> Result<TopK> {
    if k == 0 {
        return Err(Error::Config("top-k must be at least 1".into()));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut categories = Vec::with_capacity(visits.len());
    for v in visits {
        let cat = truncate_icd(&v.icd_code).ok();
        if let Some(c) = &cat {
            *counts.entry(c.clone()).or_default() += 1;
        }
        categories.push(cat);
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    if ranked.len() < k {
        return Err(Error::Data(format!(
            "only {} diagnosis categories present, fewer than top-k = {k}",
            ranked.len()
        )));
    }
    ranked.truncate(k);
    let (labels, counts): (Vec<_>, Vec<_>) = ranked.into_iter().unzip();
    let space = LabelSpace::new(labels, counts)?;
    let mut retained = Vec::new();
    for (v, cat) in visits.iter().zip(categories) {
        if let Some(c) = cat {
            if space.index_of(&c).is_some() {
                retained.push(v.clone());
            }
        }
    }
    let dropped = visits.len() - retained.len();
    Ok(TopK {
        space,
        retained,
        dropped,
    })
}
