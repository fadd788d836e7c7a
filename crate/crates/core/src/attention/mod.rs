//! Cross-attention heatmaps: corpus means, single visits, modality shares.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{EncodedVisit, Vocab, PAD_TOKEN};
use crate::error::{Error, Result};
use crate::model::{forward_batch, ModelConfig, ModelInput, ModelWeights};

const CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint_hash: String,
    pub dataset_hash: String,
    /// Stay id of the visit, or `"mean"` for a corpus average.
    pub visit: String,
}

/// One block's latent-by-input attention, ready for plotting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapExport {
    pub block_index: usize,
    pub row_labels: Vec<String>,
    pub column_labels: Vec<String>,
    /// The first `text_columns` columns are text positions; the rest are tabular.
    pub text_columns: usize,
    pub matrix: Vec<Vec<f64>>,
    /// Mean of each column over latent rows.
    pub column_mean: Vec<f64>,
    pub provenance: Provenance,
    pub notes: Vec<String>,
}

impl HeatmapExport {
    fn new(
        block_index: usize,
        column_labels: Vec<String>,
        text_columns: usize,
        matrix: Vec<Vec<f64>>,
        provenance: Provenance,
        notes: Vec<String>,
    ) -> Self {
        let rows = matrix.len().max(1) as f64;
        let column_mean = (0..column_labels.len())
            .map(|c| matrix.iter().map(|r| r[c]).sum::<f64>() / rows)
            .collect();
        Self {
            block_index,
            row_labels: (0..matrix.len()).map(|i| format!("L{i}")).collect(),
            column_labels,
            text_columns,
            matrix,
            column_mean,
            provenance,
            notes,
        }
    }

    /// Column-mean mass of each tabular column, by label.
    pub fn tabular_mass(&self) -> Vec<(String, f64)> {
        self.column_labels[self.text_columns..]
            .iter()
            .cloned()
            .zip(self.column_mean[self.text_columns..].iter().copied())
            .collect()
    }

    /// Header of column labels, then one row per latent.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.column_labels)?;
        for row in &self.matrix {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&serde_json::to_value(self)?)?)
    }

    /// Writes `<stem>.csv` and `<stem>.json` under `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv()?)?;
        std::fs::write(dir.join(format!("{stem}.json")), self.to_json()?)?;
        Ok(())
    }
}

/// Hex SHA-256 of the visits' canonical JSON.
pub fn dataset_hash(visits: &[EncodedVisit]) -> Result<String> {
    let value = serde_json::to_value(visits)?;
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(&value)?)))
}

fn check_block(block: usize, config: &ModelConfig) -> Result<()> {
    if block >= config.depth {
        return Err(Error::out_of_range("block index", block, config.depth));
    }
    Ok(())
}

/// Number of real text positions the model sees for `input`.
fn text_len(input: &ModelInput, config: &ModelConfig) -> usize {
    if !config.modality.uses_text() {
        return 0;
    }
    let n = input.token_ids.len().min(config.max_text_len);
    if n == 0 && !config.modality.uses_vitals() {
        1
    } else {
        n
    }
}

/// Element-wise mean of one block's attention over `inputs`. Tabular columns
/// are averaged over every input; text position `p` only over inputs where
/// that position holds a real token.
pub fn mean_attention(
    inputs: &[ModelInput],
    weights: &ModelWeights,
    config: &ModelConfig,
    block: usize,
    provenance: Provenance,
) -> Result<HeatmapExport> {
    check_block(block, config)?;
    if inputs.is_empty() {
        return Err(Error::Data("cannot average attention over an empty dataset".into()));
    }
    let n = config.num_latents;
    let m = config.input_len();
    let text_columns = if config.modality.uses_text() {
        config.max_text_len
    } else {
        0
    };
    let mut sum = vec![vec![0.0; m]; n];
    let mut labels = None;
    for chunk in inputs.chunks(CHUNK) {
        let out = forward_batch(chunk, weights, config, true)?;
        for records in &out.attention {
            let rec = &records[block];
            labels.get_or_insert_with(|| rec.column_labels.clone());
            for (r, row) in sum.iter_mut().enumerate() {
                for (c, s) in row.iter_mut().enumerate() {
                    *s += rec.matrix.get2(r, c);
                }
            }
        }
    }
    let mut counts = vec![inputs.len() as f64; m];
    for (p, count) in counts.iter_mut().enumerate().take(text_columns) {
        *count = inputs.iter().filter(|i| text_len(i, config) > p).count() as f64;
    }
    let matrix = sum
        .into_iter()
        .map(|row| {
            row.into_iter()
                .zip(&counts)
                .map(|(s, &c)| if c > 0.0 { s / c } else { 0.0 })
                .collect()
        })
        .collect();
    let notes = vec![
        format!("mean over {} visits", inputs.len()),
        "text position columns are averaged only over visits where the position holds a token, \
         so rows need not sum to one"
            .to_string(),
    ];
    Ok(HeatmapExport::new(
        block,
        labels.unwrap_or_else(|| config.column_labels()),
        text_columns,
        matrix,
        provenance,
        notes,
    ))
}

/// Corpus-mean cross-attention of `block` over encoded visits.
pub fn mean_cross_attention(
    visits: &[EncodedVisit],
    weights: &ModelWeights,
    config: &ModelConfig,
    block: usize,
    checkpoint_hash: &str,
) -> Result<HeatmapExport> {
    let provenance = Provenance {
        checkpoint_hash: checkpoint_hash.to_string(),
        dataset_hash: dataset_hash(visits)?,
        visit: "mean".to_string(),
    };
    let inputs: Vec<ModelInput> = visits.iter().map(ModelInput::from_visit).collect();
    mean_attention(&inputs, weights, config, block, provenance)
}

/// Attention of one visit; text columns are labelled with its tokens when
/// a vocabulary is given.
pub fn per_visit_attention(
    visit: &EncodedVisit,
    weights: &ModelWeights,
    config: &ModelConfig,
    block: usize,
    vocab: Option<&Vocab>,
    checkpoint_hash: &str,
) -> Result<HeatmapExport> {
    check_block(block, config)?;
    let input = ModelInput::from_visit(visit);
    let out = forward_batch(std::slice::from_ref(&input), weights, config, true)?;
    let rec = &out.attention[0][block];
    let text_columns = if config.modality.uses_text() {
        config.max_text_len
    } else {
        0
    };
    let mut labels = rec.column_labels.clone();
    if let Some(vocab) = vocab {
        for (p, label) in labels.iter_mut().enumerate().take(text_columns) {
            *label = match visit.token_ids.get(p) {
                Some(&id) => vocab.token(id).unwrap_or("<unk>").to_string(),
                None => PAD_TOKEN.to_string(),
            };
        }
    }
    let matrix = (0..rec.matrix.rows()).map(|r| rec.matrix.row(r).to_vec()).collect();
    let provenance = Provenance {
        checkpoint_hash: checkpoint_hash.to_string(),
        dataset_hash: dataset_hash(std::slice::from_ref(visit))?,
        visit: visit.id.clone(),
    };
    Ok(HeatmapExport::new(
        block,
        labels,
        text_columns,
        matrix,
        provenance,
        Vec::new(),
    ))
}

/// Share of attention mass on text and tabular columns, summing to one.
pub fn modality_share(export: &HeatmapExport) -> (f64, f64) {
    let mut text = 0.0;
    let mut tab = 0.0;
    for row in &export.matrix {
        text += row[..export.text_columns].iter().sum::<f64>();
        tab += row[export.text_columns..].iter().sum::<f64>();
    }
    let total = text + tab;
    if total <= 0.0 {
        return (0.0, 0.0);
    }
    (text / total, tab / total)
}
