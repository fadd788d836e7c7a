use serde::{Deserialize, Serialize};

use super::blocks::{cross_block, head_average, latent_block};
use super::encode::{build_tabular, build_text};
use super::{AttentionRecord, BoundParams, Modality, ModelConfig, ModelWeights, UNK_ID};
use crate::data::EncodedVisit;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// One tabular token: a feature's identity travels with its value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularToken {
    pub feature: usize,
    pub value: f64,
    pub missing: bool,
}

/// Model-facing view of a visit. Tabular tokens are listed in input-array
/// order, which is canonical feature order unless explicitly permuted.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub token_ids: Vec<usize>,
    pub tabular: Vec<TabularToken>,
}

impl ModelInput {
    pub fn from_visit(visit: &EncodedVisit) -> Self {
        Self {
            token_ids: visit.token_ids.clone(),
            tabular: visit
                .vitals
                .iter()
                .zip(&visit.missing)
                .enumerate()
                .map(|(feature, (&value, &missing))| TabularToken {
                    feature,
                    value,
                    missing,
                })
                .collect(),
        }
    }

    /// Reorders tabular tokens: position `i` receives the token at `perm[i]`.
    pub fn permute_tabular(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.tabular.len()];
        if perm.len() != self.tabular.len() {
            return Err(Error::out_of_range(
                "permutation length",
                perm.len(),
                self.tabular.len(),
            ));
        }
        for &p in perm {
            if p >= seen.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Data(format!("{perm:?} is not a permutation")));
            }
        }
        Ok(Self {
            token_ids: self.token_ids.clone(),
            tabular: perm.iter().map(|&p| self.tabular[p]).collect(),
        })
    }

    fn column_labels(&self, config: &ModelConfig) -> Vec<String> {
        let mut labels = Vec::with_capacity(config.input_len());
        if config.modality.uses_text() {
            labels.extend((0..config.max_text_len).map(|p| format!("T{p}")));
        }
        if config.modality.uses_vitals() {
            labels.extend(self.tabular.iter().map(|t| config.feature_name(t.feature)));
        }
        labels
    }
}

/// Nodes of a recorded batch forward pass.
pub(crate) struct ForwardGraph {
    /// `[B x K]`
    pub logits: Var,
    /// Per repeat, per head: `[B*N x M]`.
    pub attention: Vec<Vec<Var>>,
}

pub(crate) fn build_forward<'t>(
    tape: &mut Tape<'t>,
    params: &BoundParams,
    inputs: &[ModelInput],
    config: &ModelConfig,
) -> Result<ForwardGraph> {
    let batch = inputs.len();
    if batch == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    let (l, f, n) = (config.max_text_len, config.num_tabular_features, config.num_latents);

    let text_only_inputs;
    let inputs = if config.modality == Modality::Text && inputs.iter().any(|i| i.token_ids.is_empty()) {
        // An empty complaint would leave nothing to attend to.
        text_only_inputs = inputs
            .iter()
            .map(|i| ModelInput {
                token_ids: if i.token_ids.is_empty() {
                    vec![UNK_ID]
                } else {
                    i.token_ids.clone()
                },
                tabular: i.tabular.clone(),
            })
            .collect::<Vec<_>>();
        &text_only_inputs[..]
    } else {
        inputs
    };

    let (array, mask) = match config.modality {
        Modality::Text => build_text(tape, params, inputs, config)?,
        Modality::Vitals => (build_tabular(tape, params, inputs, config)?, vec![true; batch * f]),
        Modality::TextVitals => {
            let (text, text_mask) = build_text(tape, params, inputs, config)?;
            let tab = build_tabular(tape, params, inputs, config)?;
            let stacked = tape.concat_rows(&[text, tab])?;
            let m = l + f;
            let mut order = Vec::with_capacity(batch * m);
            let mut mask = Vec::with_capacity(batch * m);
            for b in 0..batch {
                order.extend((0..l).map(|p| Some(b * l + p)));
                order.extend((0..f).map(|j| Some(batch * l + b * f + j)));
                mask.extend_from_slice(&text_mask[b * l..(b + 1) * l]);
                mask.extend(std::iter::repeat_n(true, f));
            }
            (tape.gather_rows(stacked, order)?, mask)
        }
    };

    let init = params.get("latent_init")?;
    let mut latent = tape.gather_rows(init, (0..batch).flat_map(|_| (0..n).map(Some)).collect())?;
    let mut attention = Vec::with_capacity(config.depth);
    for r in 0..config.depth {
        let block = config.block_for_repeat(r);
        let (next, attn) = cross_block(tape, params, block, latent, array, &mask, batch, config)?;
        latent = latent_block(tape, params, block, next, batch, config)?;
        attention.push(attn);
    }
    let pooled = tape.mean_row_groups(latent, n)?;
    let logits = tape.matmul(pooled, params.get("head.weight")?)?;
    let logits = tape.add_row(logits, params.get("head.bias")?)?;
    Ok(ForwardGraph { logits, attention })
}

#[derive(Clone, Debug)]
pub struct BatchOutput {
    /// `[B x K]`
    pub logits: Tensor,
    /// Per visit, one record per depth repeat; empty unless requested.
    pub attention: Vec<Vec<AttentionRecord>>,
}

pub(crate) fn collect_attention(
    tape: &Tape<'_>,
    graph: &ForwardGraph,
    inputs: &[ModelInput],
    config: &ModelConfig,
) -> Vec<Vec<AttentionRecord>> {
    let n = config.num_latents;
    let mut out: Vec<Vec<AttentionRecord>> = inputs.iter().map(|_| Vec::with_capacity(config.depth)).collect();
    for (r, heads) in graph.attention.iter().enumerate() {
        let avg = head_average(tape, heads);
        let m = avg.cols();
        for (b, input) in inputs.iter().enumerate() {
            let data = avg.data()[b * n * m..(b + 1) * n * m].to_vec();
            out[b].push(AttentionRecord {
                block_index: r,
                matrix: Tensor::raw(vec![n, m], data),
                column_labels: input.column_labels(config),
            });
        }
    }
    out
}

/// Forward pass over a batch of inputs without gradient bookkeeping by callers.
pub fn forward_batch(
    inputs: &[ModelInput],
    weights: &ModelWeights,
    config: &ModelConfig,
    record_attention: bool,
) -> Result<BatchOutput> {
    let mut tape = Tape::new();
    let params = weights.bind(&mut tape)?;
    let graph = build_forward(&mut tape, &params, inputs, config)?;
    let attention = if record_attention {
        collect_attention(&tape, &graph, inputs, config)
    } else {
        Vec::new()
    };
    Ok(BatchOutput {
        logits: tape.value(graph.logits).clone(),
        attention,
    })
}

/// Logits `[K]` and one attention record per depth repeat for a single visit.
pub fn forward(
    visit: &EncodedVisit,
    weights: &ModelWeights,
    config: &ModelConfig,
) -> Result<(Tensor, Vec<AttentionRecord>)> {
    let input = ModelInput::from_visit(visit);
    let out = forward_batch(std::slice::from_ref(&input), weights, config, true)?;
    let k = out.logits.cols();
    let logits = out.logits.reshape(vec![k])?;
    Ok((logits, out.attention.into_iter().next().unwrap_or_default()))
}
