use std::f64::consts::PI;

use super::forward::{ModelInput, TabularToken};
use super::{BoundParams, ModelConfig, ModelWeights, TabularMode};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Fourier features of integer positions.
///
/// Position `p` maps to `x = 2p/(max_resolution-1) - 1` (0 when the
/// resolution is 1). Each row is `[sin(f_b pi x)..., cos(f_b pi x)..., x]`
/// with `f_b` linearly spaced from 1 to `max_resolution/2`.
pub fn fourier_position_encoding(positions: &[usize], num_bands: usize, max_resolution: usize) -> Result<Tensor> {
    if num_bands == 0 {
        return Err(Error::Config("num_bands must be at least 1".into()));
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= max_resolution) {
        return Err(Error::out_of_range("position", p, max_resolution));
    }
    let top = max_resolution as f64 / 2.0;
    let freqs: Vec<f64> = (0..num_bands)
        .map(|b| {
            if num_bands == 1 {
                1.0
            } else {
                1.0 + (top - 1.0) * b as f64 / (num_bands - 1) as f64
            }
        })
        .collect();
    let width = 2 * num_bands + 1;
    let mut data = Vec::with_capacity(positions.len() * width);
    for &p in positions {
        let x = if max_resolution <= 1 {
            0.0
        } else {
            2.0 * p as f64 / (max_resolution - 1) as f64 - 1.0
        };
        data.extend(freqs.iter().map(|f| (f * PI * x).sin()));
        data.extend(freqs.iter().map(|f| (f * PI * x).cos()));
        data.push(x);
    }
    Tensor::matrix(positions.len(), width, data)
}

/// Positional table for `count` positions, zero-padded on the right to `width`.
fn padded_pe(count: usize, bands: usize, width: usize) -> Result<Tensor> {
    let pe = fourier_position_encoding(&(0..count).collect::<Vec<_>>(), bands, count)?;
    let mut out = Tensor::zeros(&[count, width]);
    let c = pe.cols();
    for r in 0..count {
        out.data_mut()[r * width..r * width + c].copy_from_slice(pe.row(r));
    }
    Ok(out)
}

/// Text rows for a batch: token embedding plus positional channels, padded
/// rows zeroed. Returns `[B*L x D]` and the row mask.
pub(crate) fn build_text<'t>(
    tape: &mut Tape<'t>,
    params: &BoundParams,
    inputs: &[ModelInput],
    config: &ModelConfig,
) -> Result<(Var, Vec<bool>)> {
    let (l, d) = (config.max_text_len, config.embed_dim);
    let pe = if config.text_pe {
        Some(padded_pe(l, config.text_pe_bands, d)?)
    } else {
        None
    };
    let mut index = Vec::with_capacity(inputs.len() * l);
    let mut mask = Vec::with_capacity(inputs.len() * l);
    let mut pos = Tensor::zeros(&[inputs.len() * l, d]);
    for (b, input) in inputs.iter().enumerate() {
        if input.token_ids.len() > l {
            return Err(Error::out_of_range("text length", input.token_ids.len(), l));
        }
        for p in 0..l {
            let id = input.token_ids.get(p).copied();
            if let Some(id) = id {
                if id >= config.vocab_size {
                    return Err(Error::out_of_range("token id", id, config.vocab_size));
                }
                if let Some(pe) = &pe {
                    let row = b * l + p;
                    pos.data_mut()[row * d..(row + 1) * d].copy_from_slice(pe.row(p));
                }
            }
            index.push(id);
            mask.push(id.is_some());
        }
    }
    let table = params.get("embed.token")?;
    let mut rows = tape.gather_rows(table, index)?;
    if pe.is_some() {
        let pos = tape.constant(pos)?;
        rows = tape.add(rows, pos)?;
    }
    Ok((rows, mask))
}

/// Tabular rows for a batch, one token per entry of `input.tabular`: `[B*F x D]`.
pub(crate) fn build_tabular<'t>(
    tape: &mut Tape<'t>,
    params: &BoundParams,
    inputs: &[ModelInput],
    config: &ModelConfig,
) -> Result<Var> {
    let (f, d) = (config.num_tabular_features, config.embed_dim);
    let tokens: Vec<&TabularToken> = inputs
        .iter()
        .map(|i| {
            if i.tabular.len() != f {
                return Err(Error::out_of_range("tabular arity", i.tabular.len(), f));
            }
            Ok(i.tabular.iter())
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    if let Some(t) = tokens.iter().find(|t| t.feature >= f) {
        return Err(Error::out_of_range("feature index", t.feature, f));
    }
    let shared = !matches!(config.tabular_mode, TabularMode::FeatureId);
    let dir_index = tokens
        .iter()
        .map(|t| Some(if shared { 0 } else { t.feature }))
        .collect();
    let dirs = tape.gather_rows(params.get("embed.feature_value")?, dir_index)?;
    let mut rows = tape.scale_rows(dirs, tokens.iter().map(|t| t.value).collect())?;
    match config.tabular_mode {
        TabularMode::ValueOnly => {}
        TabularMode::FeatureId => {
            let ids = tokens.iter().map(|t| Some(t.feature)).collect();
            let id_rows = tape.gather_rows(params.get("embed.feature_id")?, ids)?;
            rows = tape.add(rows, id_rows)?;
        }
        TabularMode::FourierPe => {
            let pe = padded_pe(f, config.text_pe_bands, d)?;
            let mut tiled = Vec::with_capacity(tokens.len() * d);
            for _ in inputs {
                tiled.extend_from_slice(pe.data());
            }
            let pos = tape.constant(Tensor::matrix(tokens.len(), d, tiled)?)?;
            rows = tape.add(rows, pos)?;
        }
    }
    if config.missing_indicator {
        let idx = tokens.iter().map(|t| t.missing.then_some(t.feature)).collect();
        let miss = tape.gather_rows(params.get("embed.missing")?, idx)?;
        rows = tape.add(rows, miss)?;
    }
    Ok(rows)
}

/// Embeds one token sequence; returns `[L x D]` rows and the validity mask.
pub fn embed_text(token_ids: &[usize], weights: &ModelWeights, config: &ModelConfig) -> Result<(Tensor, Vec<bool>)> {
    let mut tape = Tape::new();
    let params = weights.bind(&mut tape)?;
    let input = ModelInput {
        token_ids: token_ids.to_vec(),
        tabular: Vec::new(),
    };
    let (rows, mask) = build_text(&mut tape, &params, std::slice::from_ref(&input), config)?;
    Ok((tape.value(rows).clone(), mask))
}

/// Encodes one visit's tabular values (canonical feature order) as `[F x D]`.
pub fn encode_tabular(
    values: &[f64],
    missing: &[bool],
    weights: &ModelWeights,
    config: &ModelConfig,
) -> Result<Tensor> {
    let f = config.num_tabular_features;
    if values.len() != f || missing.len() != f {
        return Err(Error::out_of_range("tabular arity", values.len(), f));
    }
    let input = ModelInput {
        token_ids: Vec::new(),
        tabular: (0..f)
            .map(|j| TabularToken {
                feature: j,
                value: values[j],
                missing: missing[j],
            })
            .collect(),
    };
    let mut tape = Tape::new();
    let params = weights.bind(&mut tape)?;
    let rows = build_tabular(&mut tape, &params, std::slice::from_ref(&input), config)?;
    Ok(tape.value(rows).clone())
}
